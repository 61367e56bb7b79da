//! Comparison systems that bridge audio and images without training on
//! audio-teacher pairs: a random projection, a learned text-to-text mapping,
//! and a two-stage zero-shot cascade.

use crate::embedding::{dot, normalize_matrix_rows, EmbeddingSet, Matrix, Modality};
use crate::error::{Error, Result};
use crate::eval::{zero_shot_predict, zero_shot_scores, RankedList};
use crate::objective::distill_loss;
use crate::rng::{gaussian_vec, stream, StreamKind};
use crate::trainer::{affine, column_sums, epoch_batches, glorot_bound, relu, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    RandomProjection,
    TextMapping,
    CascadedZeroShot,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::RandomProjection,
        BaselineKind::TextMapping,
        BaselineKind::CascadedZeroShot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RandomProjection => "random_projection",
            BaselineKind::TextMapping => "text_mapping",
            BaselineKind::CascadedZeroShot => "cascaded_zero_shot",
        }
    }

    /// Row title used in summary tables.
    pub fn title(self) -> &'static str {
        match self {
            BaselineKind::RandomProjection => "Random Projection",
            BaselineKind::TextMapping => "Text Embeddings Mapping",
            BaselineKind::CascadedZeroShot => "Cascaded Zero-Shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Projects audio features with a seeded Gaussian matrix (entry variance
/// `1 / d_teacher`) and normalizes the rows.
pub fn random_projection_baseline(audio_features: &EmbeddingSet, d_teacher: usize, seed: u64) -> Result<EmbeddingSet> {
    if audio_features.is_empty() {
        return Err(Error::InvalidConfig("random projection needs at least one audio row".into()));
    }
    if d_teacher == 0 {
        return Err(Error::InvalidConfig("d_teacher must be positive".into()));
    }
    let d_in = audio_features.dim();
    let proj = Matrix::from_vec(
        d_teacher,
        d_in,
        gaussian_vec(
            &mut stream(seed, StreamKind::RandomProjection, 0),
            d_teacher * d_in,
            1.0 / (d_teacher as f64).sqrt(),
        ),
    )?;
    let mut out = audio_features.matrix().matmul_transposed(&proj)?;
    normalize_matrix_rows(&mut out)?;
    EmbeddingSet::new_normalized(out, audio_features.labels().to_vec(), Modality::Audio)
}

/// One-hidden-layer map between text spaces with a linear shortcut:
/// `x S^T + relu(x W1^T + b1) W2^T + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMapping {
    pub shortcut: Matrix,
    pub hidden_weight: Matrix,
    pub hidden_bias: Vec<f64>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

impl TextMapping {
    pub fn init(seed: u64, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        let uniform = |index: u64, rows: usize, cols: usize| {
            use rand::Rng;
            let a = glorot_bound(cols, rows);
            let mut rng = stream(seed, StreamKind::ParamInit, 100 + index);
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()).expect("sized")
        };
        Self {
            shortcut: uniform(0, d_out, d_in),
            hidden_weight: uniform(1, d_hidden, d_in),
            hidden_bias: vec![0.0; d_hidden],
            out_weight: uniform(2, d_out, d_hidden),
            out_bias: vec![0.0; d_out],
        }
    }

    /// The identity map on a `d`-dimensional space.
    pub fn identity(d: usize, d_hidden: usize) -> Self {
        Self {
            shortcut: Matrix::identity(d),
            hidden_weight: Matrix::zeros(d_hidden, d),
            hidden_bias: vec![0.0; d_hidden],
            out_weight: Matrix::zeros(d, d_hidden),
            out_bias: vec![0.0; d],
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.shortcut.as_slice(),
            self.hidden_weight.as_slice(),
            &self.hidden_bias,
            self.out_weight.as_slice(),
            &self.out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.shortcut.as_mut_slice(),
            self.hidden_weight.as_mut_slice(),
            &mut self.hidden_bias,
            self.out_weight.as_mut_slice(),
            &mut self.out_bias,
        ]
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let pre = affine(x, &self.hidden_weight, &self.hidden_bias)?;
        let h = relu(&pre);
        let mut out = affine(&h, &self.out_weight, &self.out_bias)?;
        let skip = x.matmul_transposed(&self.shortcut)?;
        out.as_mut_slice()
            .iter_mut()
            .zip(skip.as_slice())
            .for_each(|(o, s)| *o += s);
        Ok((out, pre, h))
    }

    fn gradients(&self, x: &Matrix, grad_out: &Matrix, pre: &Matrix, h: &Matrix) -> Result<Vec<Vec<f64>>> {
        let g_t = grad_out.transpose();
        let d_shortcut = g_t.matmul(x)?;
        let d_out_w = g_t.matmul(h)?;
        let d_out_b = column_sums(grad_out);
        let mut d_h = grad_out.matmul(&self.out_weight)?;
        d_h.as_mut_slice()
            .iter_mut()
            .zip(pre.as_slice())
            .for_each(|(g, p)| {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            });
        let d_hidden_w = d_h.transpose().matmul(x)?;
        let d_hidden_b = column_sums(&d_h);
        Ok(vec![
            d_shortcut.into_vec(),
            d_hidden_w.into_vec(),
            d_hidden_b,
            d_out_w.into_vec(),
            d_out_b,
        ])
    }
}

/// A trained text mapping and its per-epoch mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMappingBaseline {
    pub mapping: TextMapping,
    pub loss_curve: Vec<f64>,
}

fn rows_by_label(set: &EmbeddingSet) -> Vec<(u32, usize)> {
    let mut v: Vec<(u32, usize)> = set.labels().iter().copied().zip(0..).collect();
    v.sort_unstable();
    v
}

/// Trains a student-text → teacher-text mapping with the distillation loss on
/// (student text, teacher text) pairs of the same species. No audio is used.
/// Hidden width equals the teacher dimension.
pub fn text_mapping_baseline(
    student_text: &EmbeddingSet,
    teacher_text: &EmbeddingSet,
    config: &TrainConfig,
) -> Result<TextMappingBaseline> {
    text_mapping_from(
        TextMapping::init(config.seed, student_text.dim(), teacher_text.dim(), teacher_text.dim()),
        student_text,
        teacher_text,
        config,
    )
}

/// Like [`text_mapping_baseline`], starting from the given mapping.
pub fn text_mapping_from(
    mut mapping: TextMapping,
    student_text: &EmbeddingSet,
    teacher_text: &EmbeddingSet,
    config: &TrainConfig,
) -> Result<TextMappingBaseline> {
    config.validate()?;
    let s_rows = rows_by_label(student_text);
    let t_rows = rows_by_label(teacher_text);
    if s_rows.len() != t_rows.len() || s_rows.iter().zip(&t_rows).any(|(a, b)| a.0 != b.0) {
        return Err(Error::SpeciesMismatch);
    }
    if mapping.shortcut.cols() != student_text.dim() || mapping.shortcut.rows() != teacher_text.dim() {
        return Err(Error::ShapeMismatch {
            left: mapping.shortcut.shape(),
            right: (teacher_text.dim(), student_text.dim()),
        });
    }
    let x_all = student_text.matrix().select_rows(&s_rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let t_all = teacher_text.matrix().select_rows(&t_rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let tau = config.temperature()?;
    let shapes: Vec<usize> = mapping.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(config, &shapes);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let batches = epoch_batches(x_all.rows(), config.batch_size, config.seed ^ 0x7e47, epoch as u64);
        let mut total = 0.0;
        for batch in &batches {
            let x = x_all.select_rows(batch);
            let t = t_all.select_rows(batch);
            let (z, pre, h) = mapping.forward(&x)?;
            if !z.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let out = distill_loss(&z, &t, tau)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = mapping.gradients(&x, &out.grad_student, &pre, &h)?;
            opt.update(mapping.tensors_mut(), grads.iter().map(Vec::as_slice).collect());
            total += out.loss;
            step += 1;
        }
        loss_curve.push(total / batches.len().max(1) as f64);
    }
    Ok(TextMappingBaseline { mapping, loss_curve })
}

impl TextMappingBaseline {
    /// Student text prototypes carried into teacher space.
    pub fn map_prototypes(&self, student_text: &EmbeddingSet) -> Result<EmbeddingSet> {
        let m = self.mapping.apply(student_text.matrix())?;
        EmbeddingSet::new(m, student_text.labels().to_vec(), Modality::TeacherText)
    }

    /// Embeds audio for retrieval: classify each clip zero-shot in student
    /// space, then return the mapped prototype of the predicted species.
    /// Rows keep the clips' true labels.
    pub fn embed_audio(&self, audio_student: &EmbeddingSet, student_text: &EmbeddingSet) -> Result<EmbeddingSet> {
        let mapped = self.map_prototypes(student_text)?;
        let predicted = zero_shot_predict(audio_student, student_text)?;
        let rows: Vec<&[f64]> = predicted
            .iter()
            .map(|p| {
                let idx = student_text.labels().iter().position(|l| l == p).expect("predicted from this set");
                mapped.row(idx)
            })
            .collect();
        let m = if rows.is_empty() {
            Matrix::zeros(0, mapped.dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        EmbeddingSet::new(m, audio_student.labels().to_vec(), Modality::Audio)
    }
}

fn check_coverage(labels: &[u32], prototypes: &EmbeddingSet) -> Result<()> {
    for &l in labels {
        if !prototypes.labels().contains(&l) {
            return Err(Error::MissingPrototype { species: l });
        }
    }
    Ok(())
}

/// Two independent zero-shot steps. Audio clips (already in student space) are
/// classified against the student prototypes, images against the teacher
/// prototypes. An image's score for a clip is the cosine between the teacher
/// prototypes of the two predicted species; ties go to the image with the
/// higher classification confidence, then the lower index.
pub fn cascaded_zero_shot_baseline(
    audio_student: &EmbeddingSet,
    images: &EmbeddingSet,
    student_prototypes: &EmbeddingSet,
    teacher_prototypes: &EmbeddingSet,
) -> Result<Vec<RankedList>> {
    check_coverage(audio_student.labels(), student_prototypes)?;
    check_coverage(images.labels(), teacher_prototypes)?;
    check_coverage(student_prototypes.labels(), teacher_prototypes)?;
    let audio_pred = zero_shot_predict(audio_student, student_prototypes)?;
    let image_pred = zero_shot_scores(images, teacher_prototypes)?;

    let teacher = crate::embedding::normalize_rows(teacher_prototypes)?;
    let row_of = |label: u32| teacher.labels().iter().position(|&l| l == label).expect("covered");
    let n_classes = teacher.len();
    let mut class_sim = Matrix::zeros(n_classes, n_classes);
    for a in 0..n_classes {
        for b in 0..n_classes {
            class_sim[(a, b)] = dot(teacher.row(a), teacher.row(b));
        }
    }
    let image_rows: Vec<usize> = image_pred.iter().map(|(l, _)| row_of(*l)).collect();

    Ok(audio_pred
        .iter()
        .enumerate()
        .map(|(q, &pred)| {
            let a = row_of(pred);
            let scores: Vec<f64> = image_rows.iter().map(|&b| class_sim[(a, b)]).collect();
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.sort_by(|&i, &j| {
                scores[j]
                    .total_cmp(&scores[i])
                    .then(image_pred[j].1.total_cmp(&image_pred[i].1))
                    .then(i.cmp(&j))
            });
            let sorted = order.iter().map(|&i| scores[i]).collect();
            RankedList {
                query_index: q,
                gallery_order: order,
                scores: sorted,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{map_from_rankings, map_retrieval};

    fn set(rows: &[&[f64]], labels: &[u32], modality: Modality) -> EmbeddingSet {
        EmbeddingSet::new(Matrix::from_rows(rows).unwrap(), labels.to_vec(), modality).unwrap()
    }

    #[test]
    fn kinds_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(BaselineKind::parse(k.name()), Some(k));
        }
        assert_eq!(BaselineKind::parse("nope"), None);
    }

    #[test]
    fn random_projection_deterministic_unit_rows() {
        let a = set(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0]], &[0, 1], Modality::Audio);
        let p = random_projection_baseline(&a, 8, 4).unwrap();
        assert_eq!(p, random_projection_baseline(&a, 8, 4).unwrap());
        assert_ne!(p, random_projection_baseline(&a, 8, 5).unwrap());
        assert_eq!(p.dim(), 8);
        for r in p.matrix().iter_rows() {
            assert!((crate::embedding::norm(r) - 1.0).abs() < 1e-12);
        }
        let empty = EmbeddingSet::new(Matrix::zeros(0, 3), vec![], Modality::Audio).unwrap();
        assert!(random_projection_baseline(&empty, 8, 0).is_err());
    }

    #[test]
    fn identity_mapping_reduces_to_teacher_prototypes() {
        let teacher = set(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
            &[0, 1, 2],
            Modality::TeacherText,
        );
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let b = text_mapping_from(TextMapping::identity(3, 3), &teacher, &teacher, &cfg).unwrap();
        assert_eq!(b.map_prototypes(&teacher).unwrap().matrix(), teacher.matrix());

        let audio = set(&[&[0.9, 0.2, 0.0], &[0.0, 0.1, 1.0]], &[0, 2], Modality::Audio);
        let images = set(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.1], &[0.1, 0.0, 1.0]], &[0, 1, 2], Modality::Image);
        let via_mapping = map_retrieval(&b.embed_audio(&audio, &teacher).unwrap(), &images, None).unwrap();
        let protos_of_pred = set(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]], &[0, 2], Modality::Audio);
        let direct = map_retrieval(&protos_of_pred, &images, None).unwrap();
        assert_eq!(via_mapping.value, direct.value);
    }

    #[test]
    fn text_mapping_species_mismatch() {
        let a = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], Modality::StudentText);
        let b = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 2], Modality::TeacherText);
        assert!(matches!(
            text_mapping_baseline(&a, &b, &TrainConfig::default()),
            Err(Error::SpeciesMismatch)
        ));
    }

    #[test]
    fn text_mapping_training_reduces_loss() {
        let s = set(
            &[&[1.0, 0.2], &[0.1, 1.0], &[-1.0, 0.3], &[0.2, -1.0]],
            &[0, 1, 2, 3],
            Modality::StudentText,
        );
        let t = set(
            &[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.5, 0.5, -0.7]],
            &[0, 1, 2, 3],
            Modality::TeacherText,
        );
        let cfg = TrainConfig { epochs: 100, batch_size: 4, ..TrainConfig::default() };
        let b = text_mapping_baseline(&s, &t, &cfg).unwrap();
        assert!(b.loss_curve[99] < b.loss_curve[0]);
        assert_eq!(b, text_mapping_baseline(&s, &t, &cfg).unwrap());
    }

    fn cascade_fixture() -> (EmbeddingSet, EmbeddingSet) {
        // three species, species 0 and 1 close in teacher space
        let teacher = set(
            &[&[1.0, 0.1, 0.0], &[1.0, -0.1, 0.0], &[0.0, 0.0, 1.0]],
            &[0, 1, 2],
            Modality::TeacherText,
        );
        let images = set(
            &[
                &[1.0, 0.11, 0.0],
                &[1.0, 0.09, 0.01],
                &[1.0, -0.1, 0.0],
                &[1.0, -0.12, 0.0],
                &[0.0, 0.0, 1.0],
                &[0.01, 0.0, 1.0],
            ],
            &[0, 0, 1, 1, 2, 2],
            Modality::Image,
        );
        (teacher, images)
    }

    #[test]
    fn cascade_with_perfect_classifiers_is_perfect() {
        let (teacher, images) = cascade_fixture();
        let student = set(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]], &[0, 1, 2], Modality::StudentText);
        let audio = set(&[&[1.0, 0.05], &[0.0, 2.0], &[-3.0, 0.1]], &[0, 1, 2], Modality::StudentText);
        let ranked = cascaded_zero_shot_baseline(&audio, &images, &student, &teacher).unwrap();
        let r = map_from_rankings(&ranked, audio.labels(), images.labels(), None, |a, b| a == b).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn cascade_propagates_audio_errors() {
        let (teacher, images) = cascade_fixture();
        let student = set(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]], &[0, 1, 2], Modality::StudentText);
        // a species-0 clip that looks like species 1
        let audio = set(&[&[0.0, 1.0]], &[0], Modality::StudentText);
        let ranked = cascaded_zero_shot_baseline(&audio, &images, &student, &teacher).unwrap();
        let order = &ranked[0].gallery_order;
        let first_true = order.iter().position(|&i| images.labels()[i] == 0).unwrap();
        let last_b = order.iter().rposition(|&i| images.labels()[i] == 1).unwrap();
        assert!(last_b < first_true, "{order:?}");
        // species 0 still outranks the unrelated species 2
        assert!(order[2..4].iter().all(|&i| images.labels()[i] == 0));
    }

    #[test]
    fn cascade_missing_prototype() {
        let (teacher, images) = cascade_fixture();
        let student = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], Modality::StudentText);
        let audio = set(&[&[1.0, 0.0]], &[2], Modality::StudentText);
        assert!(matches!(
            cascaded_zero_shot_baseline(&audio, &images, &student, &teacher),
            Err(Error::MissingPrototype { species: 2 })
        ));
    }
}
