//! Synthetic multimodal benchmark.
//!
//! A taxonomy tree (family → genus → species) drives three embedding spaces:
//!
//! * a teacher space holding class prototypes, noisy prompt-variant text rows,
//!   and noisy image rows;
//! * a raw audio-feature space with its own hierarchy over the same tree but
//!   drawn independently of the teacher;
//! * a student text space that a fixed random "pretrained" audio encoder maps
//!   audio latents into, imperfectly.
//!
//! Gaussian offsets at every level are isotropic with expected squared norm
//! `sigma^2`, i.e. per-coordinate standard deviation `sigma / sqrt(dim)`.

use rayon::prelude::*;

use crate::embedding::{normalize_matrix_rows, EmbeddingSet, Matrix, Modality};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, permutation, stream, StreamKind};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_families: usize,
    pub genera_per_family: usize,
    pub species_per_genus: usize,
    pub d_teacher: usize,
    pub d_student_in: usize,
    pub d_student: usize,
    pub variant_count: usize,
    pub audio_per_species: usize,
    pub images_per_species: usize,
    pub sigma_family: f64,
    pub sigma_genus: f64,
    pub sigma_species: f64,
    pub sigma_image: f64,
    pub sigma_audio: f64,
    pub sigma_variant: f64,
    /// Misalignment between the pretrained student audio encoder and the
    /// student text embeddings. Controls how good student-side zero-shot is.
    pub sigma_student_text: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_families: 3,
            genera_per_family: 4,
            species_per_genus: 4,
            d_teacher: 32,
            d_student_in: 20,
            d_student: 24,
            variant_count: 3,
            audio_per_species: 20,
            images_per_species: 10,
            sigma_family: 1.0,
            sigma_genus: 0.5,
            sigma_species: 0.25,
            sigma_image: 0.15,
            sigma_audio: 0.20,
            sigma_variant: 0.05,
            sigma_student_text: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn n_genera(&self) -> usize {
        self.n_families * self.genera_per_family
    }

    pub fn n_species(&self) -> usize {
        self.n_genera() * self.species_per_genus
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_families", self.n_families),
            ("genera_per_family", self.genera_per_family),
            ("species_per_genus", self.species_per_genus),
            ("d_teacher", self.d_teacher),
            ("d_student_in", self.d_student_in),
            ("d_student", self.d_student),
            ("audio_per_species", self.audio_per_species),
            ("images_per_species", self.images_per_species),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.variant_count < 2 {
            return Err(Error::InvalidConfig("variant_count must be at least 2".into()));
        }
        if self.n_species() < 2 {
            return Err(Error::InvalidConfig("world needs at least 2 species".into()));
        }
        let sigmas = [
            ("sigma_family", self.sigma_family),
            ("sigma_genus", self.sigma_genus),
            ("sigma_species", self.sigma_species),
            ("sigma_image", self.sigma_image),
            ("sigma_audio", self.sigma_audio),
            ("sigma_variant", self.sigma_variant),
            ("sigma_student_text", self.sigma_student_text),
        ];
        for (name, v) in sigmas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.sigma_family == 0.0 {
            // family prototypes would all be the zero vector
            return Err(Error::InvalidConfig("sigma_family must be positive".into()));
        }
        Ok(())
    }

    /// Taxonomy path of a species index.
    pub fn taxon(&self, species: usize) -> TaxonLabel {
        let genus = species / self.species_per_genus;
        TaxonLabel {
            family_id: (genus / self.genera_per_family) as u32,
            genus_id: genus as u32,
            species_id: species as u32,
            variant_count: self.variant_count as u32,
        }
    }
}

/// Position of one species in the taxonomy. Genus ids are global, not
/// per-family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaxonLabel {
    pub family_id: u32,
    pub genus_id: u32,
    pub species_id: u32,
    pub variant_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// Unit-norm teacher-space class prototypes, one row per species.
    pub species_prototypes: Matrix,
    /// `n_species * variant_count` rows; row `s * variant_count + v`. Variant 0
    /// is the common-name prompt.
    pub teacher_text: EmbeddingSet,
    pub images: EmbeddingSet,
    /// Raw, unnormalized audio features (`d_student_in`).
    pub audio_features: EmbeddingSet,
    /// One row per species in the student text space (`d_student`).
    pub student_text: EmbeddingSet,
    /// Frozen pretrained audio encoder into student space, `d_student x d_student_in`.
    pub student_audio_encoder: Matrix,
    pub taxonomy: Vec<TaxonLabel>,
}

fn add_gaussian(base: &[f64], seed: u64, kind: StreamKind, index: u64, sigma: f64) -> Vec<f64> {
    let d = base.len();
    let noise = gaussian_vec(&mut stream(seed, kind, index), d, sigma / (d as f64).sqrt());
    base.iter().zip(noise).map(|(b, n)| b + n).collect()
}

fn unit(v: &mut [f64]) {
    let n = crate::embedding::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn rows_to_set(rows: Vec<Vec<f64>>, labels: Vec<u32>, modality: Modality, unit_rows: bool) -> Result<EmbeddingSet> {
    let mut m = Matrix::from_rows(&rows)?;
    if unit_rows {
        normalize_matrix_rows(&mut m)?;
        EmbeddingSet::new_normalized(m, labels, modality)
    } else {
        EmbeddingSet::new(m, labels, modality)
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let n_species = config.n_species();
    let dt = config.d_teacher;
    let taxonomy: Vec<TaxonLabel> = (0..n_species).map(|s| config.taxon(s)).collect();

    // Teacher hierarchy, unnormalized chain.
    let zero_t = vec![0.0; dt];
    let families: Vec<Vec<f64>> = (0..config.n_families)
        .map(|f| add_gaussian(&zero_t, seed, StreamKind::FamilyPrototype, f as u64, config.sigma_family))
        .collect();
    let genera: Vec<Vec<f64>> = (0..config.n_genera())
        .map(|g| {
            let f = g / config.genera_per_family;
            add_gaussian(&families[f], seed, StreamKind::GenusPrototype, g as u64, config.sigma_genus)
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = taxonomy
        .iter()
        .map(|t| {
            let mut p = add_gaussian(
                &genera[t.genus_id as usize],
                seed,
                StreamKind::SpeciesPrototype,
                t.species_id as u64,
                config.sigma_species,
            );
            unit(&mut p);
            p
        })
        .collect();

    let v_count = config.variant_count;
    let teacher_rows: Vec<Vec<f64>> = (0..n_species * v_count)
        .into_par_iter()
        .map(|r| add_gaussian(&prototypes[r / v_count], seed, StreamKind::TeacherVariant, r as u64, config.sigma_variant))
        .collect();
    let teacher_labels = (0..n_species * v_count).map(|r| (r / v_count) as u32).collect();
    let teacher_text = rows_to_set(teacher_rows, teacher_labels, Modality::TeacherText, true)?;

    let n_img = config.images_per_species;
    let image_rows: Vec<Vec<f64>> = (0..n_species * n_img)
        .into_par_iter()
        .map(|r| add_gaussian(&prototypes[r / n_img], seed, StreamKind::ImageNoise, r as u64, config.sigma_image))
        .collect();
    let image_labels = (0..n_species * n_img).map(|r| (r / n_img) as u32).collect();
    let images = rows_to_set(image_rows, image_labels, Modality::Image, true)?;

    // Audio hierarchy: genus and species levels over the same tree, drawn in
    // an independent space.
    let da = config.d_student_in;
    let zero_a = vec![0.0; da];
    let audio_genera: Vec<Vec<f64>> = (0..config.n_genera())
        .map(|g| add_gaussian(&zero_a, seed, StreamKind::AudioGenus, g as u64, config.sigma_genus))
        .collect();
    let audio_latents: Vec<Vec<f64>> = taxonomy
        .iter()
        .map(|t| {
            let mut l = add_gaussian(
                &audio_genera[t.genus_id as usize],
                seed,
                StreamKind::AudioSpecies,
                t.species_id as u64,
                config.sigma_species,
            );
            unit(&mut l);
            l
        })
        .collect();
    let n_audio = config.audio_per_species;
    let audio_rows: Vec<Vec<f64>> = (0..n_species * n_audio)
        .into_par_iter()
        .map(|r| add_gaussian(&audio_latents[r / n_audio], seed, StreamKind::AudioNoise, r as u64, config.sigma_audio))
        .collect();
    let audio_labels = (0..n_species * n_audio).map(|r| (r / n_audio) as u32).collect();
    let audio_features = rows_to_set(audio_rows, audio_labels, Modality::Audio, false)?;

    let ds = config.d_student;
    let encoder_data = gaussian_vec(
        &mut stream(seed, StreamKind::StudentEncoder, 0),
        ds * da,
        1.0 / (da as f64).sqrt(),
    );
    let student_audio_encoder = Matrix::from_vec(ds, da, encoder_data)?;
    let student_rows: Vec<Vec<f64>> = audio_latents
        .iter()
        .enumerate()
        .map(|(s, l)| {
            let mut base: Vec<f64> = student_audio_encoder
                .iter_rows()
                .map(|w| crate::embedding::dot(w, l))
                .collect();
            unit(&mut base);
            add_gaussian(&base, seed, StreamKind::StudentTextNoise, s as u64, config.sigma_student_text)
        })
        .collect();
    let student_text = rows_to_set(
        student_rows,
        (0..n_species as u32).collect(),
        Modality::StudentText,
        true,
    )?;

    Ok(World {
        config: config.clone(),
        species_prototypes: Matrix::from_rows(&prototypes)?,
        teacher_text,
        images,
        audio_features,
        student_text,
        student_audio_encoder,
        taxonomy,
    })
}

impl World {
    pub fn n_species(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn variant_count(&self) -> usize {
        self.config.variant_count
    }

    pub fn teacher_row(&self, species: usize, variant: usize) -> &[f64] {
        self.teacher_text.row(species * self.config.variant_count + variant)
    }

    /// Teacher text rows for one prompt variant, one row per species.
    pub fn teacher_variant(&self, variant: usize) -> EmbeddingSet {
        let v = self.config.variant_count;
        let idx: Vec<usize> = (0..self.n_species()).map(|s| s * v + variant).collect();
        self.teacher_text.subset(&idx)
    }

    /// Common-name (variant 0) teacher prototypes, used for zero-shot evaluation.
    pub fn common_name_prototypes(&self) -> EmbeddingSet {
        self.teacher_variant(0)
    }

    /// Audio mapped through the frozen pretrained student encoder.
    pub fn student_audio_embeddings(&self, audio: &EmbeddingSet) -> Result<EmbeddingSet> {
        if audio.dim() != self.student_audio_encoder.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.student_audio_encoder.cols(),
                actual: audio.dim(),
            });
        }
        let m = audio.matrix().matmul_transposed(&self.student_audio_encoder)?;
        EmbeddingSet::new(m, audio.labels().to_vec(), Modality::StudentText)
    }
}

/// Indices into the audio and image sets of one [`World`]. Text rows are
/// shared by all views.
#[derive(Debug, Clone)]
pub struct WorldView<'a> {
    pub world: &'a World,
    pub audio_indices: Vec<usize>,
    pub image_indices: Vec<usize>,
}

impl<'a> WorldView<'a> {
    /// A view over every row.
    pub fn full(world: &'a World) -> Self {
        Self {
            world,
            audio_indices: (0..world.audio_features.len()).collect(),
            image_indices: (0..world.images.len()).collect(),
        }
    }

    pub fn audio(&self) -> EmbeddingSet {
        self.world.audio_features.subset(&self.audio_indices)
    }

    pub fn images(&self) -> EmbeddingSet {
        self.world.images.subset(&self.image_indices)
    }

    pub fn teacher_text(&self) -> &EmbeddingSet {
        &self.world.teacher_text
    }

    pub fn student_text(&self) -> &EmbeddingSet {
        &self.world.student_text
    }
}

#[derive(Debug, Clone)]
pub struct WorldSplit<'a> {
    pub train: WorldView<'a>,
    pub eval: WorldView<'a>,
}

/// Number of held-out items for a species with `count` items.
pub fn holdout_count(count: usize, holdout_fraction: f64) -> usize {
    ((count as f64 * holdout_fraction).round() as usize).clamp(1, count.saturating_sub(1).max(1))
}

/// Partitions audio and image rows per species into train and eval views.
pub fn world_split(world: &World, holdout_fraction: f64, seed: u64) -> Result<WorldSplit<'_>> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout_fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let (audio_train, audio_eval) = split_rows(world.audio_features.labels(), world.n_species(), holdout_fraction, seed, 0, "audio")?;
    let (image_train, image_eval) = split_rows(world.images.labels(), world.n_species(), holdout_fraction, seed, 1, "image")?;
    Ok(WorldSplit {
        train: WorldView {
            world,
            audio_indices: audio_train,
            image_indices: image_train,
        },
        eval: WorldView {
            world,
            audio_indices: audio_eval,
            image_indices: image_eval,
        },
    })
}

fn split_rows(
    labels: &[u32],
    n_species: usize,
    holdout: f64,
    seed: u64,
    salt: u64,
    kind: &'static str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_species: Vec<Vec<usize>> = vec![Vec::new(); n_species];
    for (i, &l) in labels.iter().enumerate() {
        by_species[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (s, rows) in by_species.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::TooFewItems {
                species: s as u32,
                kind,
                available: rows.len(),
                required: 2,
            });
        }
        let n_eval = holdout_count(rows.len(), holdout);
        let perm = permutation(
            &mut stream(seed, StreamKind::Split, (s as u64) << 1 | salt),
            rows.len(),
        );
        let mut ev: Vec<usize> = perm[..n_eval].iter().map(|&p| rows[p]).collect();
        let mut tr: Vec<usize> = perm[n_eval..].iter().map(|&p| rows[p]).collect();
        ev.sort_unstable();
        tr.sort_unstable();
        eval.extend(ev);
        train.extend(tr);
    }
    Ok((train, eval))
}
