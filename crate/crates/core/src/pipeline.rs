//! Experiment stages and the end-to-end run.
//!
//! Each stage regenerates the world from the config (generation is
//! deterministic), so stages can run independently. Output layout:
//!
//! ```text
//! <output_dir>/
//!   config.txt
//!   world/{teacher_text,images,audio,student_text}.xmeb (+ .meta)
//!   params.xmap
//!   train.log
//!   reports/<metric>.txt
//!   summary.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{cascaded_zero_shot_baseline, random_projection_baseline, text_mapping_baseline, BaselineKind};
use crate::config::RunConfig;
use crate::embedding::{normalize_rows, EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::eval::{
    chance_map_oracle, knn_classify, map_from_rankings, map_retrieval, map_retrieval_by, species_averaged,
    zero_shot_classify, EvalReport,
};
use crate::io::{read_params, write_atomic, write_embedding_set_with_provenance, write_params};
use crate::trainer::{adapter_dims, forward_student, init_params, train_adapter, AdapterParams, TrainReport};
use crate::world::{generate_world, world_split, World, WorldSplit};

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn world_file(&self, modality: Modality) -> PathBuf {
        self.root.join("world").join(format!("{}.xmeb", modality.name()))
    }

    pub fn params(&self) -> PathBuf {
        self.root.join("params.xmap")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train.log")
    }

    pub fn report(&self, metric: &str) -> PathBuf {
        self.root.join("reports").join(format!("{metric}.txt"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_atomic(path, text.as_bytes())
}

fn write_report(paths: &RunPaths, name: &str, report: &EvalReport, hash: &str) -> Result<()> {
    write_text(&paths.report(name), &format!("config_hash={hash}\n{}", report.to_record()))
}

fn prepare(config: &RunConfig) -> Result<(World, RunPaths, String)> {
    config.validate()?;
    let paths = RunPaths::new(&config.output_dir);
    let hash = config.config_hash();
    ensure_dir(&paths.root)?;
    write_text(&paths.config(), &format!("# config_hash={hash}\n{}", config.to_text()))?;
    Ok((generate_world(&config.world)?, paths, hash))
}

fn split<'a>(world: &'a World, config: &RunConfig) -> Result<WorldSplit<'a>> {
    world_split(world, config.eval.holdout_fraction, config.eval.split_seed)
}

/// Generates the world and writes its four embedding sets.
pub fn gen_stage(config: &RunConfig) -> Result<World> {
    let (world, paths, hash) = prepare(config)?;
    write_world(&world, &paths, &hash)?;
    Ok(world)
}

fn write_world(world: &World, paths: &RunPaths, hash: &str) -> Result<()> {
    ensure_dir(&paths.root.join("world"))?;
    for set in [&world.teacher_text, &world.images, &world.audio_features, &world.student_text] {
        write_embedding_set_with_provenance(set, paths.world_file(set.modality()), hash)?;
    }
    Ok(())
}

/// Trains the adapter on the train split and writes `params.xmap` and
/// `train.log`. Fails if the teacher text changed during training.
pub fn train_stage(config: &RunConfig) -> Result<TrainReport> {
    let (world, paths, hash) = prepare(config)?;
    train_on(&world, config, &paths, &hash)
}

fn train_on(world: &World, config: &RunConfig, paths: &RunPaths, hash: &str) -> Result<TrainReport> {
    let split = split(world, config)?;
    let before = world.teacher_text.checksum();
    let report = train_adapter(&split.train, &config.train, config.mode)?;
    let after = world.teacher_text.checksum();
    if before != after {
        return Err(Error::ProvenanceMismatch {
            path: paths.world_file(Modality::TeacherText),
            expected: before,
            found: after,
        });
    }
    write_params(&report.final_params, hash, paths.params())?;

    let mut log = String::new();
    writeln!(log, "config_hash={hash}").unwrap();
    writeln!(log, "mode={}", config.mode.name()).unwrap();
    writeln!(log, "num_parameters={}", report.final_params.num_parameters()).unwrap();
    writeln!(log, "steps={}", report.steps).unwrap();
    for (epoch, loss) in report.loss_curve.iter().enumerate() {
        writeln!(log, "epoch={epoch} loss={loss:.6}").unwrap();
    }
    let fetches: Vec<String> = report.variant_fetches.iter().map(u64::to_string).collect();
    writeln!(log, "variant_fetches={}", fetches.join(",")).unwrap();
    writeln!(log, "teacher_checksum={after}").unwrap();
    writeln!(log, "wallclock_s={:.3}", report.wallclock).unwrap();
    write_text(&paths.train_log(), &log)?;
    Ok(report)
}

fn embed(params: &AdapterParams, audio: &EmbeddingSet) -> Result<EmbeddingSet> {
    let z = forward_student(params, audio.matrix())?;
    normalize_rows(&EmbeddingSet::new(z, audio.labels().to_vec(), Modality::Audio)?)
}

/// Loads `params.xmap`, checking that it was produced by this config.
pub fn load_trained_params(config: &RunConfig) -> Result<AdapterParams> {
    let path = RunPaths::new(&config.output_dir).params();
    let (params, found) = read_params(&path)?;
    let expected = config.config_hash();
    if found != expected {
        return Err(Error::ProvenanceMismatch { path, expected, found });
    }
    Ok(params)
}

/// Evaluates the trained adapter stored in the output directory.
pub fn eval_stage(config: &RunConfig) -> Result<Vec<EvalReport>> {
    let params = load_trained_params(config)?;
    let (world, paths, hash) = prepare(config)?;
    let reports = evaluate_distilled(&world, config, &params)?;
    for r in &reports {
        write_report(&paths, &r.metric_name, r, &hash)?;
    }
    Ok(reports)
}

/// Reports, in order: `distilled_map`, `distilled_map_genus`, `knn_raw`,
/// `knn_distilled`, `zero_shot_distilled`, `zero_shot_untrained`,
/// `zero_shot_student`, `text_to_audio_distilled`, `text_to_audio_student`.
pub fn evaluate_distilled(world: &World, config: &RunConfig, params: &AdapterParams) -> Result<Vec<EvalReport>> {
    let split = split(world, config)?;
    let eval_audio = split.eval.audio();
    let train_audio = split.train.audio();
    let distilled = embed(params, &eval_audio)?;
    let protos = world.common_name_prototypes();
    let taxonomy = &world.taxonomy;
    let k = config.eval.knn_k;
    let map_k = config.eval.map_k;

    let map = map_retrieval(&distilled, &world.images, None)?;
    let species_avg = species_averaged(&map, distilled.labels());
    let mut map = rename(map, "distilled_map");
    if let Some(avg) = species_avg {
        map = map.with_meta("species_averaged", format!("{avg:.6}"));
    }
    let genus = map_retrieval_by(&distilled, &world.images, None, |a, b| {
        taxonomy[a as usize].genus_id == taxonomy[b as usize].genus_id
    })?;

    let untrained = init_params(config.train.seed, adapter_dims(&split.train, &config.train, config.mode), config.mode)?;
    let student_audio = world.student_audio_embeddings(&eval_audio)?;
    let student_protos = &world.student_text;

    Ok(vec![
        map,
        rename(genus, "distilled_map_genus"),
        rename(knn_classify(&eval_audio, &train_audio, k)?, "knn_raw"),
        rename(knn_classify(&distilled, &embed(params, &train_audio)?, k)?, "knn_distilled"),
        rename(zero_shot_classify(&distilled, &protos)?, "zero_shot_distilled"),
        rename(zero_shot_classify(&embed(&untrained, &eval_audio)?, &protos)?, "zero_shot_untrained"),
        rename(zero_shot_classify(&student_audio, student_protos)?, "zero_shot_student"),
        rename(map_retrieval(&protos, &distilled, Some(map_k))?, "text_to_audio_distilled"),
        rename(map_retrieval(student_protos, &student_audio, Some(map_k))?, "text_to_audio_student"),
    ])
}

fn rename(mut r: EvalReport, name: &str) -> EvalReport {
    let inner = std::mem::replace(&mut r.metric_name, name.to_string());
    r.with_meta("measure", inner)
}

/// Audio-to-image mAP of one baseline on the eval audio split.
pub fn baseline_stage(config: &RunConfig, kind: BaselineKind) -> Result<EvalReport> {
    let (world, paths, hash) = prepare(config)?;
    let report = evaluate_baseline(&world, config, kind)?;
    write_report(&paths, &report.metric_name, &report, &hash)?;
    Ok(report)
}

pub fn evaluate_baseline(world: &World, config: &RunConfig, kind: BaselineKind) -> Result<EvalReport> {
    let split = split(world, config)?;
    let eval_audio = split.eval.audio();
    let protos = world.common_name_prototypes();
    let report = match kind {
        BaselineKind::RandomProjection => {
            let rp = random_projection_baseline(&eval_audio, world.config.d_teacher, config.eval.baseline_seed)?;
            let zs = zero_shot_classify(&rp, &protos)?;
            map_retrieval(&rp, &world.images, None)?.with_meta("zero_shot", format!("{:.6}", zs.value))
        }
        BaselineKind::TextMapping => {
            let student_audio = world.student_audio_embeddings(&eval_audio)?;
            let tm = text_mapping_baseline(&world.student_text, &protos, &config.train)?;
            let embedded = tm.embed_audio(&student_audio, &world.student_text)?;
            map_retrieval(&embedded, &world.images, None)?
        }
        BaselineKind::CascadedZeroShot => {
            let student_audio = world.student_audio_embeddings(&eval_audio)?;
            let rankings = cascaded_zero_shot_baseline(&student_audio, &world.images, &world.student_text, &protos)?;
            map_from_rankings(&rankings, student_audio.labels(), world.images.labels(), None, |a, b| a == b)?
        }
    };
    Ok(rename(report, &format!("baseline_{}", kind.name())))
}

/// Deterministic outcome of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub config_hash: String,
    /// `(title, audio-to-image mAP)`: the three baselines, then the distilled student.
    pub map_rows: Vec<(String, f64)>,
    /// Machine-readable metrics in output order.
    pub metrics: Vec<(String, f64)>,
}

impl Summary {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn table(&self) -> String {
        let width = self.map_rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        writeln!(s, "{:<width$}  audio->image mAP", "method").unwrap();
        for (title, v) in &self.map_rows {
            writeln!(s, "{title:<width$}  {:>16.2}", 100.0 * v).unwrap();
        }
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = format!("config_hash={}\n", self.config_hash);
        for (k, v) in &self.metrics {
            writeln!(s, "{k}={v:.6}").unwrap();
        }
        s
    }

    /// Table, a blank line, then the `key=value` lines.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.table(), self.key_values())
    }
}

/// Runs every stage and writes all artifacts. Wallclock time appears only in
/// `train.log`, never in the summary.
pub fn run_experiment(config: &RunConfig) -> Result<Summary> {
    let (world, paths, hash) = prepare(config)?;
    write_world(&world, &paths, &hash)?;
    let train = train_on(&world, config, &paths, &hash)?;
    let params = load_trained_params(config)?;
    let distilled = evaluate_distilled(&world, config, &params)?;
    for r in &distilled {
        write_report(&paths, &r.metric_name, r, &hash)?;
    }
    let mut baselines = Vec::new();
    for kind in BaselineKind::ALL {
        let r = evaluate_baseline(&world, config, kind)?;
        write_report(&paths, &r.metric_name, &r, &hash)?;
        baselines.push((kind, r));
    }

    let chance = chance_map_oracle(
        world.config.images_per_species,
        world.n_species(),
        None,
        config.eval.chance_trials,
        config.eval.baseline_seed,
    );
    let value = |name: &str| distilled.iter().find(|r| r.metric_name == name).map(|r| r.value).unwrap();
    let distilled_map = distilled.iter().find(|r| r.metric_name == "distilled_map").unwrap();
    let species_avg = distilled_map
        .metadata
        .get("species_averaged")
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);

    let mut map_rows: Vec<(String, f64)> = baselines.iter().map(|(k, r)| (k.title().to_string(), r.value)).collect();
    map_rows.push(("Distilled Student".to_string(), distilled_map.value));

    let mut metrics: Vec<(String, f64)> = baselines
        .iter()
        .map(|(k, r)| (format!("map.{}", k.name()), r.value))
        .collect();
    metrics.push(("map.distilled".into(), distilled_map.value));
    metrics.push(("map.chance".into(), chance));
    metrics.push(("map.distilled_species_averaged".into(), species_avg));
    metrics.push(("map.distilled_genus".into(), value("distilled_map_genus")));
    metrics.push(("knn.raw".into(), value("knn_raw")));
    metrics.push(("knn.distilled".into(), value("knn_distilled")));
    metrics.push(("zero_shot.distilled".into(), value("zero_shot_distilled")));
    metrics.push(("zero_shot.untrained".into(), value("zero_shot_untrained")));
    metrics.push(("zero_shot.student".into(), value("zero_shot_student")));
    let rp_zero_shot = baselines[0].1.metadata["zero_shot"].parse().unwrap_or(f64::NAN);
    metrics.push(("zero_shot.random_projection".into(), rp_zero_shot));
    metrics.push((format!("text_to_audio_map@{}.distilled", config.eval.map_k), value("text_to_audio_distilled")));
    metrics.push((format!("text_to_audio_map@{}.student", config.eval.map_k), value("text_to_audio_student")));
    metrics.push(("train.loss_first".into(), train.loss_curve.first().copied().unwrap_or(f64::NAN)));
    metrics.push(("train.loss_last".into(), train.loss_curve.last().copied().unwrap_or(f64::NAN)));

    let summary = Summary {
        config_hash: hash,
        map_rows,
        metrics,
    };
    write_text(&paths.summary(), &summary.render())?;
    Ok(summary)
}
