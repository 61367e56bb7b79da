//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use xmodal::baselines::random_projection_baseline;
use xmodal::eval::{knn_predict, map_retrieval, zero_shot_predict};
use xmodal::io::{decode_embedding_set, encode_embedding_set, read_embedding_set, write_embedding_set};
use xmodal::rng::{gaussian_vec, permutation, stream, StreamKind};
use xmodal::trainer::{adapter_gradients, init_params, AdapterDims};
use xmodal::{
    distill_loss, generate_world, run_experiment, train_adapter, world_split, AdapterMode, Matrix, RunConfig, Summary,
    Temperature,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(n: usize, d: usize, seed: u64, index: u64) -> Matrix {
    Matrix::from_vec(n, d, gaussian_vec(&mut stream(seed, StreamKind::GradCheck, index), n * d, 1.0)).unwrap()
}

/// Analytic student gradient against central differences of an independent
/// per-row loss, over the full grid, plus the MLP chain on tiny dims.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for n in [2, 4, 8] {
        for d in [2, 6, 16] {
            for tau in [0.05, 0.07, 1.0, 10.0] {
                let s = gaussian(n, d, configs, 0);
                let t = gaussian(n, d, configs, 1);
                let g = distill_loss(&s, &t, Temperature::new(tau).unwrap()).unwrap().grad_student;
                for i in 0..n {
                    for k in 0..d {
                        let mut p = s.clone();
                        p.row_mut(i)[k] += H;
                        let mut m = s.clone();
                        m.row_mut(i)[k] -= H;
                        let fd = (common::row_loss(&p, &t, tau, i) - common::row_loss(&m, &t, tau, i)) / (2.0 * H) / n as f64;
                        worst = worst.max((g[(i, k)] - fd).abs() / (fd.abs() + 1e-12));
                    }
                }
                configs += 1;
            }
        }
    }

    let tau = Temperature::new(0.5).unwrap();
    let dims = AdapterDims {
        d_student_in: 4,
        d_hidden: 3,
        d_in: 6,
        d_teacher: 5,
    };
    let mut params = init_params(11, dims, AdapterMode::MlpEncoderPlusHead).unwrap();
    let mut rng = stream(11, StreamKind::GradCheck, 7);
    for t in params.tensors_mut() {
        let noise = gaussian_vec(&mut rng, t.len(), 0.1);
        t.iter_mut().zip(noise).for_each(|(v, e)| *v += e);
    }
    let x = gaussian(3, 4, 99, 0);
    let t = gaussian(3, 5, 99, 1);
    let analytic = adapter_gradients(&params, &x, &t, tau).unwrap().1.tensors().concat();
    let mut chain_worst: f64 = 0.0;
    let mut flat = 0;
    for ti in 0..params.tensors().len() {
        for e in 0..params.tensors()[ti].len() {
            let mut p = params.clone();
            p.tensors_mut()[ti][e] += H;
            let mut m = params.clone();
            m.tensors_mut()[ti][e] -= H;
            let loss = |q| adapter_gradients(q, &x, &t, tau).unwrap().0;
            let fd = (loss(&p) - loss(&m)) / (2.0 * H);
            chain_worst = chain_worst.max((analytic[flat] - fd).abs() / (fd.abs() + 1e-12));
            flat += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && chain_worst < 1e-4 && secs < 10.0,
        format!("loss grid max rel err {worst:.2e} over {configs} configs; MLP chain {chain_worst:.2e}; {secs:.2}s"),
    )
}

fn loss_sanity() -> Outcome {
    let one = distill_loss(&gaussian(1, 5, 1, 0), &gaussian(1, 5, 1, 1), Temperature::new(0.07).unwrap())
        .unwrap()
        .loss;
    let hot = distill_loss(&gaussian(4, 6, 2, 0), &gaussian(4, 6, 2, 1), Temperature::new(1e6).unwrap())
        .unwrap()
        .loss;
    let hot_err = (hot - 4f64.ln()).abs();
    let s = gaussian(8, 6, 3, 0);
    let t = gaussian(8, 6, 3, 1);
    let tau = Temperature::new(0.07).unwrap();
    let base = distill_loss(&s, &t, tau).unwrap().loss;
    let perm = permutation(&mut stream(3, StreamKind::GradCheck, 2), 8);
    let permuted = distill_loss(&s.select_rows(&perm), &t.select_rows(&perm), tau).unwrap().loss;
    let perm_err = (base - permuted).abs();
    check(
        one == 0.0 && hot_err < 1e-4 && perm_err <= 1e-12,
        format!("N=1 loss {one}; |loss - ln 4| = {hot_err:.2e}; permutation diff {perm_err:.2e}"),
    )
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let world = generate_world(&Default::default()).unwrap();
    let split = world_split(&world, 0.2, 0).unwrap();
    let eval_audio = split.eval.audio();
    let train_audio = split.train.audio();
    let projected = random_projection_baseline(&eval_audio, world.config.d_teacher, 0).unwrap();
    let protos = world.common_name_prototypes();
    let mut mismatches = Vec::new();

    for (name, q, g, k) in [
        ("audio->image mAP", &projected, &world.images, None),
        ("text->audio mAP@10", &protos, &projected, Some(10)),
    ] {
        let lib = map_retrieval(q, g, k).unwrap();
        let oracle = common::map(q, g, k);
        if lib.per_query.as_deref() != Some(&oracle[..]) || lib.value != common::mean(&oracle) {
            mismatches.push(name);
        }
    }
    if knn_predict(&eval_audio, &train_audio, 5).unwrap() != common::knn(&eval_audio, &train_audio, 5) {
        mismatches.push("kNN");
    }
    for (name, q) in [("zero-shot images", &world.images), ("zero-shot audio", &projected)] {
        if zero_shot_predict(q, &protos).unwrap() != common::zero_shot(q, &protos) {
            mismatches.push(name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let items = world.images.len() + world.audio_features.len();
    check(
        mismatches.is_empty() && secs < 30.0,
        format!("{items} items; mismatches {mismatches:?}; {secs:.2}s"),
    )
}

fn metric(summary: &Summary, key: &str) -> f64 {
    summary.metric(key).unwrap_or(f64::NAN)
}

fn emergent_alignment(summary: &Summary, secs: f64) -> Outcome {
    let distilled = metric(summary, "map.distilled");
    let mapping = metric(summary, "map.text_mapping");
    let random = metric(summary, "map.random_projection");
    let chance = metric(summary, "map.chance");
    check(
        distilled >= 0.85 && random < mapping && mapping < distilled && random <= 3.0 * chance && secs < 120.0,
        format!(
            "distilled {distilled:.4}, text mapping {mapping:.4}, random {random:.4}, chance {chance:.4}; run {secs:.2}s"
        ),
    )
}

fn representation_preservation(summary: &Summary) -> Outcome {
    let raw = metric(summary, "knn.raw");
    let distilled = metric(summary, "knn.distilled");
    check(
        distilled >= raw - 0.02,
        format!("kNN@5 raw {raw:.4}, distilled {distilled:.4}"),
    )
}

fn zero_shot_gain(summary: &Summary) -> Outcome {
    let distilled = metric(summary, "zero_shot.distilled");
    let untrained = metric(summary, "zero_shot.untrained");
    let bound = 3.0 / 48.0;
    check(
        distilled >= 0.9 && untrained <= bound,
        format!("distilled {distilled:.4}; untrained {untrained:.4} (bound {bound:.4})"),
    )
}

fn determinism_and_interchange(first: &Summary, dir: &std::path::Path) -> Outcome {
    let config = RunConfig {
        output_dir: dir.join("second"),
        ..Default::default()
    };
    let second = run_experiment(&config).unwrap();
    let a = std::fs::read(dir.join("first").join("summary.txt")).unwrap();
    let b = std::fs::read(dir.join("second").join("summary.txt")).unwrap();
    let same_summary = a == b && first.render() == second.render();

    let mut exact = 0;
    let files = ["teacher_text", "image", "audio", "student_text"];
    for name in files {
        let path = dir.join("first").join("world").join(format!("{name}.xmeb"));
        let bytes = std::fs::read(&path).unwrap();
        let set = read_embedding_set(&path).unwrap();
        let copy = dir.join(format!("{name}.copy.xmeb"));
        write_embedding_set(&set, &copy).unwrap();
        if std::fs::read(&copy).unwrap() == bytes && encode_embedding_set(&decode_embedding_set(&bytes).unwrap()) == bytes {
            exact += 1;
        }
    }
    check(
        same_summary && exact == files.len(),
        format!("summaries identical: {same_summary}; {exact}/{} embedding files re-encode bit-exactly", files.len()),
    )
}

fn frozen_teacher() -> Outcome {
    let world = generate_world(&Default::default()).unwrap();
    let fresh = generate_world(&Default::default()).unwrap().teacher_text.checksum();
    let before = world.teacher_text.checksum();
    let split = world_split(&world, 0.2, 0).unwrap();
    let config = RunConfig::default();
    train_adapter(&split.train, &config.train, config.mode).unwrap();
    let after = world.teacher_text.checksum();
    check(
        before == after && after == fresh,
        format!("teacher checksum {}.. before and after training", &after[..16]),
    )
}

fn main() -> ExitCode {
    // criterion 4 is specified single-threaded
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        output_dir: dir.path().join("first"),
        ..Default::default()
    };
    let start = Instant::now();
    let summary = run_experiment(&config);
    let run_secs = start.elapsed().as_secs_f64();

    let with_run = |f: &dyn Fn(&Summary) -> Outcome| match &summary {
        Ok(s) => f(s),
        Err(e) => Err(format!("default run failed: {e}")),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("loss sanity", loss_sanity()),
        ("metric oracle equivalence", metric_oracles()),
        ("emergent alignment", with_run(&|s| emergent_alignment(s, run_secs))),
        ("representation preservation", with_run(&representation_preservation)),
        ("zero-shot gain", with_run(&zero_shot_gain)),
        ("determinism and interchange", with_run(&|s| determinism_and_interchange(s, dir.path()))),
        ("frozen teacher", frozen_teacher()),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {tag} {name}: {detail}", i + 1);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
