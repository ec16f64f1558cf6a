//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 3 5`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mel_core::config::RunConfig;
use mel_core::diffusion::{
    forward_noise, guided_prediction, guided_sample, reconstruct_x0, standard_normal, Branch, ConstantDenoiser,
    Denoiser, Dropped, EditorDenoiser, GuidanceConfig, NoiseSchedule,
};
use mel_core::eval::{self, RetrievalReport, Scope, StatFeaturizer};
use mel_core::exec::Execution;
use mel_core::model::{ModelBundle, ModelConfig, Owner};
use mel_core::motion::{DatasetManifest, EditTriplet, FeatureLayout, MotionSequence};
use mel_core::pipeline::{self, SampleRequest};
use mel_core::rng;
use mel_core::similarity::{self, Metric, SimilarityConfig};
use mel_core::synth::{self, SynthSpec};
use mel_core::tape::{Gradients, Mat};
use mel_core::text::StubEncoder;
use mel_core::train::{auxiliary_gradients, example_gradients, prepare_examples, TrainingExample};
use ndarray::Array2;
use rand::Rng as _;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "similarity oracles", similarity_oracles),
        (2, "MotionSNR behavior", snr_behavior),
        (3, "diffusion algebra", diffusion_algebra),
        (4, "gradient decoupling", gradient_decoupling),
        (5, "guidance identities", guidance_identities),
        (6, "desk-scale training", desk_scale_training),
        (7, "reproducibility", reproducibility),
        (8, "retrieval sanity", retrieval_sanity),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_matrix(rows: usize, cols: usize, r: &mut rng::Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-2.0..2.0))
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    if elapsed > Duration::from_secs(limit_secs) {
        return Err(format!("took {elapsed:?}, limit {limit_secs}s"));
    }
    Ok(())
}

fn oracle_distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        acc += match metric {
            Metric::Manhattan => d.abs(),
            _ => d * d,
        };
    }
    if metric == Metric::Euclidean {
        acc.sqrt()
    } else {
        acc
    }
}

/// Every window index `i + k` for `k` in `-w..=w`, clamped into the target.
fn oracle_raw(source: &Mat, target: &Mat, w: usize, metric: Metric) -> Vec<f64> {
    let last = target.nrows() as i64 - 1;
    let mut out = Vec::new();
    for i in 0..source.nrows() {
        let mut best = f64::INFINITY;
        for k in -(w as i64)..=(w as i64) {
            let j = (i as i64 + k).clamp(0, last) as usize;
            let d = oracle_distance(metric, &source.row(i).to_vec(), &target.row(j).to_vec());
            if d < best {
                best = d;
            }
        }
        out.push(-best);
    }
    out
}

fn similarity_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::substream(1, "acceptance-similarity");
    let metrics = [Metric::Euclidean, Metric::SquaredEuclidean, Metric::Manhattan];
    for case in 0..200 {
        let f = r.random_range(1..40);
        let f2 = r.random_range(1..40);
        let d = r.random_range(1..8);
        let w = r.random_range(0..6);
        let metric = metrics[case % 3];
        let (s, t) = (random_matrix(f, d, &mut r), random_matrix(f2, d, &mut r));
        let got = similarity::raw_similarity(s.view(), t.view(), w, metric).map_err(|e| e.to_string())?;
        ensure!(got == oracle_raw(&s, &t, w, metric), "raw similarity differs on instance {case}");
    }
    for case in 0..100 {
        let n = r.random_range(2..60);
        let classes = r.random_range(2..7);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..0.0)).collect();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = similarity::min_max_normalize(&v).map_err(|e| e.to_string())?;
        let labels = similarity::quantize(&norm, classes).map_err(|e| e.to_string())?;
        for i in 0..n {
            let expected = (v[i] - lo) / (hi - lo);
            ensure!((norm[i] - expected).abs() <= 1e-12, "normalized value differs on vector {case}");
            let class = ((expected * classes as f64).floor() as usize).min(classes - 1);
            ensure!(labels[i] == class, "vector {case} frame {i}: class {} vs {class}", labels[i]);
        }
    }
    within(start.elapsed(), 10)?;
    Ok("200 raw curves exact, 100 normalized vectors within 1e-12".into())
}

/// Sum of the `k` largest over the `k` smallest dissimilarities.
fn oracle_snr(combined: &[f64], kappa: usize) -> f64 {
    let mut d: Vec<f64> = combined.iter().map(|s| -s).collect();
    d.sort_by(f64::total_cmp);
    let k = kappa.min(d.len() / 2);
    let low: f64 = d[..k].iter().sum();
    let high: f64 = d[d.len() - k..].iter().sum();
    match (low == 0.0, high == 0.0) {
        (true, true) => 1.0,
        (true, false) => f64::INFINITY,
        _ => high / low,
    }
}

fn offset_target(t: &EditTriplet, offset: f64) -> EditTriplet {
    let target = MotionSequence::new(t.target.frames() + offset, t.target.layout(), t.target.frame_rate()).unwrap();
    EditTriplet::new(t.id.clone(), t.source.clone(), target, t.instruction.clone(), t.edit_mask.clone()).unwrap()
}

fn snr_behavior() -> Outcome {
    let start = Instant::now();
    let cfg = SimilarityConfig::default();
    let spec = SynthSpec {
        n_triplets: 100,
        seed: 3,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec, Execution::Sequential).map_err(|e| e.to_string())?;
    let triplets = data.edit_triplets();
    for t in &triplets[..20] {
        let curve = similarity::build_curve(t, &cfg).map_err(|e| e.to_string())?;
        ensure!(curve.snr == f64::INFINITY, "ideal pair {} has SNR {}", t.id, curve.snr);
    }

    let layout = FeatureLayout::reduced();
    let row: Vec<f64> = (0..layout.dim()).map(|j| 0.1 * j as f64).collect();
    let flat = Array2::from_shape_fn((24, layout.dim()), |(_, j)| row[j]);
    let source = MotionSequence::new(flat.clone(), layout, 30.0).unwrap();
    let target = MotionSequence::new(flat + 0.5, layout, 30.0).unwrap();
    let uniform = EditTriplet::new("uniform", source, target, "shift", None).unwrap();
    let snr = similarity::build_curve(&uniform, &cfg).map_err(|e| e.to_string())?.snr;
    ensure!(snr == 1.0, "uniform dissimilarity gives {snr}");

    let mut r = rng::substream(3, "acceptance-offsets");
    let shifted: Vec<EditTriplet> = triplets.iter().map(|t| offset_target(t, r.random_range(0.0..0.4))).collect();
    let curves = synth::compute_curves(&shifted, &cfg, Execution::Sequential).map_err(|e| e.to_string())?;
    let filtered = similarity::filter_dataset(&data.manifest, &curves, 2.0).map_err(|e| e.to_string())?;
    let excluded: HashSet<&str> = filtered.entries.iter().filter(|e| !e.included).map(|e| e.id.as_str()).collect();
    let oracle: HashSet<&str> = shifted
        .iter()
        .filter(|t| oracle_snr(&curves[&t.id].combined, cfg.kappa) < 2.0)
        .map(|t| t.id.as_str())
        .collect();
    ensure!(excluded == oracle, "filter excluded {} entries, oracle {}", excluded.len(), oracle.len());
    ensure!(!oracle.is_empty() && oracle.len() < 100, "offsets did not produce a mixed manifest");
    within(start.elapsed(), 10)?;
    Ok(format!("{} of 100 excluded at threshold 2", excluded.len()))
}

fn diffusion_algebra() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::cosine(300).map_err(|e| e.to_string())?;
    let mut r = rng::substream(4, "acceptance-diffusion");
    let mut worst = 0.0f64;
    for t in 0..300 {
        let m0 = standard_normal(16, 15, &mut r);
        let eps = standard_normal(16, 15, &mut r);
        let mt = forward_noise(&m0, t, &eps, &sched).map_err(|e| e.to_string())?;
        let back = reconstruct_x0(&mt, t, &eps, &sched).map_err(|e| e.to_string())?;
        worst = worst.max((&back - &m0).iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    ensure!(worst <= 1e-5, "round trip error {worst:e}");
    let ab = sched.alpha_bar();
    ensure!(ab[0] >= 0.99, "first alpha_bar {}", ab[0]);
    ensure!(ab[299] <= 0.01, "last alpha_bar {}", ab[299]);
    ensure!(ab.windows(2).all(|w| w[0] > w[1]), "alpha_bar not strictly decreasing");
    within(start.elapsed(), 5)?;
    Ok(format!("max round trip error {worst:.1e}"))
}

fn toy_example(seed: u64, encoder: &StubEncoder) -> TrainingExample {
    let mut r = rng::indexed(seed, "acceptance-example", 0);
    let source = standard_normal(10, 15, &mut r);
    let mut target = source.clone();
    target.slice_mut(ndarray::s![4..7, ..]).mapv_inplace(|v| 1.5 * v + 0.3);
    TrainingExample {
        id: format!("toy{seed}"),
        source,
        target,
        text: encoder.encode_text("raise the arms in the middle"),
        labels: vec![2, 2, 2, 1, 0, 0, 0, 1, 2, 2],
    }
}

fn toy_model() -> (ModelBundle, NoiseSchedule) {
    let mut cfg = ModelConfig::tiny(15, 8);
    cfg.timesteps = 50;
    let mut bundle = ModelBundle::new(cfg, 11).unwrap();
    // Away from the zero-initialized gates so every path carries gradient.
    bundle.perturb(0.05, &mut rng::substream(11, "acceptance-perturb"));
    (bundle, NoiseSchedule::cosine(50).unwrap())
}

fn is_nonzero(g: &Gradients, id: usize) -> bool {
    g.get(id).is_some_and(|m| m.iter().any(|&v| v != 0.0))
}

fn gradient_decoupling() -> Outcome {
    let start = Instant::now();
    let (bundle, sched) = toy_model();
    let encoder = StubEncoder::new(8, 16, 0).map_err(|e| e.to_string())?;
    let params = bundle.params();

    let mut aux_leaks = Vec::new();
    for seed in 0..3 {
        let (_, ga) = auxiliary_gradients(&bundle, &toy_example(seed, &encoder)).map_err(|e| e.to_string())?;
        for id in 0..params.len() {
            if bundle.owner(id) == Owner::Diffusion && is_nonzero(&ga, id) {
                aux_leaks.push(params.name(id).to_owned());
            }
        }
    }
    ensure!(aux_leaks.is_empty(), "auxiliary loss reaches {aux_leaks:?}");

    let mut r = rng::substream(12, "acceptance-grad");
    let mut editing = Gradients::zeros(params.len());
    for (i, dropped) in [Dropped::Nothing, Dropped::Text, Dropped::Both].into_iter().enumerate() {
        let ex = toy_example(10 + i as u64, &encoder);
        let eps = standard_normal(10, 15, &mut r);
        let (_, g) = example_gradients(&bundle, &sched, &ex, 5 + 10 * i, dropped, &eps, 0.0).map_err(|e| e.to_string())?;
        editing.add_assign(&g);
    }
    let mut detail = Vec::new();
    for owner in [Owner::Condition, Owner::Diffusion] {
        // The similarity head only feeds the auxiliary loss.
        let ids: Vec<usize> = (0..params.len())
            .filter(|&id| bundle.owner(id) == owner && !params.name(id).starts_with("cond.sim_head"))
            .collect();
        let live = ids.iter().filter(|&&id| is_nonzero(&editing, id)).count();
        let frac = live as f64 / ids.len() as f64;
        let dead: Vec<&str> = ids.iter().filter(|&&id| !is_nonzero(&editing, id)).map(|&id| params.name(id)).collect();
        ensure!(frac >= 0.95, "{owner:?}: only {live}/{} tensors receive gradient, missing {dead:?}", ids.len());
        detail.push(format!("{owner:?} {live}/{}", ids.len()));
    }

    let ex = toy_example(20, &encoder);
    let eps = standard_normal(10, 15, &mut r);
    let loss = |b: &ModelBundle| example_gradients(b, &sched, &ex, 23, Dropped::Nothing, &eps, 1.0).map(|p| p.0);
    let (_, grads) = example_gradients(&bundle, &sched, &ex, 23, Dropped::Nothing, &eps, 1.0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 50 {
        let id = r.random_range(0..params.len());
        let Some(g) = grads.get(id) else { continue };
        let (rows, cols) = params.get(id).dim();
        let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
        let h = 1e-6;
        let mut plus = bundle.clone();
        plus.params_mut().get_mut(id)[(i, j)] += h;
        let mut minus = bundle.clone();
        minus.params_mut().get_mut(id)[(i, j)] -= h;
        let fd = (loss(&plus).map_err(|e| e.to_string())? - loss(&minus).map_err(|e| e.to_string())?) / (2.0 * h);
        let an = g[(i, j)];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        ensure!(rel <= 1e-3, "{}[{i},{j}]: finite difference {fd:e}, analytic {an:e}", params.name(id));
        worst = worst.max(rel);
        checked += 1;
    }
    within(start.elapsed(), 60)?;
    Ok(format!("editing gradients {}; 50 finite differences, worst rel {worst:.1e}", detail.join(", ")))
}

fn guidance_identities() -> Outcome {
    let start = Instant::now();
    let (bundle, sched) = toy_model();
    let encoder = StubEncoder::new(8, 16, 0).map_err(|e| e.to_string())?;
    let ex = toy_example(30, &encoder);
    let denoiser = EditorDenoiser::new(&bundle, &ex.source, &ex.text).map_err(|e| e.to_string())?;
    let mut r = rng::substream(5, "acceptance-cfg");
    for t in [0, 17, 49] {
        let x = standard_normal(10, 15, &mut r);
        let full = denoiser.predict_x0(&x, t, Branch::Full).map_err(|e| e.to_string())?;
        let uncond = denoiser.predict_x0(&x, t, Branch::Unconditional).map_err(|e| e.to_string())?;
        let at_one = guided_prediction(&denoiser, &x, t, &GuidanceConfig::with_scales(1.0, 1.0)).map_err(|e| e.to_string())?;
        let at_zero = guided_prediction(&denoiser, &x, t, &GuidanceConfig::with_scales(0.0, 0.0)).map_err(|e| e.to_string())?;
        ensure!(at_one == full, "scales (1,1) differ from the full branch at t={t}");
        ensure!(at_zero == uncond, "scales (0,0) differ from the unconditional branch at t={t}");
    }
    let constant = Array2::from_shape_fn((12, 15), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64);
    for (st, sm) in [(1.0, 1.0), (2.0, 2.0), (0.0, 3.0), (2.5, 0.5)] {
        let out = guided_sample(
            &ConstantDenoiser(constant.clone()),
            &sched,
            &GuidanceConfig::with_scales(st, sm),
            12,
            15,
            &mut r,
        )
        .map_err(|e| e.to_string())?;
        let err = (&out - &constant).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        ensure!(err <= 1e-12, "constant model at ({st},{sm}) off by {err:e}");
    }
    within(start.elapsed(), 5)?;
    Ok("exact at (1,1) and (0,0); constant model reproduced".into())
}

fn pick(all: &[EditTriplet], manifest: &DatasetManifest) -> Vec<EditTriplet> {
    let ids: HashSet<&str> = manifest.included().map(|e| e.id.as_str()).collect();
    all.iter().filter(|t| ids.contains(t.id.as_str())).cloned().collect()
}

struct DeskRun {
    accuracy: f64,
    wins: usize,
    retrieval: RetrievalReport,
}

fn desk_run(cfg: &RunConfig, train: &[TrainingExample], test: &[EditTriplet], curves: &HashMap<String, similarity::SimilarityCurve>) -> Result<DeskRun, String> {
    let exec = Execution::Sequential;
    let encoder = pipeline::make_encoder(&cfg.text).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trained = pipeline::train_examples(cfg, train, dir.path(), exec).map_err(|e| e.to_string())?;
    let bundle = &trained.bundle;
    let accuracy = pipeline::similarity_accuracy(bundle, test, curves, encoder.as_ref(), exec).map_err(|e| e.to_string())?;
    let generated = pipeline::generate_edits(bundle, test, encoder.as_ref(), &cfg.diffusion.guidance, cfg.seed, exec)
        .map_err(|e| e.to_string())?;
    let mut wins = 0;
    for (g, t) in generated.iter().zip(test) {
        let mask = t.edit_mask.as_deref().ok_or("synthetic triplet without mask")?;
        let ours = eval::l2_distance_masked(g, &t.target, mask).map_err(|e| e.to_string())?;
        let copy = eval::l2_distance_masked(&t.source, &t.target, mask).map_err(|e| e.to_string())?;
        wins += usize::from(ours < copy);
    }
    let targets: Vec<MotionSequence> = test.iter().map(|t| t.target.clone()).collect();
    let retrieval = eval::retrieval_metrics(&generated, &targets, Scope::Batch, 32, &StatFeaturizer, cfg.seed, exec)
        .map_err(|e| e.to_string())?;
    Ok(DeskRun {
        accuracy,
        wins,
        retrieval,
    })
}

fn desk_scale_training() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::desk_scale();
    cfg.synth.n_triplets = 500;
    cfg.train.steps = 2000;
    cfg.train.batch_size = 32;
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    ensure!(cfg.synth.frames == 32 && cfg.model.feature_dim == 15, "desk scale is not F=32, D=15");
    let exec = Execution::Sequential;
    let data = synth::generate(&cfg.synth, exec).map_err(|e| e.to_string())?;
    let all = data.edit_triplets();
    let curves = synth::compute_curves(&all, &cfg.similarity, exec).map_err(|e| e.to_string())?;
    let annotated = synth::annotate_snr(&data.manifest, &curves).map_err(|e| e.to_string())?;
    let [train_m, _, test_m] = synth::split_manifest(&annotated, cfg.data.splits, cfg.seed).map_err(|e| e.to_string())?;
    let (train, test) = (pick(&all, &train_m), pick(&all, &test_m));
    let encoder = pipeline::make_encoder(&cfg.text).map_err(|e| e.to_string())?;
    let examples = prepare_examples(&train, &curves, encoder.as_ref()).map_err(|e| e.to_string())?;

    let with_aux = desk_run(&cfg, &examples, &test, &curves)?;
    let mut no_aux_cfg = cfg.clone();
    no_aux_cfg.train.aux_weight = 0.0;
    let without_aux = desk_run(&no_aux_cfg, &examples, &test, &curves)?;

    let n = test.len();
    let win_rate = with_aux.wins as f64 / n as f64;
    let (r1, r1_base) = (with_aux.retrieval.r_at[&1], without_aux.retrieval.r_at[&1]);
    let detail = format!(
        "accuracy {:.3}, beats copy-source on {}/{n} ({:.0}%), R@1 {r1:.1} with aux vs {r1_base:.1} without ({} held out, {} train)",
        with_aux.accuracy,
        with_aux.wins,
        100.0 * win_rate,
        n,
        examples.len()
    );
    ensure!(with_aux.accuracy > 0.6, "(a) held-out accuracy too low: {detail}");
    ensure!(win_rate >= 0.7, "(b) generated edits lose to copying the source: {detail}");
    ensure!(r1 >= r1_base - 2.0, "(c) auxiliary loss hurts retrieval: {detail}");
    within(start.elapsed(), 30 * 60)?;
    Ok(detail)
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn full_pipeline(dir: &Path, exec: Execution) -> Result<(), String> {
    let mut cfg = RunConfig::desk_scale();
    cfg.synth.n_triplets = 40;
    cfg.synth.frames = 24;
    cfg.train.steps = 25;
    cfg.train.batch_size = 8;
    cfg.diffusion.timesteps = 40;
    cfg.eval.batch_size = 4;
    cfg.seed = 9;
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    let e = |err: mel_core::Error| err.to_string();
    let gen = pipeline::run_generate(&cfg, dir, exec).map_err(e)?;
    let train_manifest = &gen.manifests[0];
    pipeline::run_analyze(&cfg, train_manifest, dir, exec).map_err(e)?;
    let filtered = dir.join("filtered_train.jsonl");
    pipeline::run_filter(train_manifest, &dir.join(pipeline::CURVES_FILE), cfg.similarity.snr_threshold, &filtered)
        .map_err(e)?;
    let trained = pipeline::run_train(&cfg, &filtered, dir, exec).map_err(e)?;
    pipeline::run_evaluate(&cfg, &trained.checkpoint, &gen.manifests[2], dir, exec).map_err(e)?;
    let request = SampleRequest {
        checkpoint: &trained.checkpoint,
        source: &dir.join(synth::triplet_path(&synth::triplet_id(0))),
        instruction: "swing the arms wider",
        frames: None,
        s_text: 2.0,
        s_motion: 2.0,
        output: &dir.join("sample.json"),
    };
    pipeline::run_sample(&cfg, &request).map_err(e)?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    full_pipeline(a.path(), Execution::Parallel)?;
    full_pipeline(b.path(), Execution::Sequential)?;
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    ensure!(
        fa.keys().eq(fb.keys()),
        "runs wrote different files: {:?} vs {:?}",
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &fa {
        ensure!(bytes == &fb[name], "{} differs between runs", name.display());
    }
    for required in ["manifest_train.jsonl", pipeline::CHECKPOINT_FILE, pipeline::METRICS_FILE, pipeline::REPORT_FILE] {
        ensure!(fa.contains_key(Path::new(required)), "{required} was not written");
    }
    Ok(format!("{} files byte-identical across parallel and sequential runs", fa.len()))
}

fn ordered(report: &RetrievalReport) -> bool {
    let r = &report.r_at;
    r[&1] <= r[&2] && r[&2] <= r[&3]
}

fn retrieval_sanity() -> Outcome {
    let spec = SynthSpec {
        n_triplets: 64,
        seed: 8,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec, Execution::Sequential).map_err(|e| e.to_string())?;
    let targets: Vec<MotionSequence> = data.triplets.iter().map(|t| t.triplet.target.clone()).collect();
    let sources: Vec<MotionSequence> = data.triplets.iter().map(|t| t.triplet.source.clone()).collect();
    let mut reports = Vec::new();
    for scope in [Scope::Batch, Scope::FullSet] {
        let own = eval::retrieval_metrics(&targets, &targets, scope, 32, &StatFeaturizer, 8, Execution::Sequential)
            .map_err(|e| e.to_string())?;
        ensure!(own.r_at[&1] == 100.0 && own.avg_rank == 1.0, "self-retrieval {scope:?}: {:?} avg {}", own.r_at, own.avg_rank);
        reports.push(own);
        let copy = eval::retrieval_metrics(&sources, &targets, scope, 32, &StatFeaturizer, 8, Execution::Sequential)
            .map_err(|e| e.to_string())?;
        reports.push(copy);
    }
    let mut r = rng::substream(8, "acceptance-noise");
    let noisy: Vec<MotionSequence> = targets
        .iter()
        .map(|t| {
            let frames = t.frames() + &standard_normal(t.len(), t.dim(), &mut r);
            MotionSequence::new(frames, t.layout(), t.frame_rate()).unwrap()
        })
        .collect();
    for batch in [4, 16, 32] {
        reports.push(
            eval::retrieval_metrics(&noisy, &targets, Scope::Batch, batch, &StatFeaturizer, 8, Execution::Sequential)
                .map_err(|e| e.to_string())?,
        );
    }
    ensure!(reports.iter().all(ordered), "R@k not monotone in some report");
    Ok(format!("self-retrieval R@1 100, AvgR 1; {} reports monotone", reports.len()))
}
