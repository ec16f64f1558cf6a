//! End-to-end stages behind the command-line tool: generate, analyze,
//! filter, train, sample and evaluate. Each stage writes its resolved
//! configuration into its output directory before doing any work.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TextConfig};
use crate::diffusion::{edit_motion, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{self, EvaluationReport, StatFeaturizer};
use crate::exec::Execution;
use crate::model::{load_bundle, save_bundle, ModelBundle};
use crate::motion::{
    motion_from_json, motion_to_json, triplet_from_json, write_file, DatasetManifest, EditTriplet, MotionSequence,
    Split,
};
use crate::rng;
use crate::similarity::{filter_dataset, SimilarityCurve};
use crate::synth::{self, annotate_snr, compute_curves, split_manifest};
use crate::text::{EncoderKind, SidecarEncoder, StubEncoder, TextEncoder};
use crate::train::{prepare_examples, LossReport, MetricsLog, Trainer};

pub const CURVES_FILE: &str = "curves.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

pub fn manifest_file(split: Split) -> String {
    format!("manifest_{split}.jsonl")
}

pub fn filtered_manifest_file(split: Split) -> String {
    format!("manifest_{split}.filtered.jsonl")
}

pub fn make_encoder(text: &TextConfig) -> Result<Box<dyn TextEncoder>> {
    Ok(match text.encoder {
        EncoderKind::Stub => Box::new(StubEncoder::new(text.embed_dim, text.max_tokens, text.codebook_seed)?),
        EncoderKind::External => {
            let path = text
                .sidecar
                .as_ref()
                .ok_or_else(|| Error::Config("external text encoder needs text.sidecar".into()))?;
            let enc = SidecarEncoder::load(path, text.max_tokens)?;
            if enc.embed_dim() != text.embed_dim {
                return Err(Error::Config(format!(
                    "sidecar features have width {} but text.embed_dim is {}",
                    enc.embed_dim(),
                    text.embed_dim
                )));
            }
            Box::new(enc)
        }
    })
}

fn manifest_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn begin(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_resolved(out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Train, val and test manifests.
    pub manifests: [PathBuf; 3],
    pub triplets: usize,
}

/// Generates the synthetic dataset, computes every triplet's MotionSNR and
/// writes triplet files plus one manifest per split.
pub fn run_generate(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<GenerateOutput> {
    begin(cfg, out)?;
    let ds = synth::generate(&cfg.synth, exec)?;
    let triplets = ds.edit_triplets();
    exec.try_map(&triplets, |t| {
        crate::motion::save_triplet(t, out.join(synth::triplet_path(&t.id)))
    })?;
    let curves = compute_curves(&triplets, &cfg.similarity, exec)?;
    let mut manifest = annotate_snr(&ds.manifest, &curves)?;
    manifest.header.config_hash = Some(cfg.data_hash());
    let splits = split_manifest(&manifest, cfg.data.splits, cfg.seed)?;
    let mut paths = Vec::with_capacity(3);
    for m in &splits {
        let path = out.join(manifest_file(m.split()));
        m.save(&path)?;
        paths.push(path);
    }
    Ok(GenerateOutput {
        manifests: paths.try_into().expect("three splits"),
        triplets: triplets.len(),
    })
}

/// One line of `curves.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub id: String,
    #[serde(flatten)]
    pub curve: SimilarityCurve,
}

pub fn write_curves(records: &[CurveRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::format("curve", e.to_string()))?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("curve line {}", i + 1), e.to_string())))
        .collect()
}

/// Computes similarity curves for every entry of a manifest (included or
/// not) and writes them to `out/curves.jsonl`.
pub fn run_analyze(cfg: &RunConfig, manifest_path: &Path, out: &Path, exec: Execution) -> Result<Vec<CurveRecord>> {
    begin(cfg, out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let triplets = manifest.load_all(manifest_dir(manifest_path), None)?;
    let curves = exec.try_map(&triplets, |t| crate::similarity::build_curve(t, &cfg.similarity))?;
    let records: Vec<CurveRecord> = triplets
        .iter()
        .zip(curves)
        .map(|(t, curve)| CurveRecord {
            id: t.id.clone(),
            curve,
        })
        .collect();
    write_curves(&records, &out.join(CURVES_FILE))?;
    Ok(records)
}

/// Marks entries below `threshold` as excluded and writes the result to
/// `output`. Triplet paths are rewritten when the output lives elsewhere.
pub fn run_filter(manifest_path: &Path, curves_path: &Path, threshold: f64, output: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let snr: HashMap<String, f64> = read_curves(curves_path)?
        .into_iter()
        .map(|r| (r.id, r.curve.snr))
        .collect();
    let mut filtered = filter_dataset(&manifest, &snr, threshold)?;
    let (src_dir, dst_dir) = (manifest_dir(manifest_path), manifest_dir(output));
    if fs::canonicalize(src_dir).ok() != fs::canonicalize(dst_dir).ok() {
        let base = fs::canonicalize(src_dir).map_err(|e| Error::io(src_dir, e))?;
        for entry in &mut filtered.entries {
            entry.path = base.join(&entry.path).to_string_lossy().into_owned();
        }
    }
    filtered.save(output)?;
    Ok(filtered)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub bundle: ModelBundle,
    pub reports: Vec<LossReport>,
}

/// Trains on the included triplets of `manifest_path`.
pub fn run_train(cfg: &RunConfig, manifest_path: &Path, out: &Path, exec: Execution) -> Result<TrainOutput> {
    begin(cfg, out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let triplets = manifest.load_included(manifest_dir(manifest_path), Some(cfg.synth.layout))?;
    if triplets.is_empty() {
        return Err(Error::Input(format!("{} has no included triplets", manifest_path.display())));
    }
    let curves = compute_curves(&triplets, &cfg.similarity, exec)?;
    let encoder = make_encoder(&cfg.text)?;
    let examples = prepare_examples(&triplets, &curves, encoder.as_ref())?;
    train_examples(cfg, &examples, out, exec)
}

/// Training loop on prepared examples; writes metrics and the checkpoint.
pub fn train_examples(
    cfg: &RunConfig,
    examples: &[crate::train::TrainingExample],
    out: &Path,
    exec: Execution,
) -> Result<TrainOutput> {
    let hash = cfg.config_hash();
    let bundle = ModelBundle::new(cfg.model.clone(), cfg.seed)?;
    let sched = NoiseSchedule::cosine(cfg.diffusion.timesteps)?;
    let mut trainer = Trainer::new(bundle, sched, cfg.diffusion.guidance.clone(), cfg.train.clone(), cfg.seed)?
        .with_execution(exec);
    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file), Some(hash.clone()), cfg.train.log_wall_ms);
    let reports = trainer.fit(examples, |r| {
        if r.step % 100 == 0 {
            log::info!("step {} L={:.5} L_e={:.5} L_aux={:.5}", r.step, r.total, r.editing, r.auxiliary);
        }
        log.record(r)
    })?;
    use std::io::Write;
    log.into_inner()
        .flush()
        .map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_bundle(&trainer.bundle, &checkpoint, Some(&hash))?;
    Ok(TrainOutput {
        checkpoint,
        bundle: trainer.bundle,
        reports,
    })
}

/// Reads a source motion from either a motion file or a triplet file.
pub fn load_source(path: &Path) -> Result<MotionSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match motion_from_json(&text) {
        Ok(m) => Ok(m),
        Err(motion_err) => triplet_from_json(&text, None).map(|t| t.source).map_err(|_| motion_err),
    }
}

pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    pub source: &'a Path,
    pub instruction: &'a str,
    /// Output length; defaults to the source length.
    pub frames: Option<usize>,
    pub s_text: f64,
    pub s_motion: f64,
    pub output: &'a Path,
}

pub fn run_sample(cfg: &RunConfig, req: &SampleRequest) -> Result<MotionSequence> {
    let bundle = load_bundle(req.checkpoint)?;
    let source = load_source(req.source)?;
    bundle.expect_feature_dim(source.dim())?;
    let encoder = make_encoder(&cfg.text)?;
    if encoder.embed_dim() != bundle.config().text_dim {
        return Err(Error::Config(format!(
            "text encoder width {} does not match checkpoint text_dim {}",
            encoder.embed_dim(),
            bundle.config().text_dim
        )));
    }
    let id = req.source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let text = encoder.encode(&id, req.instruction)?;
    let sched = NoiseSchedule::cosine(bundle.config().timesteps)?;
    let guidance = GuidanceConfig {
        s_text: req.s_text,
        s_motion: req.s_motion,
        ..cfg.diffusion.guidance.clone()
    };
    guidance.validate()?;
    let frames = req.frames.unwrap_or(source.len());
    if frames == 0 {
        return Err(Error::Input("frames must be positive".into()));
    }
    let mut r = rng::substream(cfg.seed, "sample");
    let edited = edit_motion(&bundle, &source, &text, &sched, &guidance, frames, &mut r)?;
    let doc = motion_to_json(&edited, Some(("config_hash", serde_json::json!(cfg.config_hash()))))?;
    write_file(req.output, doc.as_bytes())?;
    Ok(edited)
}

/// Samples one edit per triplet, each from its own substream.
pub fn generate_edits(
    bundle: &ModelBundle,
    triplets: &[EditTriplet],
    encoder: &dyn TextEncoder,
    guidance: &GuidanceConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MotionSequence>> {
    let sched = NoiseSchedule::cosine(bundle.config().timesteps)?;
    let items: Vec<(usize, &EditTriplet)> = triplets.iter().enumerate().collect();
    exec.try_map(&items, |&(i, t)| {
        let text = encoder.encode(&t.id, &t.instruction)?;
        let mut r = rng::indexed(seed, "evaluate", i as u64);
        edit_motion(bundle, &t.source, &text, &sched, guidance, t.target.len(), &mut r)
    })
}

/// Per-frame similarity-class accuracy over all source frames.
pub fn similarity_accuracy(
    bundle: &ModelBundle,
    triplets: &[EditTriplet],
    curves: &HashMap<String, SimilarityCurve>,
    encoder: &dyn TextEncoder,
    exec: Execution,
) -> Result<f64> {
    let counts = exec.try_map(triplets, |t| {
        let curve = curves
            .get(&t.id)
            .ok_or_else(|| Error::Consistency(format!("no similarity curve for {}", t.id)))?;
        let text = encoder.encode(&t.id, &t.instruction)?;
        let cond = bundle.condition_forward(&t.source, &text)?;
        let acc = eval::classification_accuracy(&cond.similarity_logits, &curve.labels)?;
        Ok::<_, Error>((acc * curve.labels.len() as f64, curve.labels.len()))
    })?;
    let (correct, total) = counts.iter().fold((0.0, 0usize), |(c, n), &(a, b)| (c + a, n + b));
    Ok(correct / total as f64)
}

/// Samples edits for the included triplets of `manifest_path` and scores
/// them. Writes `out/report.json`.
pub fn run_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    out: &Path,
    exec: Execution,
) -> Result<EvaluationReport> {
    begin(cfg, out)?;
    let bundle = load_bundle(checkpoint)?;
    bundle.expect_feature_dim(cfg.synth.layout.dim())?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut triplets = manifest.load_included(manifest_dir(manifest_path), Some(cfg.synth.layout))?;
    if let Some(max) = cfg.eval.max_items {
        triplets.truncate(max);
    }
    if triplets.is_empty() {
        return Err(Error::Input(format!("{} has no included triplets", manifest_path.display())));
    }
    let encoder = make_encoder(&cfg.text)?;
    let generated = generate_edits(&bundle, &triplets, encoder.as_ref(), &cfg.diffusion.guidance, cfg.seed, exec)?;
    let report = score(cfg, &bundle, &triplets, &generated, encoder.as_ref(), exec)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format("report", e.to_string()))?;
    write_file(&out.join(REPORT_FILE), text.as_bytes())?;
    Ok(report)
}

/// Metrics for already generated edits.
pub fn score(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    triplets: &[EditTriplet],
    generated: &[MotionSequence],
    encoder: &dyn TextEncoder,
    exec: Execution,
) -> Result<EvaluationReport> {
    let targets: Vec<MotionSequence> = triplets.iter().map(|t| t.target.clone()).collect();
    let batch = cfg.eval.batch_size.min(targets.len());
    let retrieval = eval::retrieval_metrics(generated, &targets, cfg.eval.scope, batch, &StatFeaturizer, cfg.seed, exec)?;
    let l2 = exec.try_map(&generated.iter().zip(&targets).collect::<Vec<_>>(), |(g, t)| {
        eval::l2_distance(g, t, cfg.eval.truncate)
    })?;
    let fid = if cfg.eval.fid && generated.len() >= 2 {
        Some(eval::fid_like(generated, &targets, &StatFeaturizer, exec)?)
    } else {
        None
    };
    let curves = compute_curves(triplets, &cfg.similarity, exec)?;
    let accuracy = similarity_accuracy(bundle, triplets, &curves, encoder, exec)?;
    let truncation = if cfg.eval.truncate {
        "common prefix"
    } else {
        "none (lengths must match)"
    };
    Ok(EvaluationReport {
        r_at: retrieval.r_at.clone(),
        avg_rank: retrieval.avg_rank,
        retrieval,
        l2: l2.iter().sum::<f64>() / l2.len() as f64,
        fid,
        classification_accuracy: accuracy,
        truncation: truncation.into(),
        m_score: None,
        config_hash: Some(cfg.config_hash()),
    })
}
