//! Synthetic edit triplets with exact ground-truth edit masks.
//!
//! Every source column is a short sum of sinusoids. A target copies its
//! source except on one contiguous window `[a, b)` where a single edit is
//! applied. Since the source is an analytic function of time, speed and
//! phase edits resample it exactly instead of interpolating.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::motion::{DatasetManifest, EditTriplet, FeatureLayout, ManifestEntry, MotionSequence, Split};
use crate::rng::{self, Rng};
use crate::similarity::{build_curve, SimilarityConfig, SimilarityCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Amplitude,
    Speed,
    Freeze,
    Mirror,
    Phase,
}

impl EditKind {
    pub const ALL: [EditKind; 5] = [
        EditKind::Amplitude,
        EditKind::Speed,
        EditKind::Freeze,
        EditKind::Mirror,
        EditKind::Phase,
    ];

    fn templates(self) -> &'static [&'static str] {
        match self {
            EditKind::Amplitude => &[
                "make the movement bigger in the {loc} part",
                "exaggerate the motion {loc} on",
                "use larger gestures during the {loc} section",
            ],
            EditKind::Speed => &[
                "move faster in the {loc} part",
                "speed up the motion {loc} on",
                "do the {loc} section more quickly",
            ],
            EditKind::Freeze => &[
                "hold still in the {loc} part",
                "pause the motion {loc} on",
                "freeze during the {loc} section",
            ],
            EditKind::Mirror => &[
                "mirror the movement in the {loc} part",
                "do the opposite motion {loc} on",
                "reverse the direction during the {loc} section",
            ],
            EditKind::Phase => &[
                "start the movement sooner in the {loc} part",
                "shift the timing {loc} on",
                "move ahead of the beat during the {loc} section",
            ],
        }
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::Amplitude => "amplitude",
            EditKind::Speed => "speed",
            EditKind::Freeze => "freeze",
            EditKind::Mirror => "mirror",
            EditKind::Phase => "phase",
        })
    }
}

/// Coarse position of the edit window within the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Early,
    Middle,
    Late,
}

impl Location {
    fn word(self) -> &'static str {
        match self {
            Location::Early => "early",
            Location::Middle => "middle",
            Location::Late => "late",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_triplets: usize,
    pub frames: usize,
    pub layout: FeatureLayout,
    pub edit_kinds: Vec<EditKind>,
    /// Edit strength: 0 leaves targets equal to sources, 1 is the full edit.
    pub magnitude: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_triplets: 500,
            frames: 32,
            layout: FeatureLayout::reduced(),
            edit_kinds: EditKind::ALL.to_vec(),
            magnitude: 1.0,
            frame_rate: 30.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.edit_kinds.is_empty() {
            return Err(Error::Config("at least one edit kind is required".into()));
        }
        if self.frames < 8 {
            return Err(Error::Config(format!("frames must be at least 8, got {}", self.frames)));
        }
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(Error::Config(format!("invalid magnitude {}", self.magnitude)));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Config(format!("invalid frame rate {}", self.frame_rate)));
        }
        Ok(())
    }
}

/// Per-column sum of two sinusoids, parameterized in frames.
struct Wave {
    // (amplitude, cycles per frame, phase) per column and component
    terms: Vec<[(f64, f64, f64); 2]>,
    offsets: Vec<f64>,
}

impl Wave {
    fn random(layout: &FeatureLayout, frames: usize, rng: &mut Rng) -> Wave {
        let mut terms = Vec::with_capacity(layout.dim());
        let mut offsets = Vec::with_capacity(layout.dim());
        for block in crate::motion::Block::ALL {
            // Columns of a block share base frequencies, as joints of one limb would.
            let base = [
                rng.random_range(0.75..2.5) / frames as f64,
                rng.random_range(2.5..5.0) / frames as f64,
            ];
            for _ in 0..layout.block_dims(block) {
                terms.push([
                    (rng.random_range(0.5..1.5), base[0], rng.random_range(0.0..TAU)),
                    (rng.random_range(0.1..0.5), base[1], rng.random_range(0.0..TAU)),
                ]);
                offsets.push(rng.random_range(-0.5..0.5));
            }
        }
        Wave { terms, offsets }
    }

    fn at(&self, t: f64, col: usize) -> f64 {
        self.offsets[col]
            + self.terms[col]
                .iter()
                .map(|&(amp, freq, phase)| amp * (TAU * freq * t + phase).sin())
                .sum::<f64>()
    }
}

/// Value of column `col` at frame `j` of an edited window `[a, b)`.
fn edited(kind: EditKind, wave: &Wave, j: usize, a: usize, b: usize, col: usize, m: f64) -> f64 {
    let t = j as f64;
    let s = wave.at(t, col);
    match kind {
        EditKind::Amplitude => {
            let mean = wave.offsets[col];
            mean + (s - mean) * (1.0 + m)
        }
        EditKind::Speed => wave.at(a as f64 + (t - a as f64) * (1.0 + m), col),
        EditKind::Freeze => (1.0 - m) * s + m * wave.at(a as f64, col),
        EditKind::Mirror => {
            let mean = wave.offsets[col];
            s - 2.0 * m.min(1.0) * (s - mean)
        }
        EditKind::Phase => wave.at(t + m * (b - a).max(4) as f64 / 2.0, col),
    }
}

/// One generated triplet plus the ground truth that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedTriplet {
    pub triplet: EditTriplet,
    pub kind: EditKind,
    pub location: Location,
    pub window: (usize, usize),
}

pub fn triplet_id(index: usize) -> String {
    format!("syn{index:05}")
}

pub fn triplet_path(id: &str) -> String {
    format!("triplets/{id}.json")
}

/// Generates triplet `index` from its own substream.
pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<GeneratedTriplet> {
    let mut rng = rng::indexed(spec.seed, "synth", index as u64);
    let f = spec.frames;
    let wave = Wave::random(&spec.layout, f, &mut rng);
    let kind = spec.edit_kinds[rng.random_range(0..spec.edit_kinds.len())];

    let location = [Location::Early, Location::Middle, Location::Late][rng.random_range(0..3)];
    let third = match location {
        Location::Early => 0,
        Location::Middle => 1,
        Location::Late => 2,
    };
    let (lo, hi) = (third * f / 3, (third + 1) * f / 3);
    let span = hi - lo;
    let len = rng.random_range((span / 2).max(2)..=span);
    let a = lo + rng.random_range(0..=span - len);
    let b = a + len;

    let d = spec.layout.dim();
    let source = Array2::from_shape_fn((f, d), |(j, c)| wave.at(j as f64, c));
    let active = spec.magnitude != 0.0;
    let mut target = source.clone();
    if active {
        for j in a..b {
            for c in 0..d {
                target[(j, c)] = edited(kind, &wave, j, a, b, c, spec.magnitude);
            }
        }
    }
    let mask: Vec<bool> = (0..f).map(|j| active && (a..b).contains(&j)).collect();

    let templates = kind.templates();
    let instruction = templates[rng.random_range(0..templates.len())].replace("{loc}", location.word());
    let source = MotionSequence::new(source, spec.layout, spec.frame_rate)?;
    let target = MotionSequence::new(target, spec.layout, spec.frame_rate)?;
    let triplet = EditTriplet::new(triplet_id(index), source, target, instruction, Some(mask))?;
    Ok(GeneratedTriplet {
        triplet,
        kind,
        location,
        window: (a, b),
    })
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub triplets: Vec<GeneratedTriplet>,
    /// Train-split manifest over all triplets, SNR not yet computed.
    pub manifest: DatasetManifest,
}

impl SynthDataset {
    pub fn edit_triplets(&self) -> Vec<EditTriplet> {
        self.triplets.iter().map(|g| g.triplet.clone()).collect()
    }
}

pub fn generate(spec: &SynthSpec, exec: Execution) -> Result<SynthDataset> {
    spec.validate()?;
    let triplets = exec
        .map_range(spec.n_triplets, |i| generate_one(spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let entries = triplets
        .iter()
        .map(|g| ManifestEntry {
            id: g.triplet.id.clone(),
            path: triplet_path(&g.triplet.id),
            snr: None,
            included: true,
        })
        .collect();
    Ok(SynthDataset {
        triplets,
        manifest: DatasetManifest::new(Split::Train, entries)?,
    })
}

/// Computes curves for `triplets` in input order.
pub fn compute_curves(
    triplets: &[EditTriplet],
    config: &SimilarityConfig,
    exec: Execution,
) -> Result<HashMap<String, SimilarityCurve>> {
    let curves = exec.try_map(triplets, |t| build_curve(t, config))?;
    Ok(triplets.iter().map(|t| t.id.clone()).zip(curves).collect())
}

/// Fills in each entry's MotionSNR, keeping the manifest's threshold.
pub fn annotate_snr(manifest: &DatasetManifest, curves: &HashMap<String, SimilarityCurve>) -> Result<DatasetManifest> {
    crate::similarity::filter_dataset(manifest, curves, manifest.header.snr_threshold)
}

/// Seeded partition into train/val/test manifests. Entries keep their
/// original relative order within each split.
pub fn split_manifest(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<[DatasetManifest; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let n = manifest.entries.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let sizes = [n_train, n_val, n - n_train - n_val];
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        let name = ["train", "val", "test"][i];
        return Err(Error::Config(format!("{name} split would be empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "split"));
    let mut start = 0;
    let splits = [Split::Train, Split::Val, Split::Test].map(|split| {
        let i = split as usize;
        let mut idx = order[start..start + sizes[i]].to_vec();
        start += sizes[i];
        idx.sort_unstable();
        let mut m = manifest.clone();
        m.header.split = split;
        m.entries = idx.into_iter().map(|k| manifest.entries[k].clone()).collect();
        m
    });
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            n_triplets: n,
            frames: 48,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn freeze_holds_first_window_frame() {
        let s = SynthSpec {
            edit_kinds: vec![EditKind::Freeze],
            ..spec(1)
        };
        let mut rng = rng::substream(0, "t");
        let wave = Wave::random(&s.layout, 32, &mut rng);
        let (a, b) = (10, 20);
        for j in a..b {
            for c in 0..s.layout.dim() {
                assert_eq!(edited(EditKind::Freeze, &wave, j, a, b, c, 1.0), wave.at(10.0, c));
            }
        }
        let g = generate_one(&s, 0).unwrap();
        let (a, b) = g.window;
        let tgt = g.triplet.target.frames();
        for j in a..b {
            assert_eq!(tgt.row(j), tgt.row(a));
        }
        let mask = g.triplet.edit_mask.unwrap();
        assert!(mask.iter().enumerate().all(|(j, &m)| m == (a..b).contains(&j)));
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let s = SynthSpec {
            magnitude: 0.0,
            ..spec(20)
        };
        for g in generate(&s, Execution::Sequential).unwrap().triplets {
            assert_eq!(g.triplet.source, g.triplet.target);
            assert!(g.triplet.edit_mask.unwrap().iter().all(|&m| !m));
        }
    }

    #[test]
    fn instruction_names_kind_location() {
        for g in generate(&spec(30), Execution::Sequential).unwrap().triplets {
            assert!(g.triplet.instruction.contains(g.location.word()));
            let (a, b) = g.window;
            let third = a * 3 / 48;
            assert_eq!((b - 1) * 3 / 48, third, "window {a}..{b} crosses a third");
        }
    }

    #[test]
    fn lowest_labels_inside_dilated_mask() {
        let cfg = SimilarityConfig::default();
        let w = cfg.window;
        for g in generate(&spec(100), Execution::Sequential).unwrap().triplets {
            let curve = build_curve(&g.triplet, &cfg).unwrap();
            let (a, b) = g.window;
            for (i, &label) in curve.labels.iter().enumerate() {
                if label == 0 {
                    assert!(i + w >= a && i < b + w, "{} frame {i} outside {a}..{b} ({})", g.triplet.id, g.kind);
                }
            }
        }
    }

    #[test]
    fn unedited_frames_far_from_mask_match_exactly() {
        let cfg = SimilarityConfig::default();
        for g in generate(&spec(50), Execution::Sequential).unwrap().triplets {
            let curve = build_curve(&g.triplet, &cfg).unwrap();
            let (a, b) = g.window;
            for (i, &c) in curve.combined.iter().enumerate() {
                if i + cfg.window < a || i >= b + cfg.window {
                    assert_eq!(c, 0.0);
                }
            }
        }
    }

    #[test]
    fn snr_exceeds_five_under_defaults() {
        let s = SynthSpec {
            frames: 64,
            ..spec(100)
        };
        let cfg = SimilarityConfig::default();
        for g in generate(&s, Execution::Sequential).unwrap().triplets {
            let snr = build_curve(&g.triplet, &cfg).unwrap().snr;
            assert!(snr > 5.0, "{} {} snr {snr}", g.triplet.id, g.kind);
        }
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let a = generate(&spec(25), Execution::Sequential).unwrap();
        let b = generate(&spec(25), Execution::Parallel).unwrap();
        assert_eq!(a.edit_triplets(), b.edit_triplets());
        let c = generate(&SynthSpec { seed: 12, ..spec(25) }, Execution::Sequential).unwrap();
        assert_ne!(a.edit_triplets(), c.edit_triplets());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate(&spec(100), Execution::Sequential).unwrap();
        let [tr, va, te] = split_manifest(&ds.manifest, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((tr.entries.len(), va.entries.len(), te.entries.len()), (80, 10, 10));
        let ids: HashSet<_> = [&tr, &va, &te].iter().flat_map(|m| m.entries.iter().map(|e| e.id.clone())).collect();
        assert_eq!(ids.len(), 100);
        assert_eq!(split_manifest(&ds.manifest, [0.8, 0.1, 0.1], 3).unwrap()[1], va);
        assert_ne!(split_manifest(&ds.manifest, [0.8, 0.1, 0.1], 4).unwrap()[1], va);
        assert_eq!(te.split(), Split::Test);
    }

    #[test]
    fn empty_split_rejected() {
        let ds = generate(&spec(5), Execution::Sequential).unwrap();
        assert!(matches!(split_manifest(&ds.manifest, [1.0, 0.0, 0.0], 0), Err(Error::Config(_))));
        assert!(matches!(split_manifest(&ds.manifest, [0.5, 0.2, 0.2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn small_frame_count_rejected() {
        let s = SynthSpec { frames: 7, ..spec(1) };
        assert!(matches!(generate(&s, Execution::Sequential), Err(Error::Config(_))));
        let s = SynthSpec { edit_kinds: vec![], ..spec(1) };
        assert!(s.validate().is_err());
    }
}
