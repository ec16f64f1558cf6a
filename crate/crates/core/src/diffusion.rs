//! DDPM machinery for clean-signal (x0) prediction: the cosine schedule,
//! forward noising and its inverse, the training losses, condition dropout
//! and two-way classifier-free guidance sampling.

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConditionOutput, ModelBundle};
use crate::motion::MotionSequence;
use crate::rng::Rng;
use crate::tape::Mat;
use crate::text::TextFeatures;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Per-step noise levels for `T` steps, indexed `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t+1) / f(0)` with
    /// `f(u) = cos^2(((u/T + s) / (1 + s)) * pi/2)`, `s = 0.008`, built from
    /// per-step betas clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |u: f64| {
            let angle = ((u / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
            angle.cos().powi(2)
        };
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = 1.0;
        for t in 0..steps {
            let beta = (1.0 - f((t + 1) as f64) / f(t as f64)).min(MAX_BETA);
            running *= 1.0 - beta;
            betas.push(beta);
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// Schedule from explicit cumulative products, mainly for tests.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha_bar values must lie in [0, 1]".into()));
        }
        let mut prev = 1.0;
        let betas = alpha_bar
            .iter()
            .map(|&a| {
                let beta = if prev > 0.0 { 1.0 - a / prev } else { 1.0 };
                prev = a;
                beta
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Input(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior `q(x_{t-1} | x_t, x_0)` as (x0 coefficient, x_t
    /// coefficient, variance).
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar_prev(t);
        let beta = self.betas[t];
        let denom = 1.0 - ab;
        let coef_x0 = beta * ab_prev.sqrt() / denom;
        let coef_xt = (1.0 - ab_prev) * (1.0 - beta).sqrt() / denom;
        let var = beta * (1.0 - ab_prev) / denom;
        (coef_x0, coef_xt, var)
    }
}

fn same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) * m0 + sqrt(1 - alpha_bar_t) * eps`
pub fn forward_noise(m0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    same_shape(m0, eps, "forward_noise")?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(m0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Inverse of [`forward_noise`] for known noise.
pub fn reconstruct_x0(mt: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    same_shape(mt, eps, "reconstruct_x0")?;
    let ab = sched.alpha_bar[t];
    if ab <= 0.0 {
        return Err(Error::Numerical(format!("alpha_bar at step {t} is zero")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(mt).and(eps).map_collect(|&x, &e| (x - b * e) / a))
}

/// Mean squared error over every entry.
pub fn editing_loss(m0: &Mat, predicted: &Mat) -> Result<f64> {
    same_shape(m0, predicted, "editing_loss")?;
    let mut acc = 0.0;
    Zip::from(m0).and(predicted).for_each(|&a, &b| acc += (a - b) * (a - b));
    Ok(acc / m0.len() as f64)
}

/// Frame-averaged cross-entropy of per-frame class logits.
pub fn auxiliary_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Input(format!("{} logit rows but {} labels", logits.nrows(), labels.len())));
    }
    let k = logits.ncols();
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if label >= k {
            return Err(Error::Input(format!("label {label} outside [0, {k})")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Unweighted sum of the two objectives.
pub fn total_loss(editing: f64, auxiliary: f64) -> f64 {
    editing + auxiliary
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s_text: f64,
    pub s_motion: f64,
    pub p_drop_text: f64,
    pub p_drop_both: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s_text: 2.0,
            s_motion: 2.0,
            p_drop_text: 0.1,
            p_drop_both: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn with_scales(s_text: f64, s_motion: f64) -> Self {
        GuidanceConfig {
            s_text,
            s_motion,
            ..GuidanceConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_text >= 0.0 && self.s_motion >= 0.0) {
            return Err(Error::Config("guidance scales must be nonnegative".into()));
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(p_ok(self.p_drop_text) && p_ok(self.p_drop_both) && self.p_drop_text + self.p_drop_both <= 1.0) {
            return Err(Error::Config("dropout probabilities must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    /// Weights of the (unconditional, source-only, full) predictions.
    ///
    /// `e_0 + s_m (e_src - e_0) + s_t (e_full - e_src)` regrouped per branch,
    /// which keeps the unit-scale and zero-scale cases exact.
    pub fn branch_weights(&self) -> [f64; 3] {
        [1.0 - self.s_motion, self.s_motion - self.s_text, self.s_text]
    }

    /// Draws which conditions to drop for one training item.
    pub fn draw_dropout(&self, rng: &mut Rng) -> Dropped {
        let u: f64 = rng.random();
        if u < self.p_drop_both {
            Dropped::Both
        } else if u < self.p_drop_both + self.p_drop_text {
            Dropped::Text
        } else {
            Dropped::Nothing
        }
    }
}

/// Conditions replaced by their learned null embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropped {
    Nothing,
    Text,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Unconditional,
    SourceOnly,
    Full,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Unconditional, Branch::SourceOnly, Branch::Full];
}

/// Anything that predicts the clean signal for each guidance branch.
pub trait Denoiser {
    fn predict_x0(&self, noised: &Mat, t: usize, branch: Branch) -> Result<Mat>;
}

/// Combines branch predictions with the two guidance scales. Branches with
/// zero weight are never evaluated.
pub fn guided_prediction<D: Denoiser + ?Sized>(
    denoiser: &D,
    noised: &Mat,
    t: usize,
    guidance: &GuidanceConfig,
) -> Result<Mat> {
    let mut out = Array2::zeros(noised.dim());
    for (branch, w) in Branch::ALL.into_iter().zip(guidance.branch_weights()) {
        if w != 0.0 {
            let e = denoiser.predict_x0(noised, t, branch)?;
            out.scaled_add(w, &e);
        }
    }
    Ok(out)
}

/// Ancestral DDPM sampling from pure noise with guided x0 predictions.
pub fn guided_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    frames: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<Mat> {
    guidance.validate()?;
    let mut x = standard_normal(frames, dim, rng);
    for t in (0..sched.steps()).rev() {
        let x0 = guided_prediction(denoiser, &x, t, guidance)?;
        if t == 0 {
            return Ok(x0);
        }
        let (c0, ct, var) = sched.posterior(t);
        let sigma = var.max(0.0).sqrt();
        let noise = standard_normal(frames, dim, rng);
        x = &x0 * c0 + &x * ct + &noise * sigma;
    }
    unreachable!("schedule has at least one step")
}

/// The editor model with the three condition encodings precomputed.
pub struct EditorDenoiser<'a> {
    bundle: &'a ModelBundle,
    conditions: [ConditionOutput; 3],
}

impl<'a> EditorDenoiser<'a> {
    pub fn new(bundle: &'a ModelBundle, source: &Mat, text: &TextFeatures) -> Result<Self> {
        Ok(EditorDenoiser {
            bundle,
            conditions: [
                bundle.condition_forward_opt(None, None)?,
                bundle.condition_forward_opt(Some(source), None)?,
                bundle.condition_forward_opt(Some(source), Some(text))?,
            ],
        })
    }
}

impl Denoiser for EditorDenoiser<'_> {
    fn predict_x0(&self, noised: &Mat, t: usize, branch: Branch) -> Result<Mat> {
        let cond = match branch {
            Branch::Unconditional => &self.conditions[0],
            Branch::SourceOnly => &self.conditions[1],
            Branch::Full => &self.conditions[2],
        };
        self.bundle.diffusion_forward(noised, t, cond)
    }
}

/// Predicts the same motion for every input and branch.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser(pub Mat);

impl Denoiser for ConstantDenoiser {
    fn predict_x0(&self, noised: &Mat, _t: usize, _branch: Branch) -> Result<Mat> {
        same_shape(noised, &self.0, "constant denoiser")?;
        Ok(self.0.clone())
    }
}

/// Generates an edited motion of `frames` frames for `source` and `text`.
pub fn edit_motion(
    bundle: &ModelBundle,
    source: &MotionSequence,
    text: &TextFeatures,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    frames: usize,
    rng: &mut Rng,
) -> Result<MotionSequence> {
    if frames > bundle.config().max_frames {
        return Err(Error::Capacity(format!(
            "requested {frames} frames, model supports at most {}",
            bundle.config().max_frames
        )));
    }
    let denoiser = EditorDenoiser::new(bundle, source.frames(), text)?;
    let out = guided_sample(&denoiser, sched, guidance, frames, source.dim(), rng)?;
    MotionSequence::new(out, source.layout(), source.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn cosine_schedule_bounds() {
        let s = NoiseSchedule::cosine(300).unwrap();
        let ab = s.alpha_bar();
        assert!(ab[0] >= 0.99, "{}", ab[0]);
        assert!(ab[299] <= 0.01, "{}", ab[299]);
        assert!(ab.windows(2).all(|w| w[0] > w[1]));
        assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        let one = NoiseSchedule::cosine(1).unwrap();
        assert!(one.alpha_bar()[0] > 0.0 && one.alpha_bar()[0] < 1.0);
    }

    #[test]
    fn cosine_schedule_matches_closed_form() {
        let steps = 300;
        let s = NoiseSchedule::cosine(steps).unwrap();
        let f = |u: f64| (((u / steps as f64 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        // no clipping happens before the final step
        for t in [0, 10, 150, 298] {
            let closed = f((t + 1) as f64) / f(0.0);
            assert!((s.alpha_bar()[t] - closed).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn forward_noise_limits() {
        let mut r = substream(0, "t");
        let m0 = standard_normal(4, 3, &mut r);
        let eps = standard_normal(4, 3, &mut r);
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!(forward_noise(&m0, 0, &eps, &s).unwrap(), m0);
        assert_eq!(forward_noise(&m0, 2, &eps, &s).unwrap(), eps);
        let zero = Array2::zeros((4, 3));
        let got = forward_noise(&zero, 1, &eps, &s).unwrap();
        assert_eq!(got, &eps * 0.5f64.sqrt());
        assert!(matches!(reconstruct_x0(&m0, 2, &eps, &s), Err(Error::Numerical(_))));
        assert!(forward_noise(&m0, 0, &Array2::zeros((2, 3)), &s).is_err());
    }

    #[test]
    fn reconstruct_without_noise() {
        let s = NoiseSchedule::cosine(300).unwrap();
        let mt = Array2::from_elem((2, 2), 0.3);
        let got = reconstruct_x0(&mt, 100, &Array2::zeros((2, 2)), &s).unwrap();
        let expected = 0.3 / s.alpha_bar()[100].sqrt();
        assert!(got.iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn forward_marginal_statistics() {
        let s = NoiseSchedule::cosine(300).unwrap();
        let mut r = substream(1, "marginal");
        let m0 = standard_normal(100, 100, &mut r);
        let eps = standard_normal(100, 100, &mut r);
        let mt = forward_noise(&m0, 290, &eps, &s).unwrap();
        let n = mt.len() as f64;
        let mean = mt.sum() / n;
        let var = mt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn loss_examples() {
        let m0 = Array2::zeros((3, 4));
        assert_eq!(editing_loss(&m0, &m0).unwrap(), 0.0);
        assert_eq!(editing_loss(&m0, &Array2::ones((3, 4))).unwrap(), 1.0);
        let uniform = Array2::zeros((5, 3));
        assert!((auxiliary_loss(&uniform, &[0, 1, 2, 1, 0]).unwrap() - 3f64.ln()).abs() < 1e-12);
        let z = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((auxiliary_loss(&z, &[0, 1]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        assert!(matches!(auxiliary_loss(&z, &[0, 2]), Err(Error::Input(_))));
        let sharp = ndarray::array![[60.0, 0.0, 0.0]];
        assert!(auxiliary_loss(&sharp, &[0]).unwrap() < 1e-20);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.5, 0.5), 2.0);
    }

    #[test]
    fn editing_loss_matches_loop() {
        let mut r = substream(2, "loss");
        let a = standard_normal(7, 5, &mut r);
        let b = standard_normal(7, 5, &mut r);
        let mut acc = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                acc += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((editing_loss(&a, &b).unwrap() - acc / 35.0).abs() < 1e-7);
    }

    struct Fixed([Mat; 3]);

    impl Denoiser for Fixed {
        fn predict_x0(&self, _n: &Mat, _t: usize, branch: Branch) -> Result<Mat> {
            Ok(self.0[branch as usize].clone())
        }
    }

    #[test]
    fn unit_and_zero_scales_are_exact() {
        let mut r = substream(3, "cfg");
        let fixed = Fixed([
            standard_normal(4, 3, &mut r),
            standard_normal(4, 3, &mut r),
            standard_normal(4, 3, &mut r),
        ]);
        let x = Array2::zeros((4, 3));
        let full = guided_prediction(&fixed, &x, 0, &GuidanceConfig::with_scales(1.0, 1.0)).unwrap();
        assert_eq!(full, fixed.0[2]);
        let uncond = guided_prediction(&fixed, &x, 0, &GuidanceConfig::with_scales(0.0, 0.0)).unwrap();
        assert_eq!(uncond, fixed.0[0]);
        let g = guided_prediction(&fixed, &x, 0, &GuidanceConfig::with_scales(2.0, 2.0)).unwrap();
        let by_formula = &fixed.0[0] + &((&fixed.0[1] - &fixed.0[0]) * 2.0) + &((&fixed.0[2] - &fixed.0[1]) * 2.0);
        assert!((&g - &by_formula).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn constant_model_samples_constant() {
        let sched = NoiseSchedule::cosine(300).unwrap();
        let c = Array2::from_shape_fn((6, 4), |(i, j)| i as f64 * 0.1 - j as f64);
        for (st, sm) in [(1.0, 1.0), (2.0, 2.0), (0.0, 0.0), (3.5, 0.5)] {
            let mut r = substream(4, "sample");
            let out = guided_sample(
                &ConstantDenoiser(c.clone()),
                &sched,
                &GuidanceConfig::with_scales(st, sm),
                6,
                4,
                &mut r,
            )
            .unwrap();
            assert!((&out - &c).iter().all(|d| d.abs() < 1e-12), "scales ({st}, {sm})");
        }
    }

    #[test]
    fn dropout_rates_match_configuration() {
        let cfg = GuidanceConfig {
            p_drop_text: 0.15,
            p_drop_both: 0.05,
            ..GuidanceConfig::default()
        };
        let mut r = substream(5, "dropout");
        let n = 100_000;
        let (mut text, mut both) = (0, 0);
        for _ in 0..n {
            match cfg.draw_dropout(&mut r) {
                Dropped::Text => text += 1,
                Dropped::Both => both += 1,
                Dropped::Nothing => {}
            }
        }
        assert!((text as f64 / n as f64 - 0.15).abs() < 0.01);
        assert!((both as f64 / n as f64 - 0.05).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn noise_round_trip(seed in 0u64..10_000, t in 0usize..300) {
            let s = NoiseSchedule::cosine(300).unwrap();
            let mut r = substream(seed, "rt");
            let m0 = standard_normal(5, 3, &mut r);
            let eps = standard_normal(5, 3, &mut r);
            let back = reconstruct_x0(&forward_noise(&m0, t, &eps, &s).unwrap(), t, &eps, &s).unwrap();
            prop_assert!((&back - &m0).iter().all(|d| d.abs() < 1e-5));
        }
    }
}
