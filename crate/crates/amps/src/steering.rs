//! Contrastive steering-target extraction with contribution-ratio scaling,
//! learn-to-steer training, and inference-time application.

use crate::diagnostics::{modality_contribution, McrReport, PerturbationConfig};
use crate::error::{AmpsError, Result};
use crate::model::{MultimodalInput, PromptVariant, ToyMllm};
use crate::seed::{labeled_seed, rng_from};
use crate::tensor::{Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

pub const ARTIFACTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TowardVisual,
    TowardText,
}

/// Intensity scaling around the anchor ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub beta: f64,
    pub scale_clamp: (f64, f64),
    /// Verbatim composition mode: s = clamp(1 + γ) with γ = 1 + β·(r−r̃)/r̃,
    /// which yields 2 at the anchor instead of 1.
    pub literal_composition: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            beta: 1.0,
            scale_clamp: (0.0, 3.0),
            literal_composition: false,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_clamp;
        if lo < 0.0 || lo > hi {
            return Err(AmpsError::InvalidArgument(
                "scale_clamp must satisfy 0 ≤ s_min ≤ s_max".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sample steering intensity from the visual ratio and its anchor.
pub fn scaling_factor(r_v: f64, anchor: f64, cfg: &ScalingConfig) -> Result<f64> {
    if anchor <= 0.0 {
        return Err(AmpsError::InvalidArgument("anchor ratio must be > 0".into()));
    }
    cfg.validate()?;
    let gamma = 1.0 + cfg.beta * (r_v - anchor) / anchor;
    let raw = if cfg.literal_composition {
        1.0 + gamma
    } else {
        gamma
    };
    let (lo, hi) = cfg.scale_clamp;
    Ok(raw.clamp(lo, hi))
}

/// Task-level anchor: mean visual ratio across reports.
pub fn compute_anchor_ratio(reports: &[McrReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(AmpsError::InvalidArgument(
            "anchor needs at least one report".into(),
        ));
    }
    Ok(reports.iter().map(|r| r.r_visual).sum::<f64>() / reports.len() as f64)
}

/// One training pair for the steerer: context hidden → scaled target vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerPair {
    pub h_input: Tensor,
    pub v_target: Tensor,
    pub r_v: f64,
    pub scale: f64,
}

/// 2-layer MLP: d_model → d_model (relu) → d_model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteererMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SteererMlp {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        SteererMlp {
            w1: Tensor::randn(vec![d_model, d_model], 0.05, &mut rng),
            b1: Tensor::zeros(vec![d_model]),
            w2: Tensor::randn(vec![d_model, d_model], 0.05, &mut rng),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn zero(d_model: usize) -> Self {
        SteererMlp {
            w1: Tensor::zeros(vec![d_model, d_model]),
            b1: Tensor::zeros(vec![d_model]),
            w2: Tensor::zeros(vec![d_model, d_model]),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    /// Forward on an existing tape; `h` is a [1, d] row.
    pub fn forward_on_tape(&self, tape: &mut Tape, h: TensorId) -> TensorId {
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let z = tape.matmul(h, w1);
        let zb = tape.add_row(z, b1);
        let a = tape.relu(zb);
        let out = tape.matmul(a, w2);
        tape.add_row(out, b2)
    }

    /// Value-level prediction g_Θ(h).
    pub fn predict(&self, h: &Tensor) -> Result<Tensor> {
        if h.len() != self.d_model() {
            return Err(AmpsError::Shape(format!(
                "steerer width {} vs hidden {}",
                self.d_model(),
                h.len()
            )));
        }
        let mut tape = Tape::new();
        let hid = tape.constant(Tensor::new(vec![1, h.len()], h.data().to_vec()));
        let out = self.forward_on_tape(&mut tape, hid);
        Ok(Tensor::new(vec![h.len()], tape.value(out).data().to_vec()))
    }
}

/// Trained steering artifacts: anchor, scaling config, steerer, target layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringArtifacts {
    pub version: u32,
    pub anchor_ratio: f64,
    pub beta: f64,
    pub clamp: (f64, f64),
    /// "normalized" or "literal" (the verbatim composition mode).
    pub mode: String,
    pub layer: usize,
    pub direction: Direction,
    pub mlp: SteererMlp,
    pub final_mse: f64,
    pub target_variance: f64,
    pub loss_curve: Vec<f64>,
}

impl SteeringArtifacts {
    pub fn validate(&self) -> Result<()> {
        if self.version != ARTIFACTS_VERSION {
            return Err(AmpsError::InvalidArgument(format!(
                "unsupported artifacts version {}",
                self.version
            )));
        }
        if !(self.anchor_ratio > 0.0 && self.anchor_ratio < 1.0) {
            return Err(AmpsError::InvalidArgument(
                "anchor_ratio must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// h + α·g_Θ(h).
pub fn apply_steering(hidden: &Tensor, artifacts: &SteeringArtifacts, alpha: f64) -> Result<Tensor> {
    let g = artifacts.mlp.predict(hidden)?;
    let data = hidden
        .data()
        .iter()
        .zip(g.data())
        .map(|(h, d)| h + alpha * d)
        .collect();
    Ok(Tensor::new(vec![hidden.len()], data))
}

/// Build one contrastive pair: three forwards (VisualPref / TextPref / no
/// prompt), MCR on the unprompted input, scaled hidden difference as target.
pub fn collect_steer_pair(
    model: &ToyMllm,
    sample: &MultimodalInput,
    anchor: f64,
    scaling: &ScalingConfig,
    direction: Direction,
    report: &McrReport,
) -> Result<SteerPair> {
    let layer = model.config.steer_layer;
    let base = MultimodalInput::new(
        sample.visual_ids.clone(),
        sample.text_ids.clone(),
        PromptVariant::None,
    );
    let h_none = model.extract_hidden(&base, layer)?;
    let h_pv = model.extract_hidden(&base.clone().with_variant(PromptVariant::VisualPref), layer)?;
    let h_pt = model.extract_hidden(&base.clone().with_variant(PromptVariant::TextPref), layer)?;
    let s = scaling_factor(report.r_visual, anchor, scaling)?;
    let sign = match direction {
        Direction::TowardVisual => 1.0,
        Direction::TowardText => -1.0,
    };
    let v: Vec<f64> = h_pv
        .data()
        .iter()
        .zip(h_pt.data())
        .map(|(a, b)| sign * s * (a - b))
        .collect();
    Ok(SteerPair {
        h_input: h_none,
        v_target: Tensor::new(vec![model.config.d_model], v),
        r_v: report.r_visual,
        scale: s,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteererTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SteererTrainConfig {
    fn default() -> Self {
        SteererTrainConfig {
            epochs: 3000,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Minimize mean ‖v − g_Θ(h)‖² over the pairs (Adam, full batch).
pub fn train_steerer(
    pairs: &[SteerPair],
    anchor: f64,
    scaling: &ScalingConfig,
    direction: Direction,
    layer: usize,
    cfg: &SteererTrainConfig,
) -> Result<SteeringArtifacts> {
    if pairs.len() < 2 {
        return Err(AmpsError::InvalidArgument(
            "steerer training needs at least 2 pairs".into(),
        ));
    }
    let d = pairs[0].h_input.len();
    for p in pairs {
        if p.h_input.len() != d || p.v_target.len() != d {
            return Err(AmpsError::Shape("inconsistent pair widths".into()));
        }
    }
    let n = pairs.len() as f64;
    let mean_target: Vec<f64> = (0..d)
        .map(|j| pairs.iter().map(|p| p.v_target.data()[j]).sum::<f64>() / n)
        .collect();
    let target_variance = pairs
        .iter()
        .map(|p| {
            p.v_target
                .data()
                .iter()
                .zip(&mean_target)
                .map(|(v, m)| (v - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;

    let mut mlp = SteererMlp::init(d, labeled_seed(cfg.seed, "steerer-init"));
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let sizes = [d * d, d, d * d, d];
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; *s]).collect();
    let mut m2: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; *s]).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for step in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let w1 = tape.leaf(mlp.w1.clone());
        let b1 = tape.leaf(mlp.b1.clone());
        let w2 = tape.leaf(mlp.w2.clone());
        let b2 = tape.leaf(mlp.b2.clone());
        let mut loss_acc: Option<TensorId> = None;
        for p in pairs {
            let h = tape.constant(Tensor::new(vec![1, d], p.h_input.data().to_vec()));
            let t = tape.constant(Tensor::new(vec![1, d], p.v_target.data().to_vec()));
            let z = tape.matmul(h, w1);
            let zb = tape.add_row(z, b1);
            let a = tape.relu(zb);
            let o = tape.matmul(a, w2);
            let ob = tape.add_row(o, b2);
            let diff = tape.sub(ob, t);
            let l = tape.sum_squares(diff);
            loss_acc = Some(match loss_acc {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        let total = loss_acc.unwrap();
        let loss = tape.scale(total, 1.0 / n);
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(AmpsError::Diverged("steerer loss non-finite".into()));
        }
        curve.push(lv);
        tape.backward(loss)?;
        let grads = [tape.grad(w1), tape.grad(b1), tape.grad(w2), tape.grad(b2)];
        let params: [&mut Tensor; 4] = [&mut mlp.w1, &mut mlp.b1, &mut mlp.w2, &mut mlp.b2];
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for (i, p) in params.into_iter().enumerate() {
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m1[i][j] = beta1 * m1[i][j] + (1.0 - beta1) * g;
                m2[i][j] = beta2 * m2[i][j] + (1.0 - beta2) * g * g;
                let mh = m1[i][j] / bc1;
                let vh = m2[i][j] / bc2;
                *w -= cfg.learning_rate * mh / (vh.sqrt() + eps);
            }
        }
    }

    Ok(SteeringArtifacts {
        version: ARTIFACTS_VERSION,
        anchor_ratio: anchor,
        beta: scaling.beta,
        clamp: scaling.scale_clamp,
        mode: if scaling.literal_composition {
            "literal".into()
        } else {
            "normalized".into()
        },
        layer,
        direction,
        mlp,
        final_mse: *curve.last().unwrap(),
        target_variance,
        loss_curve: curve,
    })
}

/// Median-of-reports estimate of R_visual for one input.
///
/// Single MCR reports are heavy-tailed (squared gradient norms under KV
/// perturbations), so per-sample scaling factors use the median of several
/// independent fixed-seed reports instead of one larger report. Each rep
/// gets its own counter seed derived from the perturbation seed and the
/// sample index, so the estimate is reproducible and independent across
/// samples.
pub fn estimate_r_visual_median(
    model: &ToyMllm,
    input: &MultimodalInput,
    perturb: &PerturbationConfig,
    reps: usize,
    samples_per_rep: usize,
    sample_index: u64,
) -> Result<f64> {
    if reps == 0 || reps > 100 || samples_per_rep == 0 {
        return Err(AmpsError::InvalidArgument(
            "median estimate needs 1..=100 reps and ≥1 sample per rep".into(),
        ));
    }
    let mut vals = Vec::with_capacity(reps);
    for rep in 0..reps as u64 {
        let mut cfg = perturb.clone();
        cfg.n_samples = samples_per_rep;
        cfg.seed = crate::seed::counter_seed(perturb.seed, "median", sample_index * 100 + rep);
        vals.push(modality_contribution(model, input, &cfg)?.r_visual);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(vals[vals.len() / 2])
}

/// End-to-end artifact build with median-of-reports ratio estimates.
///
/// Per sample: estimate r_v (median of `median_reps` reports of
/// `samples_per_rep` draws each), then anchor = mean r_v, then one
/// contrastive pair with the scaled prompt-difference target, then the
/// steerer fit. This is the build used by the experiment arms; see
/// [`build_artifacts`] for the single-report variant.
pub fn build_artifacts_robust(
    model: &ToyMllm,
    samples: &[MultimodalInput],
    scaling: &ScalingConfig,
    perturb: &PerturbationConfig,
    median_reps: usize,
    samples_per_rep: usize,
    direction: Direction,
    train_cfg: &SteererTrainConfig,
) -> Result<SteeringArtifacts> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(AmpsError::InvalidArgument("no steering samples".into()));
    }
    let layer = model.config.steer_layer;
    let rvs: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let base =
                MultimodalInput::new(s.visual_ids.clone(), s.text_ids.clone(), PromptVariant::None);
            estimate_r_visual_median(model, &base, perturb, median_reps, samples_per_rep, i as u64)
        })
        .collect::<Result<_>>()?;
    let anchor = rvs.iter().sum::<f64>() / rvs.len() as f64;
    let sign = match direction {
        Direction::TowardVisual => 1.0,
        Direction::TowardText => -1.0,
    };
    let mut pairs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let base =
            MultimodalInput::new(s.visual_ids.clone(), s.text_ids.clone(), PromptVariant::None);
        let h = model.extract_hidden(&base, layer)?;
        let h_pv =
            model.extract_hidden(&base.clone().with_variant(PromptVariant::VisualPref), layer)?;
        let h_pt =
            model.extract_hidden(&base.clone().with_variant(PromptVariant::TextPref), layer)?;
        let sf = scaling_factor(rvs[i], anchor, scaling)?;
        let v: Vec<f64> = h_pv
            .data()
            .iter()
            .zip(h_pt.data())
            .map(|(a, b)| sign * sf * (a - b))
            .collect();
        pairs.push(SteerPair {
            h_input: h,
            v_target: Tensor::new(vec![model.config.d_model], v),
            r_v: rvs[i],
            scale: sf,
        });
    }
    train_steerer(&pairs, anchor, scaling, direction, layer, train_cfg)
}

/// End-to-end artifact build: MCR per sample, anchor, pairs, steerer.
/// Degenerate MCR samples are skipped (with their indices reported).
pub fn build_artifacts(
    model: &ToyMllm,
    samples: &[MultimodalInput],
    scaling: &ScalingConfig,
    perturb: &PerturbationConfig,
    direction: Direction,
    train_cfg: &SteererTrainConfig,
) -> Result<(SteeringArtifacts, Vec<usize>)> {
    let mut reports = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let base = MultimodalInput::new(s.visual_ids.clone(), s.text_ids.clone(), PromptVariant::None);
        let mut cfg = perturb.clone();
        cfg.seed = crate::seed::counter_seed(perturb.seed, "pair-mcr", i as u64);
        match modality_contribution(model, &base, &cfg) {
            Ok(r) => {
                reports.push(r);
                kept.push(i);
            }
            Err(AmpsError::Degenerate(_)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    let anchor = compute_anchor_ratio(&reports)?;
    let mut pairs = Vec::with_capacity(kept.len());
    for (r, &i) in reports.iter().zip(&kept) {
        pairs.push(collect_steer_pair(
            model, &samples[i], anchor, scaling, direction, r,
        )?);
    }
    let artifacts = train_steerer(
        &pairs,
        anchor,
        scaling,
        direction,
        model.config.steer_layer,
        train_cfg,
    )?;
    Ok((artifacts, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_report(r_v: f64) -> McrReport {
        McrReport {
            c_visual: r_v,
            c_text: 1.0 - r_v,
            r_visual: r_v,
            r_text: 1.0 - r_v,
            n: 1,
            sigma: crate::diagnostics::SigmaPair {
                visual: 0.1,
                text: 0.1,
            },
            seed: 0,
            raw_samples: Default::default(),
            ce: Default::default(),
            degenerate_draws: 0,
            warning: None,
        }
    }

    #[test]
    fn anchor_is_mean() {
        let reports = vec![dummy_report(0.4), dummy_report(0.6)];
        assert_eq!(compute_anchor_ratio(&reports).unwrap(), 0.5);
        assert_eq!(compute_anchor_ratio(&[dummy_report(0.37)]).unwrap(), 0.37);
        assert!(compute_anchor_ratio(&[]).is_err());
    }

    #[test]
    fn scaling_factor_modes() {
        let cfg = ScalingConfig::default();
        assert_eq!(scaling_factor(0.5, 0.5, &cfg).unwrap(), 1.0);
        let s = scaling_factor(0.6, 0.5, &cfg).unwrap();
        assert!((s - 1.2).abs() < 1e-12);
        let lit = ScalingConfig {
            literal_composition: true,
            ..ScalingConfig::default()
        };
        assert_eq!(scaling_factor(0.5, 0.5, &lit).unwrap(), 2.0);
        assert!(scaling_factor(0.5, 0.0, &cfg).is_err());
    }

    #[test]
    fn scaling_factor_clamps_and_is_monotone() {
        let cfg = ScalingConfig::default();
        assert_eq!(scaling_factor(0.0, 0.1, &cfg).unwrap(), 0.0);
        assert_eq!(scaling_factor(0.9, 0.1, &cfg).unwrap(), 3.0);
        let mut prev = -1.0;
        for i in 0..20 {
            let r = 0.05 + 0.045 * i as f64;
            let s = scaling_factor(r, 0.5, &cfg).unwrap();
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn apply_steering_identity_cases() {
        let d = 4;
        let art = SteeringArtifacts {
            version: ARTIFACTS_VERSION,
            anchor_ratio: 0.5,
            beta: 1.0,
            clamp: (0.0, 3.0),
            mode: "normalized".into(),
            layer: 1,
            direction: Direction::TowardVisual,
            mlp: SteererMlp::init(d, 1),
            final_mse: 0.0,
            target_variance: 0.0,
            loss_curve: vec![],
        };
        let h = Tensor::new(vec![d], vec![0.5, -1.0, 2.0, 0.0]);
        let out = apply_steering(&h, &art, 0.0).unwrap();
        assert_eq!(out, h);
        let zero = SteeringArtifacts {
            mlp: SteererMlp::zero(d),
            ..art.clone()
        };
        assert_eq!(apply_steering(&h, &zero, 5.0).unwrap(), h);
    }

    #[test]
    fn apply_steering_scalar_example() {
        // hidden [1.0], α = 0.5, g ≡ [2.0] → [2.0].
        let mut mlp = SteererMlp::zero(1);
        mlp.b2 = Tensor::new(vec![1], vec![2.0]);
        let art = SteeringArtifacts {
            version: ARTIFACTS_VERSION,
            anchor_ratio: 0.5,
            beta: 1.0,
            clamp: (0.0, 3.0),
            mode: "normalized".into(),
            layer: 1,
            direction: Direction::TowardVisual,
            mlp,
            final_mse: 0.0,
            target_variance: 0.0,
            loss_curve: vec![],
        };
        let out = apply_steering(&Tensor::new(vec![1], vec![1.0]), &art, 0.5).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn apply_steering_linear_in_alpha() {
        let d = 6;
        let art = SteeringArtifacts {
            version: ARTIFACTS_VERSION,
            anchor_ratio: 0.5,
            beta: 1.0,
            clamp: (0.0, 3.0),
            mode: "normalized".into(),
            layer: 1,
            direction: Direction::TowardVisual,
            mlp: SteererMlp::init(d, 7),
            final_mse: 0.0,
            target_variance: 0.0,
            loss_curve: vec![],
        };
        let mut rng = rng_from(8);
        let h = Tensor::randn(vec![d], 1.0, &mut rng);
        let a1 = apply_steering(&h, &art, 0.7).unwrap();
        let a2 = apply_steering(&h, &art, 1.1).unwrap();
        let both = apply_steering(&h, &art, 1.8).unwrap();
        for j in 0..d {
            let lhs = a1.data()[j] + a2.data()[j] - h.data()[j];
            assert!((lhs - both.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_steering_width_mismatch() {
        let art = SteeringArtifacts {
            version: ARTIFACTS_VERSION,
            anchor_ratio: 0.5,
            beta: 1.0,
            clamp: (0.0, 3.0),
            mode: "normalized".into(),
            layer: 1,
            direction: Direction::TowardVisual,
            mlp: SteererMlp::init(4, 1),
            final_mse: 0.0,
            target_variance: 0.0,
            loss_curve: vec![],
        };
        assert!(apply_steering(&Tensor::new(vec![2], vec![1.0, 2.0]), &art, 1.0).is_err());
    }

    #[test]
    fn steerer_fits_linear_map() {
        // Targets from an exact linear map; the MLP reaches near-zero MSE.
        let d = 4;
        let mut rng = rng_from(9);
        let a_map = Tensor::randn(vec![d, d], 0.5, &mut rng);
        let mut pairs = Vec::new();
        for _ in 0..20 {
            let h = Tensor::randn(vec![d], 1.0, &mut rng);
            let mut v = vec![0.0; d];
            for j in 0..d {
                for i in 0..d {
                    v[j] += h.data()[i] * a_map.at(i, j);
                }
            }
            pairs.push(SteerPair {
                h_input: h,
                v_target: Tensor::new(vec![d], v),
                r_v: 0.5,
                scale: 1.0,
            });
        }
        let cfg = SteererTrainConfig {
            epochs: 8000,
            learning_rate: 1e-2,
            seed: 3,
        };
        let art = train_steerer(
            &pairs,
            0.5,
            &ScalingConfig::default(),
            Direction::TowardVisual,
            1,
            &cfg,
        )
        .unwrap();
        assert!(art.final_mse < 1e-5, "final mse {}", art.final_mse);
        assert!(art.final_mse <= 0.1 * art.target_variance);
    }

    #[test]
    fn steerer_memorizes_repeated_pair() {
        let d = 3;
        let pair = SteerPair {
            h_input: Tensor::new(vec![d], vec![0.4, -0.2, 1.0]),
            v_target: Tensor::new(vec![d], vec![1.0, 0.5, -0.3]),
            r_v: 0.5,
            scale: 1.0,
        };
        let cfg = SteererTrainConfig {
            epochs: 1500,
            learning_rate: 1e-2,
            seed: 4,
        };
        let art = train_steerer(
            &[pair.clone(), pair],
            0.5,
            &ScalingConfig::default(),
            Direction::TowardVisual,
            1,
            &cfg,
        )
        .unwrap();
        assert!(art.final_mse < 1e-8, "final mse {}", art.final_mse);
    }

    #[test]
    fn steerer_training_deterministic() {
        let d = 3;
        let mut rng = rng_from(10);
        let pairs: Vec<SteerPair> = (0..4)
            .map(|_| SteerPair {
                h_input: Tensor::randn(vec![d], 1.0, &mut rng),
                v_target: Tensor::randn(vec![d], 1.0, &mut rng),
                r_v: 0.5,
                scale: 1.0,
            })
            .collect();
        let cfg = SteererTrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            seed: 5,
        };
        let a = train_steerer(&pairs, 0.5, &ScalingConfig::default(), Direction::TowardVisual, 1, &cfg).unwrap();
        let b = train_steerer(&pairs, 0.5, &ScalingConfig::default(), Direction::TowardVisual, 1, &cfg).unwrap();
        assert_eq!(a.mlp, b.mlp);
    }

    #[test]
    fn artifacts_roundtrip_bit_exact() {
        let art = SteeringArtifacts {
            version: ARTIFACTS_VERSION,
            anchor_ratio: 0.47,
            beta: 1.0,
            clamp: (0.0, 3.0),
            mode: "normalized".into(),
            layer: 2,
            direction: Direction::TowardText,
            mlp: SteererMlp::init(4, 11),
            final_mse: 0.001,
            target_variance: 0.5,
            loss_curve: vec![1.0, 0.5],
        };
        let json = serde_json::to_string(&art).unwrap();
        let back: SteeringArtifacts = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert_eq!(back.mlp, art.mlp);
    }
}
