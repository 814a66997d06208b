//! Modality contribution diagnostics.
//!
//! The contribution score of a modality is a Monte Carlo estimate of the
//! functional Fisher information of the next-token distribution under
//! Gaussian perturbation of that modality's KV cache entries: perturb the
//! cached K/V rows, re-run the final position, take the squared gradient
//! norm of the cross-entropy against the unperturbed distribution, and
//! normalize by the loss. The module also carries low-dimensional Monte
//! Carlo estimators of functional entropy and its Fisher-information bound,
//! used to validate the machinery against closed forms.

use crate::error::{AmpsError, Result};
use crate::model::{KvCache, Modality, MultimodalInput, ToyMllm};
use crate::seed::{counter_seed, rng_from};
use crate::tensor::{softmax, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// CE values below this floor are treated as an unperturbable draw.
pub const DEGENERATE_CE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// σ_m used verbatim.
    AbsoluteValue,
    /// σ_m is a multiplier on the standard deviation of the modality's
    /// cached K/V entries.
    RelativeToKvStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub n_samples: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_visual: f64,
    pub sigma_text: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            n_samples: 3,
            sigma_mode: SigmaMode::RelativeToKvStd,
            sigma_visual: 0.1,
            sigma_text: 0.1,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(AmpsError::InvalidArgument("n_samples must be ≥ 1".into()));
        }
        if self.sigma_visual <= 0.0 || self.sigma_text <= 0.0 {
            return Err(AmpsError::InvalidArgument("sigma must be positive".into()));
        }
        Ok(())
    }

    fn sigma_for(&self, m: Modality) -> f64 {
        match m {
            Modality::Visual => self.sigma_visual,
            _ => self.sigma_text,
        }
    }
}

/// Per-modality raw values inside an [`McrReport`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerModality {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

/// Modality contribution scores and ratios for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McrReport {
    pub c_visual: f64,
    pub c_text: f64,
    pub r_visual: f64,
    pub r_text: f64,
    pub n: usize,
    pub sigma: SigmaPair,
    pub seed: u64,
    pub raw_samples: PerModality,
    /// CE loss per perturbation draw.
    pub ce: PerModality,
    /// Draws where the CE fell below the degenerate floor.
    pub degenerate_draws: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPair {
    pub visual: f64,
    pub text: f64,
}

/// Frozen reference for one input: unperturbed distribution and cache.
pub struct Reference {
    pub p_x: Tensor,
    pub cache: KvCache,
}

pub fn reference_forward(model: &ToyMllm, input: &MultimodalInput) -> Result<Reference> {
    let out = model.prefill(input, None)?;
    Ok(Reference {
        p_x: softmax(&out.logits)?,
        cache: out.cache,
    })
}

/// Resolved absolute σ for a modality, honoring the sigma mode.
pub fn resolve_sigma(cache: &KvCache, modality: Modality, cfg: &PerturbationConfig) -> f64 {
    let base = cfg.sigma_for(modality);
    match cfg.sigma_mode {
        SigmaMode::AbsoluteValue => base,
        SigmaMode::RelativeToKvStd => {
            let span = cache.spans.positions(modality);
            let mut vals = Vec::new();
            for layer in &cache.layers {
                for t in layer.k.iter().chain(layer.v.iter()) {
                    for &p in span {
                        vals.extend_from_slice(t.row(p));
                    }
                }
            }
            if vals.is_empty() {
                return base;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            base * var.sqrt().max(1e-12)
        }
    }
}

/// Copy of `cache` with i.i.d. N(0, σ²) noise added to the K and V rows at
/// the modality's span positions. All other entries are bit-identical.
pub fn perturb_kv_spans<R: Rng>(
    cache: &KvCache,
    modality: Modality,
    sigma: f64,
    rng: &mut R,
) -> Result<KvCache> {
    if sigma <= 0.0 {
        return Err(AmpsError::InvalidArgument("sigma must be positive".into()));
    }
    let span = cache.spans.positions(modality);
    if span.is_empty() {
        return Err(AmpsError::InvalidArgument(format!(
            "modality {modality:?} absent from cache spans"
        )));
    }
    let mut out = cache.clone();
    for layer in &mut out.layers {
        for t in layer.k.iter_mut().chain(layer.v.iter_mut()) {
            let cols = t.cols();
            for &p in span {
                for j in 0..cols {
                    let idx = p * cols + j;
                    t.data_mut()[idx] += sigma * gauss(rng);
                }
            }
        }
    }
    Ok(out)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub struct ContributionDraw {
    pub value: f64,
    pub ce: f64,
    pub degenerate: bool,
}

/// One Monte Carlo draw of the contribution score C_{m,j}.
pub fn contribution_sample<R: Rng>(
    model: &ToyMllm,
    input: &MultimodalInput,
    reference: &Reference,
    modality: Modality,
    sigma: f64,
    rng: &mut R,
) -> Result<ContributionDraw> {
    let perturbed = perturb_kv_spans(&reference.cache, modality, sigma, rng)?;
    let mut tape = Tape::new();
    let replay = model.replay_on_tape(&mut tape, input, &perturbed)?;
    // Target = P_x, prediction = P_z: the gradient flows through the
    // perturbed branch.
    let loss = tape.cross_entropy_vs(reference.p_x.data(), replay.probs);
    let ce = tape.value(loss).data()[0];
    if !ce.is_finite() {
        return Err(AmpsError::NonFinite("perturbed cross-entropy".into()));
    }
    if ce < DEGENERATE_CE_FLOOR {
        return Ok(ContributionDraw {
            value: 0.0,
            ce,
            degenerate: true,
        });
    }
    tape.backward(loss)?;
    let span = perturbed.spans.positions(modality);
    let mut norm_sq = 0.0;
    for heads in &replay.cache_ids {
        for (k_id, v_id) in heads {
            for id in [k_id, v_id] {
                let g = tape.grad(*id);
                let cols = model.config.head_dim();
                for &p in span {
                    for j in 0..cols {
                        let gv = g[p * cols + j];
                        norm_sq += gv * gv;
                    }
                }
            }
        }
    }
    let value = norm_sq / ce;
    if !value.is_finite() || value < 0.0 {
        return Err(AmpsError::NonFinite("contribution score".into()));
    }
    Ok(ContributionDraw {
        value,
        ce,
        degenerate: false,
    })
}

/// Full MCR estimate (Monte Carlo over N draws per modality).
pub fn modality_contribution(
    model: &ToyMllm,
    input: &MultimodalInput,
    cfg: &PerturbationConfig,
) -> Result<McrReport> {
    cfg.validate()?;
    let reference = reference_forward(model, input)?;
    let visual_present = !reference.cache.spans.positions(Modality::Visual).is_empty();
    let text_present = !reference.cache.spans.positions(Modality::Text).is_empty();
    if !visual_present && !text_present {
        return Err(AmpsError::Degenerate("no modality spans present".into()));
    }

    let sigma = SigmaPair {
        visual: resolve_sigma(&reference.cache, Modality::Visual, cfg),
        text: resolve_sigma(&reference.cache, Modality::Text, cfg),
    };

    let mut raw = PerModality::default();
    let mut ce = PerModality::default();
    let mut degenerate_draws = 0;
    for (modality, present, sig) in [
        (Modality::Visual, visual_present, sigma.visual),
        (Modality::Text, text_present, sigma.text),
    ] {
        if !present {
            continue;
        }
        let label = match modality {
            Modality::Visual => "mc-visual",
            _ => "mc-text",
        };
        for j in 0..cfg.n_samples {
            let mut rng = rng_from(counter_seed(cfg.seed, label, j as u64));
            let draw = contribution_sample(model, input, &reference, modality, sig, &mut rng)?;
            if draw.degenerate {
                degenerate_draws += 1;
            }
            match modality {
                Modality::Visual => {
                    raw.visual.push(draw.value);
                    ce.visual.push(draw.ce);
                }
                _ => {
                    raw.text.push(draw.value);
                    ce.text.push(draw.ce);
                }
            }
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let c_visual = mean(&raw.visual);
    let c_text = mean(&raw.text);
    let total = c_visual + c_text;

    let (r_visual, r_text, warning) = if !visual_present {
        (0.0, 1.0, Some("visual span empty; R_text forced to 1".into()))
    } else if !text_present {
        (1.0, 0.0, Some("text span empty; R_visual forced to 1".into()))
    } else if total == 0.0 {
        return Err(AmpsError::Degenerate(
            "all contribution draws were zero".into(),
        ));
    } else {
        (c_visual / total, c_text / total, None)
    };

    Ok(McrReport {
        c_visual,
        c_text,
        r_visual,
        r_text,
        n: cfg.n_samples,
        sigma,
        seed: cfg.seed,
        raw_samples: raw,
        ce,
        degenerate_draws,
        warning,
    })
}

/// Wall-time of `modality_contribution` at each N (median of `reps` runs).
pub fn mcs_timing_profile(
    model: &ToyMllm,
    input: &MultimodalInput,
    n_values: &[usize],
    cfg: &PerturbationConfig,
    reps: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps.max(1) {
            let mut c = cfg.clone();
            c.n_samples = n;
            let t0 = Instant::now();
            modality_contribution(model, input, &c)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push((n, times[times.len() / 2]));
    }
    Ok(out)
}

// ── Functional entropy oracles ───────────────────────────────────────

/// Isotropic Gaussian measure N(mean, σ²·I) on R^d.
#[derive(Debug, Clone)]
pub struct IsotropicGaussian {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl IsotropicGaussian {
    pub fn standard(dim: usize) -> Self {
        IsotropicGaussian {
            dim,
            mean: vec![0.0; dim],
            sigma: 1.0,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.mean[i] + self.sigma * gauss(rng))
            .collect()
    }
}

/// Monte Carlo estimate of Ent_μ(f) = E[f log f] − E[f]·log E[f], with a
/// delta-method standard error.
pub fn functional_entropy_mc<F>(
    f: F,
    mu: &IsotropicGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = rng_from(seed);
    let n = n_samples as f64;
    let (mut sum_a, mut sum_b) = (0.0, 0.0);
    let (mut sum_aa, mut sum_bb, mut sum_ab) = (0.0, 0.0, 0.0);
    for _ in 0..n_samples {
        let z = mu.sample(&mut rng);
        let fv = f(&z);
        if !(fv > 0.0) {
            return Err(AmpsError::InvalidArgument(format!(
                "f must be positive on the support (got {fv})"
            )));
        }
        let a = fv * fv.ln();
        sum_a += a;
        sum_b += fv;
        sum_aa += a * a;
        sum_bb += fv * fv;
        sum_ab += a * fv;
    }
    let mean_a = sum_a / n;
    let mean_b = sum_b / n;
    let ent = mean_a - mean_b * mean_b.ln();
    // Delta method on g(A,B) = A − B·ln B.
    let var_a = (sum_aa / n - mean_a * mean_a).max(0.0);
    let var_b = (sum_bb / n - mean_b * mean_b).max(0.0);
    let cov = sum_ab / n - mean_a * mean_b;
    let db = -(mean_b.ln() + 1.0);
    let var = (var_a + db * db * var_b + 2.0 * db * cov).max(0.0);
    Ok((ent, (var / n).sqrt()))
}

/// Monte Carlo estimate of the log-Sobolev right-hand side
/// (1/2)·E[‖∇f‖²/f], with its standard error.
pub fn fisher_bound_mc<F, G>(
    f: F,
    grad_f: G,
    mu: &IsotropicGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = rng_from(seed);
    let n = n_samples as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let z = mu.sample(&mut rng);
        let fv = f(&z);
        if !(fv > 0.0) {
            return Err(AmpsError::InvalidArgument(format!(
                "f must be positive on the support (got {fv})"
            )));
        }
        let g = grad_f(&z);
        let term = 0.5 * g.iter().map(|v| v * v).sum::<f64>() / fv;
        sum += term;
        sum_sq += term * term;
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Random positive smooth test function: a constant plus Gaussian bumps.
/// f(z) = c + Σ_i w_i exp(−‖z − μ_i‖² / (2 s_i²)), all w_i > 0.
#[derive(Debug, Clone)]
pub struct GaussianBumps {
    pub constant: f64,
    pub weights: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
}

impl GaussianBumps {
    pub fn random(dim: usize, n_bumps: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        GaussianBumps {
            constant: 0.2 + rng.gen::<f64>(),
            weights: (0..n_bumps).map(|_| 0.2 + 2.0 * rng.gen::<f64>()).collect(),
            centers: (0..n_bumps)
                .map(|_| (0..dim).map(|_| 2.0 * gauss(&mut rng)).collect())
                .collect(),
            widths: (0..n_bumps).map(|_| 0.5 + rng.gen::<f64>()).collect(),
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let mut acc = self.constant;
        for i in 0..self.weights.len() {
            let d2: f64 = z
                .iter()
                .zip(&self.centers[i])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            acc += self.weights[i] * (-d2 / (2.0 * self.widths[i] * self.widths[i])).exp();
        }
        acc
    }

    pub fn grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        for i in 0..self.weights.len() {
            let s2 = self.widths[i] * self.widths[i];
            let d2: f64 = z
                .iter()
                .zip(&self.centers[i])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let e = self.weights[i] * (-d2 / (2.0 * s2)).exp();
            for j in 0..z.len() {
                g[j] += e * (self.centers[i][j] - z[j]) / s2;
            }
        }
        g
    }
}
