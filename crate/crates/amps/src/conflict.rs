//! Synthetic modality-conflict task.
//!
//! Eight attribute categories, each with its own small answer vocabulary.
//! A sample shows one fact through the visual path and a (possibly
//! conflicting) fact through the text path; the model answers with a single
//! next token. Conflict samples disagree on purpose, so the chosen answer
//! reveals which modality the model preferred.

use crate::error::{AmpsError, Result};
use crate::model::{argmax, MultimodalInput, PromptVariant, SteerHook, ToyMllm, ToyMllmConfig};
use crate::seed::{labeled_seed, rng_from};
use crate::steering::SteeringArtifacts;
use crate::tensor::{softmax, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const ATTRIBUTES: [&str; 8] = [
    "activity",
    "attribute",
    "color",
    "counting",
    "object",
    "positional",
    "sentiment",
    "sport",
];

/// Token layout for the task on top of a model config:
/// answer tokens `[attr·A, attr·A + A)`, one marker token per attribute
/// after the answers, preference-prompt tokens reserved at the top of the
/// text vocab by the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskVocab {
    pub n_attributes: usize,
    pub answers_per_attribute: usize,
}

impl Default for TaskVocab {
    fn default() -> Self {
        TaskVocab {
            n_attributes: ATTRIBUTES.len(),
            answers_per_attribute: 4,
        }
    }
}

impl TaskVocab {
    pub fn validate(&self, cfg: &ToyMllmConfig) -> Result<()> {
        if self.answers_per_attribute < 2 {
            return Err(AmpsError::InvalidArgument(
                "each attribute needs at least 2 answer tokens".into(),
            ));
        }
        if self.n_attributes == 0 || self.n_attributes > ATTRIBUTES.len() {
            return Err(AmpsError::InvalidArgument(
                "n_attributes must be in 1..=8".into(),
            ));
        }
        let needed_text = self.n_attributes * self.answers_per_attribute + self.n_attributes;
        if needed_text > cfg.reserved_prompt_base() {
            return Err(AmpsError::InvalidArgument(format!(
                "task needs {needed_text} text tokens but only {} are free",
                cfg.reserved_prompt_base()
            )));
        }
        let needed_visual = self.n_attributes * self.answers_per_attribute;
        if needed_visual > cfg.vocab_size_visual {
            return Err(AmpsError::InvalidArgument(format!(
                "task needs {needed_visual} visual tokens but vocab has {}",
                cfg.vocab_size_visual
            )));
        }
        Ok(())
    }

    pub fn answer_token(&self, attr: usize, answer: usize) -> usize {
        attr * self.answers_per_attribute + answer
    }

    pub fn answer_tokens(&self, attr: usize) -> std::ops::Range<usize> {
        let a = self.answers_per_attribute;
        attr * a..(attr + 1) * a
    }

    pub fn attr_marker(&self, attr: usize) -> usize {
        self.n_attributes * self.answers_per_attribute + attr
    }

    pub fn visual_token(&self, attr: usize, answer: usize) -> usize {
        attr * self.answers_per_attribute + answer
    }

    pub fn attribute_name(&self, attr: usize) -> &'static str {
        ATTRIBUTES[attr]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictSample {
    pub attribute: String,
    pub attr_index: usize,
    /// Answer token implied by the visual ids.
    pub visual_fact: usize,
    /// Conflicting answer token asserted by the text ids.
    pub text_fact: usize,
    /// How many times the text ids repeat the text fact (1..=max_text_strength).
    /// Higher strength means stronger text evidence and a more severe text
    /// preference on the trained model.
    pub text_strength: usize,
    pub input: MultimodalInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_conflict: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    /// Upper bound for the per-sample text evidence repetition count.
    pub max_text_strength: usize,
    pub vocab: TaskVocab,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_conflict: 200,
            n_train: 480,
            n_holdout: 64,
            max_text_strength: 3,
            vocab: TaskVocab::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictDataset {
    pub conflict: Vec<ConflictSample>,
    /// Training mixture: 70% non-conflict, 30% conflict (labels split
    /// between the modalities, two thirds of them prompted).
    pub train: Vec<MultimodalInput>,
    /// Non-conflict held-out samples.
    pub holdout: Vec<MultimodalInput>,
}

fn make_input(
    vocab: &TaskVocab,
    attr: usize,
    visual_ans: usize,
    text_ans: usize,
    strength: usize,
    variant: PromptVariant,
) -> MultimodalInput {
    let mut text_ids = vec![vocab.attr_marker(attr)];
    text_ids.extend(std::iter::repeat(vocab.answer_token(attr, text_ans)).take(strength));
    MultimodalInput::new(vec![vocab.visual_token(attr, visual_ans)], text_ids, variant)
}

/// Generate the conflict evaluation set plus the companion training mixture
/// and the non-conflict holdout. Byte-identical under the same seed.
pub fn generate_conflict_dataset(cfg: &DatasetConfig, model_cfg: &ToyMllmConfig) -> Result<ConflictDataset> {
    cfg.vocab.validate(model_cfg)?;
    if cfg.n_conflict == 0 {
        return Err(AmpsError::InvalidArgument("n_conflict must be ≥ 1".into()));
    }
    if cfg.max_text_strength == 0 {
        return Err(AmpsError::InvalidArgument(
            "max_text_strength must be ≥ 1".into(),
        ));
    }
    if 4 + cfg.max_text_strength > model_cfg.max_seq_len {
        return Err(AmpsError::InvalidArgument(
            "max_text_strength exceeds the model's sequence budget".into(),
        ));
    }
    let vocab = &cfg.vocab;
    let a = vocab.answers_per_attribute;
    let k_max = cfg.max_text_strength;
    // Position of a strength value within [1, k_max], in [0, 1].
    let align = |k: usize| {
        if k_max == 1 {
            1.0
        } else {
            (k - 1) as f64 / (k_max - 1) as f64
        }
    };

    let mut rng = rng_from(labeled_seed(cfg.seed, "dataset"));
    let mut conflict = Vec::with_capacity(cfg.n_conflict);
    for _ in 0..cfg.n_conflict {
        let attr = rng.gen_range(0..vocab.n_attributes);
        let va = rng.gen_range(0..a);
        let mut ta = rng.gen_range(0..a - 1);
        if ta >= va {
            ta += 1;
        }
        let k = rng.gen_range(1..=k_max);
        conflict.push(ConflictSample {
            attribute: vocab.attribute_name(attr).to_string(),
            attr_index: attr,
            visual_fact: vocab.answer_token(attr, va),
            text_fact: vocab.answer_token(attr, ta),
            text_strength: k,
            input: make_input(vocab, attr, va, ta, k, PromptVariant::None),
        });
    }

    let mut train = Vec::with_capacity(cfg.n_train);
    let n_nc = (cfg.n_train as f64 * 0.7).round() as usize;
    for _ in 0..n_nc {
        let attr = rng.gen_range(0..vocab.n_attributes);
        let ans = rng.gen_range(0..a);
        let k = rng.gen_range(1..=k_max);
        // A third of the agreeing samples carry a preference prompt so the
        // prompt tokens are not exclusively associated with conflict.
        let variant = match rng.gen_range(0..6) {
            0 => PromptVariant::VisualPref,
            1 => PromptVariant::TextPref,
            _ => PromptVariant::None,
        };
        train.push(
            make_input(vocab, attr, ans, ans, k, variant)
                .with_answer(vocab.answer_token(attr, ans)),
        );
    }
    for i in 0..cfg.n_train - n_nc {
        let attr = rng.gen_range(0..vocab.n_attributes);
        let va = rng.gen_range(0..a);
        let mut ta = rng.gen_range(0..a - 1);
        if ta >= va {
            ta += 1;
        }
        let k = rng.gen_range(1..=k_max);
        // Labels encode graded prompt power: a preference prompt overrides
        // weak counter-evidence reliably but only partially overrides strong
        // counter-evidence; unprompted labels follow the evidence balance.
        let (variant, answer) = match i % 3 {
            0 => {
                let p_visual = 1.0 - 0.4 * align(k);
                let ans = if rng.gen_bool(p_visual) { va } else { ta };
                (PromptVariant::VisualPref, ans)
            }
            1 => {
                let p_text = 0.6 + 0.4 * align(k);
                let ans = if rng.gen_bool(p_text) { ta } else { va };
                (PromptVariant::TextPref, ans)
            }
            _ => {
                let p_text = 0.2 + 0.6 * align(k);
                let ans = if rng.gen_bool(p_text) { ta } else { va };
                (PromptVariant::None, ans)
            }
        };
        train.push(
            make_input(vocab, attr, va, ta, k, variant)
                .with_answer(vocab.answer_token(attr, answer)),
        );
    }

    let mut holdout = Vec::with_capacity(cfg.n_holdout);
    for _ in 0..cfg.n_holdout {
        let attr = rng.gen_range(0..vocab.n_attributes);
        let ans = rng.gen_range(0..a);
        let k = rng.gen_range(1..=k_max);
        holdout.push(
            make_input(vocab, attr, ans, ans, k, PromptVariant::None)
                .with_answer(vocab.answer_token(attr, ans)),
        );
    }

    Ok(ConflictDataset {
        conflict,
        train,
        holdout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    Visual,
    Text,
    Other,
}

pub fn preference_of(answer_token: usize, sample: &ConflictSample) -> Preference {
    if answer_token == sample.visual_fact {
        Preference::Visual
    } else if answer_token == sample.text_fact {
        Preference::Text
    } else {
        Preference::Other
    }
}

/// Collapse: answer outside the attribute's answer set, or a near-uniform
/// output distribution (entropy above 0.9·ln V).
pub fn collapse_detector(
    distribution: &Tensor,
    answer_token: usize,
    sample: &ConflictSample,
    vocab: &TaskVocab,
) -> bool {
    if !vocab.answer_tokens(sample.attr_index).contains(&answer_token) {
        return true;
    }
    let entropy: f64 = distribution
        .data()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let tau = 0.9 * (distribution.len() as f64).ln();
    entropy > tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Visual,
    Text,
    Other,
    Collapse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub alpha: f64,
    pub visual_rate: f64,
    pub text_rate: f64,
    pub collapse_rate: f64,
    pub other_rate: f64,
    /// Fraction whose preferred modality changed vs. the α = 0 baseline.
    pub flip_rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub n_samples: usize,
}

fn classify(model: &ToyMllm, sample: &ConflictSample, hook: Option<&SteerHook>, vocab: &TaskVocab) -> Result<Outcome> {
    let out = model.prefill(&sample.input, hook)?;
    let dist = softmax(&out.logits)?;
    let tok = argmax(dist.data());
    if collapse_detector(&dist, tok, sample, vocab) {
        return Ok(Outcome::Collapse);
    }
    Ok(match preference_of(tok, sample) {
        Preference::Visual => Outcome::Visual,
        Preference::Text => Outcome::Text,
        Preference::Other => Outcome::Other,
    })
}

/// Greedy-decode every sample at every α, classify, and aggregate.
/// With `artifacts = None` (or α = 0) the run is the unsteered baseline.
pub fn evaluate_steering(
    model: &ToyMllm,
    artifacts: Option<&SteeringArtifacts>,
    samples: &[ConflictSample],
    alpha_grid: &[f64],
    vocab: &TaskVocab,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(AmpsError::InvalidArgument("empty evaluation set".into()));
    }
    for a in alpha_grid {
        if !a.is_finite() {
            return Err(AmpsError::InvalidArgument("alpha must be finite".into()));
        }
    }
    let baseline: Vec<Outcome> = samples
        .par_iter()
        .map(|s| classify(model, s, None, vocab))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let outcomes: Vec<Outcome> = if let Some(art) = artifacts {
            samples
                .par_iter()
                .map(|s| {
                    let hook = SteerHook {
                        mlp: &art.mlp,
                        alpha,
                        layer: art.layer,
                    };
                    classify(model, s, Some(&hook), vocab)
                })
                .collect::<Result<_>>()?
        } else {
            baseline.clone()
        };
        let n = samples.len();
        let count = |o: Outcome| outcomes.iter().filter(|x| **x == o).count() as f64 / n as f64;
        let flips = outcomes
            .iter()
            .zip(&baseline)
            .filter(|(now, base)| {
                matches!(base, Outcome::Visual | Outcome::Text)
                    && matches!(now, Outcome::Visual | Outcome::Text)
                    && now != base
            })
            .count() as f64
            / n as f64;
        rows.push(EvalRow {
            alpha,
            visual_rate: count(Outcome::Visual),
            text_rate: count(Outcome::Text),
            collapse_rate: count(Outcome::Collapse),
            other_rate: count(Outcome::Other),
            flip_rate: flips,
            n,
        });
    }
    Ok(EvalReport {
        rows,
        n_samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_pair() -> (DatasetConfig, ToyMllmConfig) {
        (DatasetConfig::default(), ToyMllmConfig::default())
    }

    #[test]
    fn conflict_samples_always_disagree() {
        let (dc, mc) = cfg_pair();
        let ds = generate_conflict_dataset(&dc, &mc).unwrap();
        assert_eq!(ds.conflict.len(), dc.n_conflict);
        for s in &ds.conflict {
            assert_ne!(s.visual_fact, s.text_fact);
            let range = dc.vocab.answer_tokens(s.attr_index);
            assert!(range.contains(&s.visual_fact));
            assert!(range.contains(&s.text_fact));
        }
    }

    #[test]
    fn dataset_is_seed_reproducible() {
        let (dc, mc) = cfg_pair();
        let a = generate_conflict_dataset(&dc, &mc).unwrap();
        let b = generate_conflict_dataset(&dc, &mc).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut dc2 = dc.clone();
        dc2.seed = 1;
        let c = generate_conflict_dataset(&dc2, &mc).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn answer_marginals_roughly_uniform() {
        let (mut dc, mc) = cfg_pair();
        dc.n_conflict = 10_000;
        let ds = generate_conflict_dataset(&dc, &mc).unwrap();
        // Marginal over the visual answer index within each attribute.
        let a = dc.vocab.answers_per_attribute;
        let mut counts = vec![0usize; a];
        for s in &ds.conflict {
            counts[s.visual_fact % a] += 1;
        }
        let n = ds.conflict.len() as f64;
        let p = 1.0 / a as f64;
        let sigma = (p * (1.0 - p) * n).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n * p).abs() <= 3.0 * sigma,
                "count {c} vs expected {}",
                n * p
            );
        }
    }

    #[test]
    fn invalid_vocab_rejected() {
        let (mut dc, mc) = cfg_pair();
        dc.vocab.answers_per_attribute = 1;
        assert!(generate_conflict_dataset(&dc, &mc).is_err());
    }

    #[test]
    fn preference_classification() {
        let (dc, mc) = cfg_pair();
        let ds = generate_conflict_dataset(&dc, &mc).unwrap();
        let s = &ds.conflict[0];
        assert_eq!(preference_of(s.visual_fact, s), Preference::Visual);
        assert_eq!(preference_of(s.text_fact, s), Preference::Text);
        assert_eq!(preference_of(63, s), Preference::Other);
    }

    #[test]
    fn collapse_on_uniform_and_invalid_token() {
        let (dc, mc) = cfg_pair();
        let ds = generate_conflict_dataset(&dc, &mc).unwrap();
        let s = &ds.conflict[0];
        let v = mc.vocab_size_text;
        let uniform = Tensor::new(vec![v], vec![1.0 / v as f64; v]);
        // Exactly uniform: entropy = ln V > 0.9 ln V.
        assert!(collapse_detector(&uniform, s.visual_fact, s, &dc.vocab));
        // Peaked on a valid answer: no collapse.
        let mut peaked = vec![1e-6; v];
        peaked[s.visual_fact] = 1.0 - 1e-6 * (v - 1) as f64;
        let peaked = Tensor::new(vec![v], peaked);
        assert!(!collapse_detector(&peaked, s.visual_fact, s, &dc.vocab));
        // Peaked on a non-answer token: collapse.
        assert!(collapse_detector(&peaked, mc.vocab_size_text - 1, s, &dc.vocab));
    }

    #[test]
    fn eval_unsteered_rates_partition() {
        let (mut dc, mc) = cfg_pair();
        dc.n_conflict = 12;
        let ds = generate_conflict_dataset(&dc, &mc).unwrap();
        let model = ToyMllm::new(mc).unwrap();
        let report = evaluate_steering(&model, None, &ds.conflict, &[0.0, 1.0], &dc.vocab).unwrap();
        for row in &report.rows {
            let sum = row.visual_rate + row.text_rate + row.collapse_rate + row.other_rate;
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Without artifacts every row equals the baseline.
        assert_eq!(report.rows[0].visual_rate, report.rows[1].visual_rate);
        assert_eq!(report.rows[0].flip_rate, 0.0);
    }
}
