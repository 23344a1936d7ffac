//! Concept-mediated Integrated Gradients.
//!
//! Attributions answer "which tokens moved the pooled positive probability
//! mass, *through this concept's hidden site*?". The path integral runs in
//! embedding space from an all-PAD baseline to the input, a midpoint
//! Riemann sum approximates it, and the backward pass is masked at the
//! intervention layer so only gradient flowing through the chosen site
//! slice reaches the embeddings. Masking the whole layer recovers plain
//! Integrated Gradients; the site rows plus the unassigned residual slice
//! partition it exactly (the backward pass is linear in the masked
//! gradient).

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMask, Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::model::{argmax, site_for, EncoderModel};
use crate::scm::{Example, PAD_TOKEN};

/// Pooled target classes: the two most positive of the five.
pub const DEFAULT_TARGET_CLASSES: [usize; 2] = [3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgConfig {
    /// Midpoint-rule quadrature steps along the interpolation path.
    pub steps: usize,
    /// Class indices whose probabilities are pooled into the attributed
    /// output.
    pub target_classes: Vec<usize>,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { steps: 50, target_classes: DEFAULT_TARGET_CLASSES.to_vec() }
    }
}

impl IgConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("quadrature needs at least one step".into()));
        }
        if self.target_classes.is_empty() {
            return Err(CoreError::Config("at least one target class is required".into()));
        }
        let mut seen = vec![false; classes];
        for &c in &self.target_classes {
            if c >= classes {
                return Err(CoreError::Config(format!(
                    "target class {c} outside 0..{classes}"
                )));
            }
            if seen[c] {
                return Err(CoreError::Config(format!("target class {c} listed twice")));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

/// Per-token attributions for one gradient route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    /// Concept whose site the gradient was restricted to; `None` for the
    /// whole-layer and residual-slice routes.
    pub concept: Option<usize>,
    /// Pooled target-class probability mass at the input itself.
    pub target_score: f64,
    /// Summed unnormalized attribution across all tokens ("Score").
    pub score: f64,
    /// Unnormalized per-token attributions; these satisfy the completeness
    /// and site-partition identities.
    pub raw_token_scores: Vec<f64>,
    /// z-scored across tokens, then rescaled so the largest magnitude is 1.
    /// All zeros when the raw scores have zero variance.
    pub token_scores: Vec<f64>,
}

/// All concept rows for one input, with the model's prediction recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub example_id: String,
    pub predicted_class: usize,
    pub rows: Vec<AttributionRow>,
}

impl AttributionTable {
    /// Plain-text rendering: one line per concept, tokens tagged with their
    /// normalized scores.
    pub fn to_text(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "example {}  predicted class {}", self.example_id, self.predicted_class);
        for row in &self.rows {
            let concept = row.concept.map_or_else(|| "-".into(), |c| c.to_string());
            let _ = write!(out, "concept {concept}  score {:+.4}  |", row.score);
            for (tok, score) in tokens.iter().zip(&row.token_scores) {
                let _ = write!(out, " t{tok}:{score:+.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// z-score across positions, then rescale so max |score| = 1. Zero variance
/// maps to all zeros. Idempotent on its own output.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    if raw.is_empty() {
        return Vec::new();
    }
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; raw.len()];
    }
    let std = var.sqrt();
    let z: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
    let peak = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    z.iter().map(|v| v / peak).collect()
}

/// Integrated gradients with the backward pass restricted to `keep` at the
/// intervention layer.
fn ig_over_range(
    proxy: &EncoderModel,
    tokens: &[usize],
    concept: Option<usize>,
    keep: Range<usize>,
    cfg: &IgConfig,
) -> Result<AttributionRow> {
    cfg.validate(proxy.cfg.classes)?;
    if tokens.is_empty() {
        return Err(CoreError::Usage("cannot attribute an empty token sequence".into()));
    }
    let dim = proxy.cfg.embed_dim;
    let vocab = proxy.cfg.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(CoreError::Usage(format!(
            "token id {bad} outside vocabulary of size {vocab}"
        )));
    }
    let row_of = |token: usize| &proxy.embedding.data()[token * dim..(token + 1) * dim];
    let input: Vec<f64> = tokens.iter().flat_map(|&t| row_of(t).iter().copied()).collect();
    let baseline: Vec<f64> =
        tokens.iter().flat_map(|_| row_of(PAD_TOKEN).iter().copied()).collect();
    let delta: Vec<f64> = input.iter().zip(&baseline).map(|(e, b)| e - b).collect();

    let mut target_weights = vec![0.0; proxy.cfg.classes];
    for &c in &cfg.target_classes {
        target_weights[c] = 1.0;
    }
    let target_score = {
        let probs = proxy.probs(tokens)?;
        cfg.target_classes.iter().map(|&c| probs[c]).sum()
    };

    let mask_layer = proxy.cfg.intervention_layer - 1;
    let mut grad_sum = vec![0.0; input.len()];
    for s in 0..cfg.steps {
        let alpha = (s as f64 + 0.5) / cfg.steps as f64;
        let point: Vec<f64> =
            baseline.iter().zip(&delta).map(|(b, d)| b + alpha * d).collect();
        let mut tape = Tape::new();
        let bound = proxy.bind(&mut tape);
        let embedded = tape.leaf(Tensor::matrix(tokens.len(), dim, point)?);
        let trace = bound.forward_embedded(&mut tape, embedded, None)?;
        let pooled = tape.weighted_sum(trace.probs, &target_weights)?;
        let mask = GradMask { node: trace.layers[mask_layer], keep: keep.clone() };
        let grads = tape.backward_masked(pooled, &[mask])?;
        for (acc, g) in grad_sum.iter_mut().zip(grads.wrt(embedded).data()) {
            *acc += g;
        }
    }

    let raw_token_scores: Vec<f64> = (0..tokens.len())
        .map(|i| {
            (i * dim..(i + 1) * dim)
                .map(|j| delta[j] * grad_sum[j] / cfg.steps as f64)
                .sum()
        })
        .collect();
    let score = raw_token_scores.iter().sum();
    let token_scores = normalize_scores(&raw_token_scores);
    Ok(AttributionRow { concept, target_score, score, raw_token_scores, token_scores })
}

/// Attribution restricted through one concept's intervention site.
pub fn mediated_ig(
    proxy: &EncoderModel,
    tokens: &[usize],
    concept: usize,
    cfg: &IgConfig,
) -> Result<AttributionRow> {
    let site = site_for(&proxy.cfg, concept)?;
    ig_over_range(proxy, tokens, Some(concept), site.range, cfg)
}

/// Unrestricted attribution (the whole intervention layer is kept).
pub fn full_ig(proxy: &EncoderModel, tokens: &[usize], cfg: &IgConfig) -> Result<AttributionRow> {
    ig_over_range(proxy, tokens, None, 0..proxy.cfg.hidden_width, cfg)
}

/// Attribution through the hidden units past the last concept site. Empty
/// when the sites tile the whole layer; the row is then all zeros.
pub fn residual_ig(
    proxy: &EncoderModel,
    tokens: &[usize],
    k: usize,
    cfg: &IgConfig,
) -> Result<AttributionRow> {
    proxy.cfg.validate_sites(k)?;
    ig_over_range(proxy, tokens, None, k * proxy.cfg.site_width..proxy.cfg.hidden_width, cfg)
}

/// One mediated row per concept, plus the model's predicted class.
pub fn attribution_table(
    proxy: &EncoderModel,
    example: &Example,
    k: usize,
    cfg: &IgConfig,
) -> Result<AttributionTable> {
    proxy.cfg.validate_sites(k)?;
    let predicted_class = argmax(&proxy.probs(&example.tokens)?);
    let rows = (0..k)
        .map(|concept| mediated_ig(proxy, &example.tokens, concept, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionTable { example_id: example.id.clone(), predicted_class, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::scm::{generate_dataset, ScmConfig, VocabLayout};
    use crate::train::{train_blackbox, TrainConfig};

    fn setup() -> (ScmConfig, EncoderModel, Vec<Example>) {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let enc = EncoderConfig {
            vocab_size: layout.vocab_size(),
            embed_dim: 12,
            hidden_width: 32,
            site_width: 8,
            probe_hidden: 8,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::init(enc, 0, 21).unwrap();
        let examples = generate_dataset(&scm, 12, 400).unwrap();
        (scm, model, examples)
    }

    #[test]
    fn baseline_input_attributes_to_zero() {
        let (_, model, examples) = setup();
        let cfg = IgConfig::default();
        let pads = vec![PAD_TOKEN; examples[0].tokens.len()];
        let row = full_ig(&model, &pads, &cfg).unwrap();
        assert!(row.raw_token_scores.iter().all(|&v| v == 0.0));
        assert!(row.token_scores.iter().all(|&v| v == 0.0));
        assert_eq!(row.score, 0.0);
    }

    /// A freshly initialized network is nearly flat (every class ≈ 0.2), so
    /// the output gap the integral must recover is ~1e-3 and the relative
    /// completeness bound is meaningless. Attribution targets trained
    /// models; a short training run gives decisive outputs.
    fn trained_model() -> (ScmConfig, EncoderModel, Vec<Example>) {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let enc = EncoderConfig {
            vocab_size: layout.vocab_size(),
            embed_dim: 12,
            hidden_width: 32,
            site_width: 8,
            probe_hidden: 8,
            ..EncoderConfig::default()
        };
        let train = generate_dataset(&scm, 300, 410).unwrap();
        let dev = generate_dataset(&scm, 60, 411).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            eval_interval_steps: 40,
            learning_rate: 3e-3,
            seed: 21,
            ..TrainConfig::default()
        };
        let outcome = train_blackbox(&enc, &train, &dev, &cfg).unwrap();
        let examples = generate_dataset(&scm, 12, 400).unwrap();
        (scm, outcome.model, examples)
    }

    #[test]
    fn completeness_holds_at_dense_quadrature() {
        let (_, model, examples) = trained_model();
        let cfg = IgConfig { steps: 200, ..IgConfig::default() };
        for ex in &examples[..5] {
            let row = full_ig(&model, &ex.tokens, &cfg).unwrap();
            let probs_x = model.probs(&ex.tokens).unwrap();
            let pads = vec![PAD_TOKEN; ex.tokens.len()];
            let probs_b = model.probs(&pads).unwrap();
            let f_x: f64 = cfg.target_classes.iter().map(|&c| probs_x[c]).sum();
            let f_b: f64 = cfg.target_classes.iter().map(|&c| probs_b[c]).sum();
            let gap = f_x - f_b;
            assert!(
                (row.score - gap).abs() <= 0.01 * gap.abs().max(1e-12),
                "example {}: attribution sum {} vs output gap {gap}",
                ex.id,
                row.score
            );
        }
    }

    #[test]
    fn site_rows_and_residual_partition_the_full_attribution() {
        let (scm, model, examples) = setup();
        let cfg = IgConfig { steps: 20, ..IgConfig::default() };
        for ex in &examples[..3] {
            let full = full_ig(&model, &ex.tokens, &cfg).unwrap();
            let mut summed = vec![0.0; ex.tokens.len()];
            for concept in 0..scm.k {
                let row = mediated_ig(&model, &ex.tokens, concept, &cfg).unwrap();
                for (acc, v) in summed.iter_mut().zip(&row.raw_token_scores) {
                    *acc += v;
                }
            }
            let residual = residual_ig(&model, &ex.tokens, scm.k, &cfg).unwrap();
            for (acc, v) in summed.iter_mut().zip(&residual.raw_token_scores) {
                *acc += v;
            }
            for (i, (got, want)) in summed.iter().zip(&full.raw_token_scores).enumerate() {
                assert!(
                    (got - want).abs() <= 1e-6,
                    "example {} token {i}: sites+residual {got} vs full {want}",
                    ex.id
                );
            }
        }
    }

    #[test]
    fn residual_row_is_zero_when_sites_tile_the_layer() {
        let (scm, model, examples) = setup();
        // 4 concepts × site width 8 = hidden width 32: nothing is left over.
        let cfg = IgConfig { steps: 5, ..IgConfig::default() };
        let row = residual_ig(&model, &examples[0].tokens, scm.k, &cfg).unwrap();
        assert!(row.raw_token_scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_equals_gradient_times_input_at_the_midpoint() {
        let (_, model, examples) = setup();
        let ex = &examples[0];
        let one = IgConfig { steps: 1, ..IgConfig::default() };
        let row = full_ig(&model, &ex.tokens, &one).unwrap();
        // Independent midpoint computation: α = 0.5 exactly.
        let dim = model.cfg.embed_dim;
        let row_of = |t: usize| &model.embedding.data()[t * dim..(t + 1) * dim];
        let mut point = Vec::new();
        let mut delta = Vec::new();
        for &t in &ex.tokens {
            for (e, b) in row_of(t).iter().zip(row_of(PAD_TOKEN)) {
                point.push(b + 0.5 * (e - b));
                delta.push(e - b);
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let embedded = tape.leaf(Tensor::matrix(ex.tokens.len(), dim, point).unwrap());
        let trace = bound.forward_embedded(&mut tape, embedded, None).unwrap();
        let mut weights = vec![0.0; model.cfg.classes];
        for &c in &one.target_classes {
            weights[c] = 1.0;
        }
        let pooled = tape.weighted_sum(trace.probs, &weights).unwrap();
        let grads = tape.backward(pooled).unwrap();
        let g = grads.wrt(embedded).data();
        for (i, want) in row.raw_token_scores.iter().enumerate() {
            let by_hand: f64 = (i * dim..(i + 1) * dim).map(|j| delta[j] * g[j]).sum();
            assert!((by_hand - want).abs() < 1e-12, "token {i}: {by_hand} vs {want}");
        }
    }

    #[test]
    fn quadrature_converges_as_steps_double() {
        let (_, model, examples) = trained_model();
        let ex = &examples[1];
        let at = |steps: usize| {
            full_ig(&model, &ex.tokens, &IgConfig { steps, ..IgConfig::default() })
                .unwrap()
                .score
        };
        let coarse = at(100);
        let fine = at(200);
        assert!(
            (coarse - fine).abs() <= 0.005 * fine.abs().max(1e-12),
            "sum moved from {coarse} to {fine} when doubling steps"
        );
    }

    #[test]
    fn normalization_bounds_and_idempotence() {
        let raw = vec![0.4, -1.3, 2.2, 0.0, 0.7];
        let normalized = normalize_scores(&raw);
        let peak = normalized.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(normalized.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let twice = normalize_scores(&normalized);
        for (a, b) in normalized.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Constant rows have zero variance and map to zeros.
        assert!(normalize_scores(&[0.3; 4]).iter().all(|&v| v == 0.0));
        assert!(normalize_scores(&[]).is_empty());
    }

    #[test]
    fn table_rows_match_individually_computed_rows() {
        let (scm, model, examples) = setup();
        let cfg = IgConfig { steps: 10, ..IgConfig::default() };
        let ex = &examples[2];
        let table = attribution_table(&model, ex, scm.k, &cfg).unwrap();
        assert_eq!(table.rows.len(), scm.k);
        assert_eq!(table.example_id, ex.id);
        assert_eq!(table.predicted_class, argmax(&model.probs(&ex.tokens).unwrap()));
        for (concept, row) in table.rows.iter().enumerate() {
            let alone = mediated_ig(&model, &ex.tokens, concept, &cfg).unwrap();
            assert_eq!(row, &alone, "row {concept} depends on computation order");
            assert_eq!(row.concept, Some(concept));
            assert_eq!(row.token_scores.len(), ex.tokens.len());
            let peak = row.token_scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                peak == 0.0 || (peak - 1.0).abs() < 1e-12,
                "row {concept}: normalization peak {peak}"
            );
        }
        let text = table.to_text(&ex.tokens);
        assert!(text.lines().count() == scm.k + 1);
        assert!(text.contains("predicted class"));
    }

    #[test]
    fn invalid_configs_and_inputs_are_rejected() {
        let (_, model, examples) = setup();
        let tokens = &examples[0].tokens;
        let zero_steps = IgConfig { steps: 0, ..IgConfig::default() };
        assert!(matches!(full_ig(&model, tokens, &zero_steps), Err(CoreError::Config(_))));
        let bad_class = IgConfig { target_classes: vec![9], ..IgConfig::default() };
        assert!(matches!(full_ig(&model, tokens, &bad_class), Err(CoreError::Config(_))));
        let dup = IgConfig { target_classes: vec![3, 3], ..IgConfig::default() };
        assert!(matches!(full_ig(&model, tokens, &dup), Err(CoreError::Config(_))));
        let none = IgConfig { target_classes: vec![], ..IgConfig::default() };
        assert!(matches!(full_ig(&model, tokens, &none), Err(CoreError::Config(_))));
        assert!(matches!(
            full_ig(&model, &[], &IgConfig::default()),
            Err(CoreError::Usage(_))
        ));
        // Concept 4 has no site in a 32-wide layer with 8-wide sites.
        assert!(matches!(
            mediated_ig(&model, tokens, 4, &IgConfig::default()),
            Err(CoreError::Usage(_))
        ));
    }
}
