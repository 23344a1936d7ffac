//! Benchmark machinery: ground-truth effects, error metrics, task
//! performance, self-explanation, and the concept-association analysis used
//! to measure debiasing.
//!
//! The benchmark question is: over a set of (base, counterfactual) pairs,
//! how far is an estimator's predicted effect from the black box's actual
//! effect `ICaCE = ℕ(counterfactual) − ℕ(base)`? Distances come in three
//! flavors (L2, cosine distance, norm difference), and every report carries
//! explicit skip accounting — an estimator that cannot answer a pair is
//! tallied, never silently dropped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::explain::{CpmHiEstimator, EffectVector, Explainer, SourceStrategy};
use crate::model::{argmax, EncoderModel, NUM_CLASSES};
use crate::scm::{CounterfactualPair, Example};

// ───────────────────────────── distances ─────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistMetric {
    L2,
    Cosine,
    NormDiff,
}

impl DistMetric {
    pub const ALL: [DistMetric; 3] = [DistMetric::L2, DistMetric::Cosine, DistMetric::NormDiff];
}

impl std::fmt::Display for DistMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DistMetric::L2 => "l2",
            DistMetric::Cosine => "cosine",
            DistMetric::NormDiff => "normdiff",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DistMetric {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(DistMetric::L2),
            "cosine" => Ok(DistMetric::Cosine),
            "normdiff" => Ok(DistMetric::NormDiff),
            other => Err(CoreError::Config(format!(
                "unknown metric '{other}' (expected l2, cosine, or normdiff)"
            ))),
        }
    }
}

/// Distance between two effect vectors.
///
/// Cosine uses a zero-vector convention: below norm 1e-12 a vector has no
/// direction, so two near-zero vectors are at distance 0 and a near-zero
/// vector against a real effect is at distance 1. The result is clamped to
/// [0, 2] to absorb float rounding at the parallel/antiparallel extremes.
pub fn dist(metric: DistMetric, a: &EffectVector, b: &EffectVector) -> f64 {
    match metric {
        DistMetric::L2 => a
            .delta
            .iter()
            .zip(&b.delta)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistMetric::Cosine => {
            const EPS: f64 = 1e-12;
            let na = a.norm();
            let nb = b.norm();
            match (na < EPS, nb < EPS) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                (false, false) => {
                    let dot: f64 = a.delta.iter().zip(&b.delta).map(|(x, y)| x * y).sum();
                    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
                }
            }
        }
        DistMetric::NormDiff => (a.norm() - b.norm()).abs(),
    }
}

// ───────────────────────────── ground truth ─────────────────────────────

/// The black box's actual effect for a pair:
/// ℕ(counterfactual) − ℕ(base) on probabilities.
pub fn icace(blackbox: &EncoderModel, pair: &CounterfactualPair) -> Result<EffectVector> {
    let after = blackbox.probs(&pair.counterfactual.tokens)?;
    let before = blackbox.probs(&pair.base.tokens)?;
    EffectVector::between(&after, &before)
}

/// Ground-truth effects for a whole pair set, in pair order.
pub fn icace_targets(
    blackbox: &EncoderModel,
    pairs: &[CounterfactualPair],
) -> Result<Vec<EffectVector>> {
    pairs.iter().map(|p| icace(blackbox, p)).collect()
}

// ───────────────────────────── error aggregation ─────────────────────────────

/// Mean estimator-vs-ground-truth distance with skip accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

impl ErrorStats {
    pub fn total(&self) -> usize {
        self.n_evaluated + self.n_skipped
    }
}

/// Mean distance between precomputed ground-truth effects and the
/// estimator's answers. A `NotFound` from the estimator skips the pair (and
/// is tallied); any other error aborts. Errors if no pair can be evaluated.
pub fn icace_error_against(
    explainer: &dyn Explainer,
    targets: &[EffectVector],
    pairs: &[CounterfactualPair],
    metric: DistMetric,
) -> Result<ErrorStats> {
    if pairs.is_empty() {
        return Err(CoreError::Usage("cannot evaluate on zero pairs".into()));
    }
    if targets.len() != pairs.len() {
        return Err(CoreError::Shape(format!(
            "{} ground-truth effects for {} pairs",
            targets.len(),
            pairs.len()
        )));
    }
    let mut sum = 0.0;
    let mut n_evaluated = 0;
    let mut n_skipped = 0;
    for (target, pair) in targets.iter().zip(pairs) {
        match explainer.estimate(&pair.base, &pair.edit) {
            Ok(estimate) => {
                sum += dist(metric, target, &estimate);
                n_evaluated += 1;
            }
            Err(CoreError::NotFound(_)) => n_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if n_evaluated == 0 {
        return Err(CoreError::NotFound(format!(
            "estimator '{}' answered none of the {} pairs",
            explainer.name(),
            pairs.len()
        )));
    }
    Ok(ErrorStats { mean: sum / n_evaluated as f64, n_evaluated, n_skipped })
}

/// [`icace_error_against`] with ground truth computed from the black box.
pub fn icace_error(
    explainer: &dyn Explainer,
    blackbox: &EncoderModel,
    pairs: &[CounterfactualPair],
    metric: DistMetric,
) -> Result<ErrorStats> {
    let targets = icace_targets(blackbox, pairs)?;
    icace_error_against(explainer, &targets, pairs, metric)
}

/// Self-explanation score of an interchange proxy: the proxy replaces the
/// black box on *both* sides — ground truth is 𝒫(cf) − 𝒫(base), and the
/// estimate subtracts 𝒫(base) as its factual term.
pub fn self_explain_report(
    proxy: &EncoderModel,
    pool: &[Example],
    pairs: &[CounterfactualPair],
    metric: DistMetric,
    strategy: SourceStrategy,
    k: usize,
    seed: u64,
) -> Result<ErrorStats> {
    let estimator = CpmHiEstimator::new(proxy, proxy, pool, strategy, k, seed)?;
    icace_error(&estimator, proxy, pairs, metric)
}

// ───────────────────────────── task performance ─────────────────────────────

/// Unweighted mean of per-class F1 over all 5 classes; a class with no true
/// or predicted instances contributes F1 = 0.
pub fn macro_f1_from_predictions(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != gold.len() {
        return Err(CoreError::Usage(format!(
            "need equal nonzero prediction/gold counts, got {} and {}",
            predicted.len(),
            gold.len()
        )));
    }
    if let Some(&bad) = predicted.iter().chain(gold).find(|&&c| c >= NUM_CLASSES) {
        return Err(CoreError::Usage(format!("class {bad} outside 0..{NUM_CLASSES}")));
    }
    let mut tp = [0usize; NUM_CLASSES];
    let mut fp = [0usize; NUM_CLASSES];
    let mut fn_ = [0usize; NUM_CLASSES];
    for (&p, &g) in predicted.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..NUM_CLASSES {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(sum / NUM_CLASSES as f64)
}

/// Macro-F1 of a classifier over labeled examples.
pub fn macro_f1(model: &EncoderModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Usage("cannot score an empty dataset".into()));
    }
    let mut predicted = Vec::with_capacity(examples.len());
    let mut gold = Vec::with_capacity(examples.len());
    for ex in examples {
        predicted.push(argmax(&model.probs(&ex.tokens)?));
        gold.push(ex.label);
    }
    macro_f1_from_predictions(&predicted, &gold)
}

// ───────────────────────────── concept association ─────────────────────────────

/// Cramér's V over an r×c contingency table of counts: association strength
/// in [0, 1]. Degenerate tables (all mass in one row or one column) score 0.
pub fn cramers_v(table: &[Vec<usize>]) -> f64 {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let n: usize = table.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> =
        (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let live_rows = row_sums.iter().filter(|&&s| s > 0).count();
    let live_cols = col_sums.iter().filter(|&&s| s > 0).count();
    let dof = live_rows.min(live_cols).saturating_sub(1);
    if dof == 0 {
        return 0.0;
    }
    let mut chi2 = 0.0;
    for (r, row) in table.iter().enumerate() {
        if row_sums[r] == 0 {
            continue;
        }
        for (c, &observed) in row.iter().enumerate() {
            if col_sums[c] == 0 {
                continue;
            }
            let expected = row_sums[r] as f64 * col_sums[c] as f64 / n as f64;
            let d = observed as f64 - expected;
            chi2 += d * d / expected;
        }
    }
    (chi2 / (n as f64 * dof as f64)).sqrt()
}

/// Association between predicted classes and one concept's gold values:
/// Cramér's V over the 5×3 table of (predicted class, concept value).
pub fn concept_association(
    predicted: &[usize],
    examples: &[Example],
    concept: usize,
) -> Result<f64> {
    if predicted.len() != examples.len() || predicted.is_empty() {
        return Err(CoreError::Usage(format!(
            "need equal nonzero prediction/example counts, got {} and {}",
            predicted.len(),
            examples.len()
        )));
    }
    let mut table = vec![vec![0usize; 3]; NUM_CLASSES];
    for (&p, ex) in predicted.iter().zip(examples) {
        if p >= NUM_CLASSES {
            return Err(CoreError::Usage(format!("class {p} outside 0..{NUM_CLASSES}")));
        }
        let value = ex.concepts.get(concept).ok_or_else(|| {
            CoreError::Usage(format!(
                "example {} has no concept {concept} (only {})",
                ex.id,
                ex.concepts.len()
            ))
        })?;
        table[p][value.class_index()] += 1;
    }
    Ok(cramers_v(&table))
}

// ───────────────────────────── benchmark reports ─────────────────────────────

/// One benchmark row: an estimator's mean error under one metric,
/// aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub explainer: String,
    pub metric: DistMetric,
    /// Mean over seeds of the per-seed mean error.
    pub mean: f64,
    /// Population standard deviation over the per-seed means.
    pub std: f64,
    pub n_pairs: usize,
    pub n_skipped: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Aggregates per-seed results for one (explainer, metric) cell.
    /// `per_seed` carries (seed, stats); all must cover the same pair set.
    pub fn push_cell(
        &mut self,
        explainer: impl Into<String>,
        metric: DistMetric,
        per_seed: &[(u64, ErrorStats)],
    ) -> Result<()> {
        if per_seed.is_empty() {
            return Err(CoreError::Usage("a benchmark cell needs at least one seed".into()));
        }
        let means: Vec<f64> = per_seed.iter().map(|(_, s)| s.mean).collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let var =
            means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / means.len() as f64;
        let first = &per_seed[0].1;
        self.rows.push(BenchRow {
            explainer: explainer.into(),
            metric,
            mean,
            std: var.sqrt(),
            n_pairs: first.total(),
            n_skipped: first.n_skipped,
            seeds: per_seed.iter().map(|(s, _)| *s).collect(),
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(format!("report serialization failed: {e}")))
    }

    /// Aligned-column text table for human reading.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.explainer.len())
            .chain(std::iter::once("explainer".len()))
            .max()
            .unwrap_or(9);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<8}  {:>10}  {:>10}  {:>7}  {:>7}",
            "explainer", "metric", "mean", "std", "pairs", "skipped"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<8}  {:>10.6}  {:>10.6}  {:>7}  {:>7}",
                r.explainer,
                r.metric.to_string(),
                r.mean,
                r.std,
                r.n_pairs,
                r.n_skipped
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::rng::StreamRng;
    use crate::scm::{
        build_true_pairs, generate_dataset, InterventionDescriptor, PairKind, ScmConfig,
        VocabLayout,
    };

    fn vec5(v: [f64; 5]) -> EffectVector {
        EffectVector { delta: v }
    }

    #[test]
    fn hand_checked_distances() {
        let a = vec5([1.0, 0.0, 0.0, 0.0, -1.0]);
        let b = vec5([0.0, 1.0, 0.0, 0.0, -1.0]);
        assert!((dist(DistMetric::L2, &a, &b) - 2f64.sqrt()).abs() < 1e-15);
        let anti = vec5([-1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((dist(DistMetric::Cosine, &a, &anti) - 2.0).abs() < 1e-12);
        assert_eq!(dist(DistMetric::NormDiff, &a, &anti), 0.0);
    }

    #[test]
    fn identical_vectors_are_at_distance_zero() {
        let a = vec5([0.3, -0.1, 0.05, -0.2, -0.05]);
        assert_eq!(dist(DistMetric::L2, &a, &a), 0.0);
        assert!(dist(DistMetric::Cosine, &a, &a) < 1e-12);
        assert_eq!(dist(DistMetric::NormDiff, &a, &a), 0.0);
    }

    #[test]
    fn cosine_zero_vector_convention() {
        let zero = EffectVector::zero();
        let real = vec5([0.5, 0.0, 0.0, 0.0, -0.5]);
        assert_eq!(dist(DistMetric::Cosine, &zero, &zero), 0.0);
        assert_eq!(dist(DistMetric::Cosine, &zero, &real), 1.0);
        assert_eq!(dist(DistMetric::Cosine, &real, &zero), 1.0);
    }

    #[test]
    fn metric_axioms_hold_over_random_vectors() {
        let mut rng = StreamRng::new(99, 1);
        let mut random_vec = || {
            let mut d = [0.0; 5];
            for v in d.iter_mut().take(4) {
                *v = rng.unit() * 0.4 - 0.2;
            }
            d[4] = -d.iter().take(4).sum::<f64>();
            EffectVector { delta: d }
        };
        for _ in 0..2000 {
            let a = random_vec();
            let b = random_vec();
            for metric in DistMetric::ALL {
                let d_ab = dist(metric, &a, &b);
                let d_ba = dist(metric, &b, &a);
                assert!(d_ab >= 0.0);
                assert!((d_ab - d_ba).abs() < 1e-12, "symmetry under {metric}");
                assert!(dist(metric, &a, &a) < 1e-12, "identity under {metric}");
            }
            assert!(dist(DistMetric::Cosine, &a, &b) <= 2.0);
        }
    }

    fn bench_setup() -> (ScmConfig, EncoderModel, Vec<Example>, Vec<CounterfactualPair>) {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let cfg = EncoderConfig { vocab_size: layout.vocab_size(), ..EncoderConfig::default() };
        let model = EncoderModel::init(cfg, scm.k, 23).unwrap();
        let data = generate_dataset(&scm, 40, 3).unwrap();
        let pairs = build_true_pairs(&data[..10], &scm).unwrap();
        (scm, model, data, pairs)
    }

    #[test]
    fn null_pairs_have_exactly_zero_icace() {
        let (_, model, data, _) = bench_setup();
        let pair = CounterfactualPair {
            base: data[0].clone(),
            counterfactual: data[0].clone(),
            edit: InterventionDescriptor { concept: 0, target: data[0].concepts[0] },
            kind: PairKind::Null,
        };
        assert_eq!(icace(&model, &pair).unwrap(), EffectVector::zero());
    }

    #[test]
    fn icace_is_antisymmetric_under_pair_reversal() {
        let (_, model, _, pairs) = bench_setup();
        for pair in pairs.iter().take(30) {
            let reversed = CounterfactualPair {
                base: pair.counterfactual.clone(),
                counterfactual: pair.base.clone(),
                edit: InterventionDescriptor {
                    concept: pair.edit.concept,
                    target: pair.base.concepts[pair.edit.concept],
                },
                kind: pair.kind,
            };
            assert_eq!(icace(&model, pair).unwrap(), -icace(&model, &reversed).unwrap());
        }
    }

    #[test]
    fn icace_matches_a_two_pass_oracle_bitwise() {
        let (_, model, _, pairs) = bench_setup();
        for pair in pairs.iter().take(10) {
            let effect = icace(&model, pair).unwrap();
            let after = model.probs(&pair.counterfactual.tokens).unwrap();
            let before = model.probs(&pair.base.tokens).unwrap();
            for c in 0..5 {
                assert_eq!(effect.delta[c], after[c] - before[c]);
            }
        }
    }

    /// An estimator that answers with the true ICaCE (perfect oracle).
    struct OracleExplainer<'a> {
        model: &'a EncoderModel,
        scm: &'a ScmConfig,
    }

    impl Explainer for OracleExplainer<'_> {
        fn name(&self) -> String {
            "oracle".into()
        }

        fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
            let cf = crate::scm::true_counterfactual(x, edit, self.scm)?;
            let after = self.model.probs(&cf.tokens)?;
            let before = self.model.probs(&x.tokens)?;
            EffectVector::between(&after, &before)
        }
    }

    #[test]
    fn oracle_explainer_scores_zero_under_every_metric() {
        let (scm, model, _, pairs) = bench_setup();
        let oracle = OracleExplainer { model: &model, scm: &scm };
        for metric in DistMetric::ALL {
            let stats = icace_error(&oracle, &model, &pairs, metric).unwrap();
            assert!(stats.mean < 1e-12, "{metric}: {}", stats.mean);
            assert_eq!(stats.n_skipped, 0);
            assert_eq!(stats.n_evaluated, pairs.len());
        }
    }

    /// An estimator that always declines.
    struct NeverExplainer;

    impl Explainer for NeverExplainer {
        fn name(&self) -> String {
            "never".into()
        }

        fn estimate(&self, _: &Example, _: &InterventionDescriptor) -> Result<EffectVector> {
            Err(CoreError::NotFound("declines everything".into()))
        }
    }

    #[test]
    fn skip_accounting_is_exhaustive() {
        let (scm, model, _, pairs) = bench_setup();
        struct Flaky<'a>(OracleExplainer<'a>);
        impl Explainer for Flaky<'_> {
            fn name(&self) -> String {
                "flaky".into()
            }
            fn estimate(&self, x: &Example, e: &InterventionDescriptor) -> Result<EffectVector> {
                if x.id.ends_with('1') {
                    return Err(CoreError::NotFound("odd one out".into()));
                }
                self.0.estimate(x, e)
            }
        }
        let flaky = Flaky(OracleExplainer { model: &model, scm: &scm });
        let stats = icace_error(&flaky, &model, &pairs, DistMetric::L2).unwrap();
        assert!(stats.n_skipped > 0);
        assert_eq!(stats.total(), pairs.len());

        let err = icace_error(&NeverExplainer, &model, &pairs, DistMetric::L2);
        assert!(matches!(err, Err(CoreError::NotFound(_))));
    }

    #[test]
    fn error_mean_matches_a_brute_force_recomputation() {
        let (scm, model, data, pairs) = bench_setup();
        let subset = &pairs[..50.min(pairs.len())];
        let est = CpmHiEstimator::new(
            &model,
            &model,
            &data,
            SourceStrategy::GoldLabel,
            scm.k,
            7,
        )
        .unwrap();
        let stats = icace_error(&est, &model, subset, DistMetric::L2).unwrap();
        let mut sum = 0.0;
        for pair in subset {
            let target = icace(&model, pair).unwrap();
            let got = est.estimate(&pair.base, &pair.edit).unwrap();
            sum += dist(DistMetric::L2, &target, &got);
        }
        assert!((stats.mean - sum / subset.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gold = vec![0, 1, 2, 3, 4, 2, 3, 1];
        assert_eq!(macro_f1_from_predictions(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let gold: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let predicted = vec![2usize; 100];
        let got = macro_f1_from_predictions(&predicted, &gold).unwrap();
        // One class at F1 = 2·0.2/1.2 = 1/3, four at 0 → macro 1/15.
        assert!((got - 1.0 / 15.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn macro_f1_is_order_invariant() {
        let mut rng = StreamRng::new(5, 0);
        let gold: Vec<usize> = (0..200).map(|_| rng.index(5)).collect();
        let predicted: Vec<usize> = (0..200).map(|_| rng.index(5)).collect();
        let a = macro_f1_from_predictions(&predicted, &gold).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        rng.shuffle(&mut order);
        let gold2: Vec<usize> = order.iter().map(|&i| gold[i]).collect();
        let predicted2: Vec<usize> = order.iter().map(|&i| predicted[i]).collect();
        assert_eq!(a, macro_f1_from_predictions(&predicted2, &gold2).unwrap());
        assert!(matches!(macro_f1_from_predictions(&[], &[]), Err(CoreError::Usage(_))));
    }

    #[test]
    fn macro_f1_against_brute_force_confusion_matrix() {
        let mut rng = StreamRng::new(6, 0);
        let gold: Vec<usize> = (0..300).map(|_| rng.index(5)).collect();
        let predicted: Vec<usize> =
            gold.iter().map(|&g| if rng.coin(0.3) { rng.index(5) } else { g }).collect();
        let got = macro_f1_from_predictions(&predicted, &gold).unwrap();
        // Independent recomputation from the full confusion matrix.
        let mut confusion = [[0usize; 5]; 5];
        for (&p, &g) in predicted.iter().zip(&gold) {
            confusion[g][p] += 1;
        }
        let mut sum = 0.0;
        for (c, row) in confusion.iter().enumerate() {
            let tp = row[c] as f64;
            let pred_c: f64 = confusion.iter().map(|r| r[c] as f64).sum();
            let gold_c: f64 = row.iter().map(|&x| x as f64).sum();
            if pred_c > 0.0 && gold_c > 0.0 && tp > 0.0 {
                let precision = tp / pred_c;
                let recall = tp / gold_c;
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        assert!((got - sum / 5.0).abs() < 1e-12);
    }

    #[test]
    fn self_explanation_with_proxy_as_blackbox_equals_plain_error() {
        let (scm, model, data, pairs) = bench_setup();
        let subset = &pairs[..40];
        let stats = self_explain_report(
            &model,
            &data,
            subset,
            DistMetric::Cosine,
            SourceStrategy::GoldLabel,
            scm.k,
            7,
        )
        .unwrap();
        let est =
            CpmHiEstimator::new(&model, &model, &data, SourceStrategy::GoldLabel, scm.k, 7)
                .unwrap();
        let direct = icace_error(&est, &model, subset, DistMetric::Cosine).unwrap();
        assert_eq!(stats, direct);
    }

    #[test]
    fn deterministic_predictions_have_association_one() {
        let (_, _, data, _) = bench_setup();
        let predicted: Vec<usize> =
            data.iter().map(|ex| ex.concepts[0].class_index()).collect();
        let v = concept_association(&predicted, &data, 0).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn independent_predictions_have_near_zero_association() {
        let scm = ScmConfig::default();
        let data = generate_dataset(&scm, 2000, 77).unwrap();
        let mut rng = StreamRng::new(123, 0);
        let predicted: Vec<usize> = (0..data.len()).map(|_| rng.index(5)).collect();
        let v = concept_association(&predicted, &data, 1).unwrap();
        assert!(v < 0.05, "independent predictions scored V = {v}");
    }

    #[test]
    fn degenerate_tables_score_zero() {
        // Single predicted class: no association measurable.
        assert_eq!(cramers_v(&[vec![5, 3, 2], vec![0, 0, 0]]), 0.0);
        // Single concept value present.
        assert_eq!(cramers_v(&[vec![5, 0, 0], vec![3, 0, 0]]), 0.0);
        assert_eq!(cramers_v(&[]), 0.0);
    }

    #[test]
    fn report_aggregates_means_and_stds_over_seeds() {
        let mut report = BenchReport::default();
        let stats = |mean| ErrorStats { mean, n_evaluated: 90, n_skipped: 10 };
        report
            .push_cell("demo", DistMetric::L2, &[(0, stats(0.2)), (1, stats(0.4)), (2, stats(0.6))])
            .unwrap();
        let row = &report.rows[0];
        assert!((row.mean - 0.4).abs() < 1e-15);
        // Population std of {0.2, 0.4, 0.6} = sqrt(0.08 / 3).
        assert!((row.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(row.n_pairs, 100);
        assert_eq!(row.n_skipped, 10);
        let text = report.to_text();
        assert!(text.contains("demo"));
        let json = report.to_json().unwrap();
        let parsed: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
    }
}
