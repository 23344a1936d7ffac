//! Estimators of counterfactual classifier behavior.
//!
//! Every estimator answers the same question — *how would the black box ℕ's
//! output distribution change if concept `i` of input `x` were set to
//! `target`?* — behind the [`Explainer`] trait, returning an [`EffectVector`]
//! (the difference of two probability vectors).
//!
//! Estimators:
//! * [`CpmInEstimator`] — a proxy trained with intervention tokens;
//!   estimate = 𝒫(x ⧺ token(edit)) − ℕ(x).
//! * [`CpmHiEstimator`] — a proxy trained with interchange interventions;
//!   estimate = 𝒫 with the edit concept's hidden site overwritten by a
//!   source input's site activation, minus ℕ(x).
//! * [`SLearner`] — logistic regression from predicted concept values to
//!   ℕ's outputs; estimate = LR(concepts with edit forced) − LR(concepts).
//! * [`ApproxEstimator`] / [`RandomEstimator`] — ℕ on a pool example that
//!   matches the counterfactual concept profile / on a random pool example,
//!   minus ℕ(x).
//! * [`GroupEstimator`] — input-independent per-edit group means
//!   (over ℕ's probabilities or over gold labels).
//!
//! Randomized choices (source picks, pool samples) are keyed by
//! `(evaluation seed, input id, edit)`, so estimates are reproducible and
//! independent of evaluation order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_values;
use crate::error::{CoreError, Result};
use crate::model::{
    append_intervention_token, argmax, site_for, ConceptModel, EncoderModel, CONCEPT_CLASSES,
    NUM_CLASSES,
};
use crate::rng::{bounded, mix};
use crate::scm::{ConceptValue, CounterfactualPair, Example, InterventionDescriptor, VocabLayout};

// ───────────────────────────── effect vectors ─────────────────────────────

/// A per-class change in output probability: the difference of two
/// probability vectors. Components sum to 0 (± float error) and lie in
/// [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EffectVector {
    pub delta: [f64; NUM_CLASSES],
}

impl EffectVector {
    pub fn zero() -> Self {
        Self { delta: [0.0; NUM_CLASSES] }
    }

    /// `after − before`, both length-5 probability vectors.
    pub fn between(after: &[f64], before: &[f64]) -> Result<Self> {
        if after.len() != NUM_CLASSES || before.len() != NUM_CLASSES {
            return Err(CoreError::Shape(format!(
                "effect vectors need length-{NUM_CLASSES} probability vectors, got {} and {}",
                after.len(),
                before.len()
            )));
        }
        let mut delta = [0.0; NUM_CLASSES];
        for (d, (a, b)) in delta.iter_mut().zip(after.iter().zip(before)) {
            *d = a - b;
        }
        Ok(Self { delta })
    }

    /// Checks the simplex-difference invariants (zero-sum within 1e-9,
    /// components within [−1, 1]).
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.delta.iter().sum();
        if sum.abs() > 1e-9 {
            return Err(CoreError::Shape(format!("effect components sum to {sum}, not 0")));
        }
        if self.delta.iter().any(|d| !d.is_finite() || d.abs() > 1.0 + 1e-12) {
            return Err(CoreError::Shape(format!("effect component outside [-1, 1]: {self:?}")));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

impl std::ops::Sub for EffectVector {
    type Output = EffectVector;
    fn sub(self, rhs: EffectVector) -> EffectVector {
        let mut delta = self.delta;
        for (d, r) in delta.iter_mut().zip(rhs.delta) {
            *d -= r;
        }
        EffectVector { delta }
    }
}

impl std::ops::Neg for EffectVector {
    type Output = EffectVector;
    fn neg(self) -> EffectVector {
        EffectVector { delta: self.delta.map(|d| -d) }
    }
}

/// Stable 64-bit key for `(input, edit)`, used to seed per-estimate draws so
/// results do not depend on evaluation order.
fn estimate_key(x_id: &str, edit: &InterventionDescriptor) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in x_id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(PRIME);
    }
    h = (h ^ edit.concept as u64).wrapping_mul(PRIME);
    (h ^ edit.target.class_index() as u64).wrapping_mul(PRIME)
}

/// One deterministic index into `0..n` for this `(seed, input, edit)`.
fn keyed_index(seed: u64, x_id: &str, edit: &InterventionDescriptor, n: usize) -> usize {
    bounded(mix(seed, estimate_key(x_id, edit), 0), n)
}

// ───────────────────────────── the estimator interface ─────────────────────────────

/// An estimator of the effect of `edit` on the black box's output for `x`.
pub trait Explainer {
    /// Short stable identifier used in reports and dump files.
    fn name(&self) -> String;

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector>;
}

// ───────────────────────────── CPM estimators ─────────────────────────────

/// Intervention-token proxy estimator: 𝒫(x ⧺ token(edit)) − ℕ(x).
pub struct CpmInEstimator<'a> {
    pub proxy: &'a EncoderModel,
    pub blackbox: &'a EncoderModel,
    pub layout: VocabLayout,
}

impl<'a> CpmInEstimator<'a> {
    pub fn new(proxy: &'a EncoderModel, blackbox: &'a EncoderModel, layout: VocabLayout) -> Self {
        Self { proxy, blackbox, layout }
    }
}

impl Explainer for CpmInEstimator<'_> {
    fn name(&self) -> String {
        "cpm-in".into()
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        if edit.concept >= self.layout.k {
            return Err(CoreError::Usage(format!(
                "concept {} out of range for k = {}",
                edit.concept, self.layout.k
            )));
        }
        let appended = append_intervention_token(&x.tokens, edit, &self.layout);
        let after = self.proxy.probs(&appended)?;
        let before = self.blackbox.probs(&x.tokens)?;
        EffectVector::between(&after, &before)
    }
}

/// How interchange sources are selected from the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceStrategy {
    /// Uniform over pool examples whose gold concept value equals the target.
    GoldLabel,
    /// Uniform over the whole pool, ignoring concept values.
    Random,
    /// Uniform over pool examples whose probe-predicted concept value equals
    /// the target.
    ProbePredicted,
}

impl std::fmt::Display for SourceStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SourceStrategy::GoldLabel => "gold",
            SourceStrategy::Random => "random",
            SourceStrategy::ProbePredicted => "probe",
        };
        f.write_str(s)
    }
}

/// Interchange-intervention proxy estimator:
/// 𝒫 with site(edit.concept) ← source activation, minus ℕ(x).
pub struct CpmHiEstimator<'a> {
    pub proxy: &'a EncoderModel,
    pub blackbox: &'a EncoderModel,
    pool: &'a [Example],
    strategy: SourceStrategy,
    /// (concept, concept class) → pool indices, per the active strategy.
    candidates: BTreeMap<(usize, usize), Vec<usize>>,
    k: usize,
    seed: u64,
}

impl<'a> CpmHiEstimator<'a> {
    pub fn new(
        proxy: &'a EncoderModel,
        blackbox: &'a EncoderModel,
        pool: &'a [Example],
        strategy: SourceStrategy,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        proxy.cfg.validate_sites(k)?;
        let mut candidates = BTreeMap::new();
        match strategy {
            SourceStrategy::Random => {}
            SourceStrategy::GoldLabel => {
                for (idx, ex) in pool.iter().enumerate() {
                    for (concept, value) in ex.concepts.iter().enumerate().take(k) {
                        candidates
                            .entry((concept, value.class_index()))
                            .or_insert_with(Vec::new)
                            .push(idx);
                    }
                }
            }
            SourceStrategy::ProbePredicted => {
                if proxy.k_probes() < k {
                    return Err(CoreError::Usage(format!(
                        "probe-predicted sources need {k} probe heads, model has {}",
                        proxy.k_probes()
                    )));
                }
                for (idx, ex) in pool.iter().enumerate() {
                    let predicted = proxy.probe_predictions(&ex.tokens)?;
                    for (concept, class) in predicted.into_iter().enumerate().take(k) {
                        candidates.entry((concept, class)).or_insert_with(Vec::new).push(idx);
                    }
                }
            }
        }
        Ok(Self { proxy, blackbox, pool, strategy, candidates, k, seed })
    }

    /// The source example this estimator would use for `(x, edit)`.
    pub fn source_for(&self, x: &Example, edit: &InterventionDescriptor) -> Result<&'a Example> {
        if edit.concept >= self.k {
            return Err(CoreError::Usage(format!(
                "concept {} out of range for k = {}",
                edit.concept, self.k
            )));
        }
        let indices: &[usize] = match self.strategy {
            SourceStrategy::Random => {
                if self.pool.is_empty() {
                    return Err(CoreError::NotFound(format!(
                        "no source candidates for concept {} ← {:?}: pool is empty",
                        edit.concept, edit.target
                    )));
                }
                let idx = keyed_index(self.seed, &x.id, edit, self.pool.len());
                return Ok(&self.pool[idx]);
            }
            _ => self
                .candidates
                .get(&(edit.concept, edit.target.class_index()))
                .map(Vec::as_slice)
                .unwrap_or(&[]),
        };
        if indices.is_empty() {
            return Err(CoreError::NotFound(format!(
                "no source candidates for concept {} ← {:?} under the {} strategy",
                edit.concept, edit.target, self.strategy
            )));
        }
        let idx = keyed_index(self.seed, &x.id, edit, indices.len());
        Ok(&self.pool[indices[idx]])
    }
}

impl Explainer for CpmHiEstimator<'_> {
    fn name(&self) -> String {
        format!("cpm-hi-{}", self.strategy)
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        let source = self.source_for(x, edit)?;
        let site = site_for(&self.proxy.cfg, edit.concept)?;
        let after = self.proxy.interchange_probs(&x.tokens, &source.tokens, &site)?;
        let before = self.blackbox.probs(&x.tokens)?;
        EffectVector::between(&after, &before)
    }
}

// ───────────────────────────── S-Learner ─────────────────────────────

/// Anything that maps an example to per-concept class indices (0 = Negative,
/// 1 = Unknown, 2 = Positive). The S-Learner's concept predictor ℬ.
pub trait ConceptPredictor {
    fn concept_classes(&self, x: &Example) -> Result<Vec<usize>>;
}

impl ConceptPredictor for ConceptModel {
    fn concept_classes(&self, x: &Example) -> Result<Vec<usize>> {
        self.predict(&x.tokens)
    }
}

/// A perfect concept predictor: reads the gold concept values.
pub struct GoldConcepts;

impl ConceptPredictor for GoldConcepts {
    fn concept_classes(&self, x: &Example) -> Result<Vec<usize>> {
        Ok(x.concepts.iter().map(|v| v.class_index()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SLearnerConfig {
    /// Full-batch gradient-descent iterations.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Distillation temperature of the smoothed cross-entropy fit.
    pub temperature: f64,
}

impl Default for SLearnerConfig {
    fn default() -> Self {
        Self { iterations: 20_000, learning_rate: 1.0, temperature: 2.0 }
    }
}

/// Multinomial logistic regression from one-hot concept predictions to the
/// black box's output distribution; intervenes by forcing one concept's
/// one-hot block before the read-out.
pub struct SLearner<'a, B: ConceptPredictor> {
    concepts: &'a B,
    k: usize,
    /// Row-major [3k + 1, 5]: one row per concept-class feature, last row
    /// is the bias.
    weights: Vec<f64>,
}

impl<'a, B: ConceptPredictor> SLearner<'a, B> {
    /// Fits the regression against softened teacher distributions with
    /// full-batch gradient descent from zero initialization. `teacher`
    /// returns the black box's logits for an example (see
    /// [`SLearner::fit_to_model`] for the common case); when `pairs` are
    /// supplied, each contributes a counterfactual row: the base's predicted
    /// concepts with the edit forced, targeting the teacher's output on the
    /// pair's counterfactual.
    pub fn fit(
        teacher: &mut dyn FnMut(&Example) -> Result<Vec<f64>>,
        concepts: &'a B,
        train: &[Example],
        pairs: Option<&[CounterfactualPair]>,
        k: usize,
        cfg: &SLearnerConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(CoreError::Usage("cannot fit the regression on zero examples".into()));
        }
        if cfg.iterations == 0 || cfg.learning_rate <= 0.0 || cfg.temperature <= 0.0 {
            return Err(CoreError::Config(
                "regression fit needs positive iterations, learning rate, and temperature".into(),
            ));
        }
        let mut rows: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        for ex in train {
            let classes = checked_classes(concepts, ex, k)?;
            let target = softened(&teacher(ex)?, cfg.temperature);
            rows.push((classes, target));
        }
        for pair in pairs.into_iter().flatten() {
            let mut classes = checked_classes(concepts, &pair.base, k)?;
            if pair.edit.concept >= k {
                return Err(CoreError::Usage(format!(
                    "pair {} edits concept {} but k = {k}",
                    pair.pair_id(),
                    pair.edit.concept
                )));
            }
            classes[pair.edit.concept] = pair.edit.target.class_index();
            let target = softened(&teacher(&pair.counterfactual)?, cfg.temperature);
            rows.push((classes, target));
        }
        let weights = fit_grouped_regression(&rows, k, cfg);
        Ok(Self { concepts, k, weights })
    }

    /// Fits against an encoder black box.
    pub fn fit_to_model(
        blackbox: &EncoderModel,
        concepts: &'a B,
        train: &[Example],
        pairs: Option<&[CounterfactualPair]>,
        k: usize,
        cfg: &SLearnerConfig,
    ) -> Result<Self> {
        let mut teacher = |ex: &Example| blackbox.logits(&ex.tokens);
        Self::fit(&mut teacher, concepts, train, pairs, k, cfg)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Output distribution for a concept-class assignment.
    pub fn probs_for(&self, classes: &[usize]) -> Result<Vec<f64>> {
        if classes.len() != self.k || classes.iter().any(|&c| c >= CONCEPT_CLASSES) {
            return Err(CoreError::Usage(format!(
                "expected {} concept classes in 0..{CONCEPT_CLASSES}, got {classes:?}",
                self.k
            )));
        }
        let logits = regression_logits(&self.weights, classes, self.k);
        Ok(softmax_values(&logits))
    }
}

fn checked_classes<B: ConceptPredictor>(
    concepts: &B,
    ex: &Example,
    k: usize,
) -> Result<Vec<usize>> {
    let classes = concepts.concept_classes(ex)?;
    if classes.len() < k {
        return Err(CoreError::Usage(format!(
            "concept predictor returned {} values, need {k}",
            classes.len()
        )));
    }
    let mut classes = classes;
    classes.truncate(k);
    if let Some(&bad) = classes.iter().find(|&&c| c >= CONCEPT_CLASSES) {
        return Err(CoreError::Usage(format!("concept class {bad} out of range")));
    }
    Ok(classes)
}

fn softened(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax_values(&scaled)
}

fn regression_logits(weights: &[f64], classes: &[usize], k: usize) -> Vec<f64> {
    let bias_row = 3 * k;
    let mut logits = vec![0.0; NUM_CLASSES];
    for (concept, &class) in classes.iter().enumerate() {
        let row = concept * CONCEPT_CLASSES + class;
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit += weights[row * NUM_CLASSES + c];
        }
    }
    for (c, logit) in logits.iter_mut().enumerate() {
        *logit += weights[bias_row * NUM_CLASSES + c];
    }
    logits
}

/// Full-batch gradient descent on the smoothed cross-entropy, with rows
/// grouped by concept profile (the loss is linear in the target
/// distribution, so grouping is exact). Zero initialization keeps the
/// per-class weight columns in the zero-sum gauge, making the optimum
/// unique and comparable across implementations.
fn fit_grouped_regression(
    rows: &[(Vec<usize>, Vec<f64>)],
    k: usize,
    cfg: &SLearnerConfig,
) -> Vec<f64> {
    let mut groups: BTreeMap<&[usize], (f64, [f64; NUM_CLASSES])> = BTreeMap::new();
    for (classes, target) in rows {
        let entry = groups.entry(classes.as_slice()).or_insert((0.0, [0.0; NUM_CLASSES]));
        entry.0 += 1.0;
        for (acc, t) in entry.1.iter_mut().zip(target) {
            *acc += t;
        }
    }
    let n = rows.len() as f64;
    let rows_dim = 3 * k + 1;
    let mut weights = vec![0.0; rows_dim * NUM_CLASSES];
    let mut grad = vec![0.0; rows_dim * NUM_CLASSES];
    for _ in 0..cfg.iterations {
        grad.fill(0.0);
        for (classes, (count, target_sum)) in &groups {
            let logits = regression_logits(&weights, classes, k);
            let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
            let p = softmax_values(&scaled);
            // d(mean loss)/d(logit c) for this group:
            //   (count·p_c − Σ_targets q_c) / (n·T)
            let mut g = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                g[c] = (count * p[c] - target_sum[c]) / (n * cfg.temperature);
            }
            for (concept, &class) in classes.iter().enumerate() {
                let row = concept * CONCEPT_CLASSES + class;
                for c in 0..NUM_CLASSES {
                    grad[row * NUM_CLASSES + c] += g[c];
                }
            }
            let bias_row = 3 * k;
            for c in 0..NUM_CLASSES {
                grad[bias_row * NUM_CLASSES + c] += g[c];
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    weights
}

impl<B: ConceptPredictor> Explainer for SLearner<'_, B> {
    fn name(&self) -> String {
        "slearner".into()
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        if edit.concept >= self.k {
            return Err(CoreError::Usage(format!(
                "concept {} out of range for k = {}",
                edit.concept, self.k
            )));
        }
        let plain = checked_classes(self.concepts, x, self.k)?;
        let mut forced = plain.clone();
        forced[edit.concept] = edit.target.class_index();
        let before = self.probs_for(&plain)?;
        let after = self.probs_for(&forced)?;
        EffectVector::between(&after, &before)
    }
}

// ───────────────────────────── group-mean baselines ─────────────────────────────

/// How group-mean tables key their edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKeyMode {
    /// Key by (concept, target value): all base values pool together.
    #[default]
    TargetOnly,
    /// Key by (concept, base value, target value): directional changes kept
    /// apart.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    concept: usize,
    from: Option<ConceptValue>,
    target: ConceptValue,
}

/// Per-edit mean score differences with support counts.
#[derive(Debug, Clone)]
pub struct GroupTable {
    mode: GroupKeyMode,
    map: BTreeMap<GroupKey, (EffectVector, usize)>,
}

impl GroupTable {
    /// Builds the table from pairs: for every pair, `scorer(counterfactual)
    /// − scorer(base)` accumulates into the pair's edit key.
    pub fn fit(
        pairs: &[CounterfactualPair],
        mode: GroupKeyMode,
        scorer: &mut dyn FnMut(&Example) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::Usage("cannot fit a group table on zero pairs".into()));
        }
        let mut sums: BTreeMap<GroupKey, ([f64; NUM_CLASSES], usize)> = BTreeMap::new();
        for pair in pairs {
            let key = Self::key_for(mode, &pair.edit, || {
                pair.base.concepts.get(pair.edit.concept).copied().ok_or_else(|| {
                    CoreError::Usage(format!(
                        "pair {} edits concept {} but the base has only {} concepts",
                        pair.pair_id(),
                        pair.edit.concept,
                        pair.base.concepts.len()
                    ))
                })
            })?;
            let diff = EffectVector::between(
                &scorer(&pair.counterfactual)?,
                &scorer(&pair.base)?,
            )?;
            let entry = sums.entry(key).or_insert(([0.0; NUM_CLASSES], 0));
            for (acc, d) in entry.0.iter_mut().zip(diff.delta) {
                *acc += d;
            }
            entry.1 += 1;
        }
        let map = sums
            .into_iter()
            .map(|(key, (sum, count))| {
                let mean = EffectVector { delta: sum.map(|s| s / count as f64) };
                (key, (mean, count))
            })
            .collect();
        Ok(Self { mode, map })
    }

    fn key_for(
        mode: GroupKeyMode,
        edit: &InterventionDescriptor,
        base_value: impl FnOnce() -> Result<ConceptValue>,
    ) -> Result<GroupKey> {
        let from = match mode {
            GroupKeyMode::TargetOnly => None,
            GroupKeyMode::Directional => Some(base_value()?),
        };
        Ok(GroupKey { concept: edit.concept, from, target: edit.target })
    }

    /// Mean effect and support for `edit` applied to an input whose current
    /// concept value is `current` (only consulted in directional mode).
    pub fn lookup(
        &self,
        edit: &InterventionDescriptor,
        current: Option<ConceptValue>,
    ) -> Option<(&EffectVector, usize)> {
        let from = match self.mode {
            GroupKeyMode::TargetOnly => None,
            GroupKeyMode::Directional => Some(current?),
        };
        self.map
            .get(&GroupKey { concept: edit.concept, from, target: edit.target })
            .map(|(v, c)| (v, *c))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Group table over the black box's probability outputs.
pub fn fit_probability_table(
    pairs: &[CounterfactualPair],
    blackbox: &EncoderModel,
    mode: GroupKeyMode,
) -> Result<GroupTable> {
    let mut cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut scorer = |ex: &Example| match cache.get(&ex.id) {
        Some(p) => Ok(p.clone()),
        None => {
            let p = blackbox.probs(&ex.tokens)?;
            cache.insert(ex.id.clone(), p.clone());
            Ok(p)
        }
    };
    GroupTable::fit(pairs, mode, &mut scorer)
}

/// Group table over one-hot gold labels.
pub fn fit_label_table(pairs: &[CounterfactualPair], mode: GroupKeyMode) -> Result<GroupTable> {
    let mut scorer = |ex: &Example| {
        if ex.label >= NUM_CLASSES {
            return Err(CoreError::Usage(format!(
                "example {} has label {} outside 0..{NUM_CLASSES}",
                ex.id, ex.label
            )));
        }
        let mut onehot = vec![0.0; NUM_CLASSES];
        onehot[ex.label] = 1.0;
        Ok(onehot)
    };
    GroupTable::fit(pairs, mode, &mut scorer)
}

/// Input-independent estimator reading a fitted [`GroupTable`]
/// (probability-mean or label-mean variants).
pub struct GroupEstimator {
    table: GroupTable,
    name: String,
}

impl GroupEstimator {
    pub fn new(table: GroupTable, name: impl Into<String>) -> Self {
        Self { table, name: name.into() }
    }
}

impl Explainer for GroupEstimator {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        let current = x.concepts.get(edit.concept).copied();
        self.table
            .lookup(edit, current)
            .map(|(v, _)| *v)
            .ok_or_else(|| {
                CoreError::NotFound(format!(
                    "no pairs support concept {} ← {:?}",
                    edit.concept, edit.target
                ))
            })
    }
}

// ───────────────────────────── pool baselines ─────────────────────────────

/// Concept-profile-matched baseline: ℕ(s) − ℕ(x) where `s` is a pool
/// example whose full concept profile equals the counterfactual's.
pub struct ApproxEstimator<'a> {
    blackbox: &'a EncoderModel,
    pool: &'a [Example],
    profiles: BTreeMap<Vec<ConceptValue>, Vec<usize>>,
    seed: u64,
}

impl<'a> ApproxEstimator<'a> {
    pub fn new(blackbox: &'a EncoderModel, pool: &'a [Example], seed: u64) -> Self {
        let mut profiles: BTreeMap<Vec<ConceptValue>, Vec<usize>> = BTreeMap::new();
        for (idx, ex) in pool.iter().enumerate() {
            profiles.entry(ex.concepts.clone()).or_default().push(idx);
        }
        Self { blackbox, pool, profiles, seed }
    }
}

impl Explainer for ApproxEstimator<'_> {
    fn name(&self) -> String {
        "approx".into()
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        if edit.concept >= x.concepts.len() {
            return Err(CoreError::Usage(format!(
                "concept {} out of range for {} concepts",
                edit.concept,
                x.concepts.len()
            )));
        }
        let mut wanted = x.concepts.clone();
        wanted[edit.concept] = edit.target;
        let indices = self.profiles.get(&wanted).map(Vec::as_slice).unwrap_or(&[]);
        if indices.is_empty() {
            return Err(CoreError::NotFound(format!(
                "no pool example matches the counterfactual profile for concept {} ← {:?}",
                edit.concept, edit.target
            )));
        }
        let source = &self.pool[indices[keyed_index(self.seed, &x.id, edit, indices.len())]];
        let after = self.blackbox.probs(&source.tokens)?;
        let before = self.blackbox.probs(&x.tokens)?;
        EffectVector::between(&after, &before)
    }
}

/// Uninformed baseline: ℕ(s) − ℕ(x) for a uniformly sampled pool example.
pub struct RandomEstimator<'a> {
    blackbox: &'a EncoderModel,
    pool: &'a [Example],
    seed: u64,
}

impl<'a> RandomEstimator<'a> {
    pub fn new(blackbox: &'a EncoderModel, pool: &'a [Example], seed: u64) -> Self {
        Self { blackbox, pool, seed }
    }
}

impl Explainer for RandomEstimator<'_> {
    fn name(&self) -> String {
        "random".into()
    }

    fn estimate(&self, x: &Example, edit: &InterventionDescriptor) -> Result<EffectVector> {
        if self.pool.is_empty() {
            return Err(CoreError::NotFound("the sampling pool is empty".into()));
        }
        let source = &self.pool[keyed_index(self.seed, &x.id, edit, self.pool.len())];
        let after = self.blackbox.probs(&source.tokens)?;
        let before = self.blackbox.probs(&x.tokens)?;
        EffectVector::between(&after, &before)
    }
}

// ───────────────────────────── debiasing ─────────────────────────────

/// Debiased prediction: classify with the target concept's hidden site
/// overwritten from a source whose concept value is Unknown, severing the
/// concept's influence on the output.
pub struct Debiaser<'a> {
    proxy: &'a EncoderModel,
    pool: &'a [Example],
    /// concept → pool indices with that concept Unknown.
    unknown_sources: BTreeMap<usize, Vec<usize>>,
    seed: u64,
}

impl<'a> Debiaser<'a> {
    pub fn new(proxy: &'a EncoderModel, pool: &'a [Example], k: usize, seed: u64) -> Result<Self> {
        proxy.cfg.validate_sites(k)?;
        let mut unknown_sources: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, ex) in pool.iter().enumerate() {
            for (concept, value) in ex.concepts.iter().enumerate().take(k) {
                if *value == ConceptValue::Unknown {
                    unknown_sources.entry(concept).or_default().push(idx);
                }
            }
        }
        Ok(Self { proxy, pool, unknown_sources, seed })
    }

    /// Predicted class with concept `concept` neutralized.
    pub fn predict(&self, x: &Example, concept: usize) -> Result<usize> {
        let edit = InterventionDescriptor { concept, target: ConceptValue::Unknown };
        let indices = self.unknown_sources.get(&concept).map(Vec::as_slice).unwrap_or(&[]);
        if indices.is_empty() {
            return Err(CoreError::NotFound(format!(
                "no pool example has concept {concept} Unknown to debias with"
            )));
        }
        let source = &self.pool[indices[keyed_index(self.seed, &x.id, &edit, indices.len())]];
        let site = site_for(&self.proxy.cfg, concept)?;
        let probs = self.proxy.interchange_probs(&x.tokens, &source.tokens, &site)?;
        Ok(argmax(&probs))
    }
}
