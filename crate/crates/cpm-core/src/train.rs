//! Training losses and loops for the black box and both proxy variants.
//!
//! Proxies are initialized from the frozen black box ℕ and trained to mimic
//! both its factual behavior (smoothed cross-entropy against ℕ's softened
//! outputs) and its counterfactual behavior:
//!
//! * the **intervention-token** proxy reads `x ⧺ token(edit)` and is pushed
//!   toward ℕ's output on the (approximate) counterfactual x̃;
//! * the **hidden-interchange** proxy computes `x` with the edit concept's
//!   hidden site overwritten from a source input carrying the target value,
//!   pushed toward ℕ(x̃), plus per-concept probe heads that localize each
//!   concept in its site.
//!
//! Optimization is Adam with a linear learning-rate decay to zero over the
//! epoch budget. Every `eval_interval_steps` steps the dev metric is
//! computed (cosine effect error for proxies, Macro-F1 for classifiers), the
//! best checkpoint is retained, and training stops once `patience`
//! consecutive evaluations fail to improve it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{interchange_forward, softmax_values, Gradients, NodeId, Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::eval::{dist, icace_targets, macro_f1, DistMetric};
use crate::explain::{CpmHiEstimator, CpmInEstimator, Explainer, SourceStrategy};
use crate::model::{
    append_intervention_token, proxy_from_blackbox, site_for, BoundEncoder, ConceptModel,
    EncoderConfig, EncoderModel, ParamVisit, CONCEPT_CLASSES,
};
use crate::rng::StreamRng;
use crate::scm::{CounterfactualPair, Example, VocabLayout};

// ───────────────────────────── configuration ─────────────────────────────

/// Relative weights of the loss terms and the distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Factual mimicry term.
    pub mimic: f64,
    /// Counterfactual term of the intervention-token proxy.
    pub intervention: f64,
    /// Counterfactual term of the hidden-interchange proxy.
    pub interchange: f64,
    /// Concept-probe term (interchange proxy only).
    pub multi: f64,
    /// Distillation temperature of the smoothed cross-entropy.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mimic: 1.0, intervention: 3.0, interchange: 3.0, multi: 1.0, temperature: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("mimic", self.mimic),
            ("intervention", self.intervention),
            ("interchange", self.interchange),
            ("multi", self.multi),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(CoreError::Config(format!("loss weight {name} must be ≥ 0, got {w}")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(CoreError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps between dev evaluations (also evaluated at the final step).
    pub eval_interval_steps: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    /// Zero stops at the first evaluation.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            eval_interval_steps: 100,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval_steps == 0 {
            return Err(CoreError::Config(
                "epochs, batch_size, and eval_interval_steps must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Which proxy variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpmKind {
    /// Intervention-token proxy.
    In,
    /// Hidden-interchange proxy.
    Hi,
}

impl std::fmt::Display for CpmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CpmKind::In => "in",
            CpmKind::Hi => "hi",
        })
    }
}

impl std::str::FromStr for CpmKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(CpmKind::In),
            "hi" => Ok(CpmKind::Hi),
            other => Err(CoreError::Config(format!("unknown proxy kind '{other}' (in|hi)"))),
        }
    }
}

// ───────────────────────────── evaluation log ─────────────────────────────

/// One dev evaluation. Columns that do not apply to the run kind hold NaN
/// (a classifier run has no effect errors; metric columns never silently
/// repurpose each other).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub l2: f64,
    pub cosine: f64,
    pub normdiff: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub records: Vec<EvalRecord>,
}

impl EpochLog {
    fn push(&mut self, record: EvalRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < record.step));
        self.records.push(record);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l2,cosine,normdiff,macro_f1\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.l2, r.cosine, r.normdiff, r.macro_f1
            );
        }
        out
    }
}

/// A finished training run: the best checkpoint seen, its dev metric, and
/// the full evaluation history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: EpochLog,
    pub best_metric: f64,
    pub best_step: usize,
}

// ───────────────────────────── losses ─────────────────────────────

/// Distillation loss: cross-entropy of softmax(student/T) against the
/// constant target softmax(teacher/T). Minimized exactly when the student
/// logits equal the teacher's up to an additive constant.
pub fn smoothed_ce(
    tape: &mut Tape,
    teacher_logits: &[f64],
    student_logits: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(CoreError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let inv_t = 1.0 / temperature;
    let scaled_teacher: Vec<f64> = teacher_logits.iter().map(|z| z * inv_t).collect();
    let target = softmax_values(&scaled_teacher);
    let neg_target: Vec<f64> = target.iter().map(|q| -q).collect();
    let scaled = tape.scale(student_logits, inv_t)?;
    let log_probs = tape.log_softmax(scaled)?;
    tape.weighted_sum(log_probs, &neg_target)
}

/// Cross-entropy of a logits node against a hard class label.
fn hard_ce(tape: &mut Tape, logits: NodeId, class: usize, classes: usize) -> Result<NodeId> {
    if class >= classes {
        return Err(CoreError::Usage(format!("class {class} outside 0..{classes}")));
    }
    let log_probs = tape.log_softmax(logits)?;
    let mut weights = vec![0.0; classes];
    weights[class] = -1.0;
    tape.weighted_sum(log_probs, &weights)
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| CoreError::Usage("cannot average zero loss terms".into()))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Mean factual mimicry loss over a batch: CE_S(ℕ(x), 𝒫(x)).
pub fn loss_mimic(
    tape: &mut Tape,
    blackbox: &EncoderModel,
    proxy: &BoundEncoder<'_>,
    batch: &[Example],
    temperature: f64,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let teacher = blackbox.logits(&ex.tokens)?;
        let trace = proxy.forward(tape, &ex.tokens)?;
        terms.push(smoothed_ce(tape, &teacher, trace.logits, temperature)?);
    }
    mean_of(tape, &terms)
}

/// Intervention-token counterfactual loss for one pair:
/// CE_S(ℕ(x̃), 𝒫(x ⧺ token(edit))).
pub fn loss_intervention(
    tape: &mut Tape,
    blackbox: &EncoderModel,
    proxy: &BoundEncoder<'_>,
    pair: &CounterfactualPair,
    layout: &VocabLayout,
    temperature: f64,
) -> Result<NodeId> {
    let teacher = blackbox.logits(&pair.counterfactual.tokens)?;
    let appended = append_intervention_token(&pair.base.tokens, &pair.edit, layout);
    let trace = proxy.forward(tape, &appended)?;
    smoothed_ce(tape, &teacher, trace.logits, temperature)
}

/// Hidden-interchange counterfactual loss for one pair:
/// CE_S(ℕ(x̃), 𝒫 with site(edit.concept) ← source's activation). The source
/// must carry the edit's target value.
pub fn loss_interchange(
    tape: &mut Tape,
    blackbox: &EncoderModel,
    proxy: &BoundEncoder<'_>,
    pair: &CounterfactualPair,
    source: &Example,
    temperature: f64,
) -> Result<NodeId> {
    let concept = pair.edit.concept;
    if source.concepts.get(concept) != Some(&pair.edit.target) {
        return Err(CoreError::Usage(format!(
            "source {} has concept {concept} = {:?}, but the edit requires {:?}",
            source.id,
            source.concepts.get(concept),
            pair.edit.target
        )));
    }
    let teacher = blackbox.logits(&pair.counterfactual.tokens)?;
    let site = site_for(&proxy.model.cfg, concept)?;
    let trace = interchange_forward(tape, proxy, &pair.base.tokens, &source.tokens, &site)?;
    smoothed_ce(tape, &teacher, trace.logits, temperature)
}

/// Summed probe cross-entropy against the example's gold concept values,
/// over the first `k` concepts. Gradients reach the trunk through the site
/// slices.
pub fn loss_concept_probes(
    tape: &mut Tape,
    proxy: &BoundEncoder<'_>,
    example: &Example,
    k: usize,
) -> Result<NodeId> {
    if k == 0 {
        return Err(CoreError::Usage("probe loss needs at least one concept".into()));
    }
    let trace = proxy.forward(tape, &example.tokens)?;
    let mut acc: Option<NodeId> = None;
    for concept in 0..k {
        let value = example.concepts.get(concept).ok_or_else(|| {
            CoreError::Usage(format!("example {} has no concept {concept}", example.id))
        })?;
        let logits = proxy.probe_logits(tape, &trace, concept)?;
        let term = hard_ce(tape, logits, value.class_index(), CONCEPT_CLASSES)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("k ≥ 1 guarantees at least one term"))
}

// ───────────────────────────── optimizer ─────────────────────────────

/// Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) over a model's canonical
/// parameter order.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &impl ParamVisit) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, tensor| m.push(Tensor::zeros_like(tensor)));
        let v = m.clone();
        Self { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update with gradients read from `grads` at `nodes` (one node per
    /// parameter, in canonical order).
    pub fn step(
        &mut self,
        model: &mut impl ParamVisit,
        nodes: &[NodeId],
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        if nodes.len() != self.m.len() {
            return Err(CoreError::Shape(format!(
                "{} gradient nodes for {} parameters",
                nodes.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let mut failure: Option<String> = None;
        model.visit_params_mut(&mut |name, param| {
            if failure.is_some() {
                return;
            }
            let grad = grads.wrt(nodes[idx]);
            if grad.shape() != param.shape() {
                failure = Some(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    grad.shape(),
                    param.shape()
                ));
                return;
            }
            let m = ms[idx].data_mut();
            let v = vs[idx].data_mut();
            let p = param.data_mut();
            for ((pi, mi), (vi, gi)) in
                p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(grad.data()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        match failure {
            Some(msg) => Err(CoreError::Shape(msg)),
            None => Ok(()),
        }
    }
}

// ───────────────────────────── early stopping ─────────────────────────────

struct BestTracker<M: Clone> {
    model: M,
    metric: f64,
    step: usize,
    stale: usize,
}

impl<M: Clone> BestTracker<M> {
    fn observe(current: &mut Option<Self>, metric: f64, step: usize, model: &M, maximize: bool) {
        match current {
            None => {
                *current = Some(Self { model: model.clone(), metric, step, stale: 0 });
            }
            Some(best) => {
                let improved =
                    if maximize { metric > best.metric } else { metric < best.metric };
                if improved {
                    best.model = model.clone();
                    best.metric = metric;
                    best.step = step;
                    best.stale = 0;
                } else {
                    best.stale += 1;
                }
            }
        }
    }

    fn exhausted(current: &Option<Self>, patience: usize) -> bool {
        current.as_ref().is_some_and(|b| b.stale >= patience)
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

// ───────────────────────────── black-box training ─────────────────────────────

/// Trains a fresh classifier on gold labels with plain cross-entropy,
/// early-stopped on dev Macro-F1.
pub fn train_blackbox(
    enc_cfg: &EncoderConfig,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(CoreError::Usage("training needs nonempty train and dev sets".into()));
    }
    let mut model = EncoderModel::init(enc_cfg.clone(), 0, cfg.seed)?;
    let mut adam = Adam::new(&model);
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = StreamRng::new(cfg.seed, 30);
    let mut log = EpochLog::default();
    let mut best: Option<BestTracker<EncoderModel>> = None;
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let nodes = bound.param_nodes();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                let trace = bound.forward(&mut tape, &ex.tokens)?;
                terms.push(hard_ce(&mut tape, trace.logits, ex.label, enc_cfg.classes)?);
            }
            let total = mean_of(&mut tape, &terms)?;
            let grads = tape.backward(total)?;
            adam.step(&mut model, &nodes, &grads, lr)?;
            step += 1;
            if step % cfg.eval_interval_steps == 0 || step == total_steps {
                let f1 = macro_f1(&model, dev)?;
                log.push(EvalRecord {
                    step,
                    l2: f64::NAN,
                    cosine: f64::NAN,
                    normdiff: f64::NAN,
                    macro_f1: f1,
                });
                BestTracker::observe(&mut best, f1, step, &model, true);
                if BestTracker::exhausted(&best, cfg.patience) {
                    break 'epochs;
                }
            }
        }
    }
    let best = best.expect("at least one evaluation always runs");
    Ok(TrainOutcome {
        model: best.model,
        log,
        best_metric: best.metric,
        best_step: best.step,
    })
}

/// Trains the S-Learner's concept predictor on gold concept labels
/// (summed per-concept cross-entropy), early-stopped on dev concept
/// accuracy, which is logged in the `macro_f1` column.
pub fn train_concept_model(
    enc_cfg: &EncoderConfig,
    k: usize,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ConceptModel>> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(CoreError::Usage("training needs nonempty train and dev sets".into()));
    }
    let mut model = ConceptModel::init(enc_cfg.clone(), k, cfg.seed)?;
    let mut adam = Adam::new(&model);
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = StreamRng::new(cfg.seed, 30);
    let mut log = EpochLog::default();
    let mut best: Option<BestTracker<ConceptModel>> = None;
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let nodes = bound.param_nodes();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                if ex.concepts.len() < k {
                    return Err(CoreError::Usage(format!(
                        "example {} has {} concepts, need {k}",
                        ex.id,
                        ex.concepts.len()
                    )));
                }
                let heads = bound.forward(&mut tape, &ex.tokens)?;
                let mut sum: Option<NodeId> = None;
                for (concept, &logits) in heads.iter().enumerate().take(k) {
                    let class = ex.concepts[concept].class_index();
                    let term = hard_ce(&mut tape, logits, class, CONCEPT_CLASSES)?;
                    sum = Some(match sum {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                terms.push(sum.expect("k ≥ 1 checked at init"));
            }
            let total = mean_of(&mut tape, &terms)?;
            let grads = tape.backward(total)?;
            adam.step(&mut model, &nodes, &grads, lr)?;
            step += 1;
            if step % cfg.eval_interval_steps == 0 || step == total_steps {
                let acc = concept_accuracy(&model, dev, k)?;
                log.push(EvalRecord {
                    step,
                    l2: f64::NAN,
                    cosine: f64::NAN,
                    normdiff: f64::NAN,
                    macro_f1: acc,
                });
                BestTracker::observe(&mut best, acc, step, &model, true);
                if BestTracker::exhausted(&best, cfg.patience) {
                    break 'epochs;
                }
            }
        }
    }
    let best = best.expect("at least one evaluation always runs");
    Ok(TrainOutcome {
        model: best.model,
        log,
        best_metric: best.metric,
        best_step: best.step,
    })
}

/// Fraction of (example, concept) slots predicted correctly.
pub fn concept_accuracy(model: &ConceptModel, examples: &[Example], k: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Usage("cannot score an empty dataset".into()));
    }
    let mut hits = 0usize;
    for ex in examples {
        let predicted = model.predict(&ex.tokens)?;
        for concept in 0..k {
            let gold = ex.concepts.get(concept).ok_or_else(|| {
                CoreError::Usage(format!("example {} has no concept {concept}", ex.id))
            })?;
            if predicted.get(concept) == Some(&gold.class_index()) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (examples.len() * k) as f64)
}

// ───────────────────────────── proxy training ─────────────────────────────

/// Everything a proxy training run reads. The black box stays frozen
/// throughout; the proxy starts from its weights.
pub struct CpmTrainSetup<'a> {
    pub kind: CpmKind,
    pub blackbox: &'a EncoderModel,
    pub layout: VocabLayout,
    /// Number of concepts (sites / probes / intervention-token groups).
    pub k: usize,
    pub train_pairs: &'a [CounterfactualPair],
    /// Interchange source pool (the train examples).
    pub source_pool: &'a [Example],
    /// Ground-truth pairs for the early-stopping metric.
    pub dev_pairs: &'a [CounterfactualPair],
    /// Labeled dev examples for Macro-F1 logging.
    pub dev_examples: &'a [Example],
}

/// Cache of the frozen teacher's logits, keyed by example id.
struct TeacherCache<'a> {
    blackbox: &'a EncoderModel,
    map: BTreeMap<String, Vec<f64>>,
}

impl<'a> TeacherCache<'a> {
    fn new(blackbox: &'a EncoderModel) -> Self {
        Self { blackbox, map: BTreeMap::new() }
    }

    fn logits(&mut self, ex: &Example) -> Result<Vec<f64>> {
        if let Some(z) = self.map.get(&ex.id) {
            return Ok(z.clone());
        }
        let z = self.blackbox.logits(&ex.tokens)?;
        self.map.insert(ex.id.clone(), z.clone());
        Ok(z)
    }
}

/// Trains a proxy of the given kind against the frozen black box. Returns
/// the best checkpoint by dev cosine effect error.
pub fn train_cpm(
    setup: &CpmTrainSetup<'_>,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>> {
    cfg.validate()?;
    weights.validate()?;
    if setup.train_pairs.is_empty() {
        return Err(CoreError::Usage("training needs a nonempty pair set".into()));
    }
    if setup.dev_pairs.is_empty() || setup.dev_examples.is_empty() {
        return Err(CoreError::Usage("training needs nonempty dev pairs and dev examples".into()));
    }
    if setup.k == 0 {
        return Err(CoreError::Usage("training needs at least one concept".into()));
    }
    let probe_count = match setup.kind {
        CpmKind::In => 0,
        CpmKind::Hi => setup.k,
    };
    let mut proxy =
        proxy_from_blackbox(setup.blackbox, &setup.layout, probe_count, cfg.seed)?;

    // Interchange sources: pool indices per (concept, value), checked to
    // cover every edit in the training pairs.
    let mut source_index: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    if setup.kind == CpmKind::Hi {
        for (idx, ex) in setup.source_pool.iter().enumerate() {
            for (concept, value) in ex.concepts.iter().enumerate().take(setup.k) {
                source_index.entry((concept, value.class_index())).or_default().push(idx);
            }
        }
        for pair in setup.train_pairs {
            let key = (pair.edit.concept, pair.edit.target.class_index());
            if !source_index.contains_key(&key) {
                return Err(CoreError::Usage(format!(
                    "no source in the pool carries concept {} = {:?}, required by pair {}",
                    pair.edit.concept,
                    pair.edit.target,
                    pair.pair_id()
                )));
            }
        }
    }

    let mut teacher = TeacherCache::new(setup.blackbox);
    let dev_targets = icace_targets(setup.blackbox, setup.dev_pairs)?;

    let mut adam = Adam::new(&proxy);
    let per_epoch = steps_per_epoch(setup.train_pairs.len(), cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..setup.train_pairs.len()).collect();
    let mut shuffle_rng = StreamRng::new(cfg.seed, 30);
    let mut source_rng = StreamRng::new(cfg.seed, 31);
    let mut log = EpochLog::default();
    let mut best: Option<BestTracker<EncoderModel>> = None;
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            let (nodes, grads) = {
                let mut tape = Tape::new();
                let bound = proxy.bind(&mut tape);
                let nodes = bound.param_nodes();
                let mut mimic_terms = Vec::with_capacity(batch.len());
                let mut cf_terms = Vec::with_capacity(batch.len());
                let mut multi_terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let pair = &setup.train_pairs[i];
                    let base_teacher = teacher.logits(&pair.base)?;
                    let cf_teacher = teacher.logits(&pair.counterfactual)?;
                    let base_trace = bound.forward(&mut tape, &pair.base.tokens)?;
                    mimic_terms.push(smoothed_ce(
                        &mut tape,
                        &base_teacher,
                        base_trace.logits,
                        weights.temperature,
                    )?);
                    match setup.kind {
                        CpmKind::In => {
                            let appended = append_intervention_token(
                                &pair.base.tokens,
                                &pair.edit,
                                &setup.layout,
                            );
                            let trace = bound.forward(&mut tape, &appended)?;
                            cf_terms.push(smoothed_ce(
                                &mut tape,
                                &cf_teacher,
                                trace.logits,
                                weights.temperature,
                            )?);
                        }
                        CpmKind::Hi => {
                            // Probe terms reuse the factual forward's trace.
                            let mut probe_sum: Option<NodeId> = None;
                            for concept in 0..setup.k {
                                let class = pair.base.concepts[concept].class_index();
                                let logits =
                                    bound.probe_logits(&mut tape, &base_trace, concept)?;
                                let term =
                                    hard_ce(&mut tape, logits, class, CONCEPT_CLASSES)?;
                                probe_sum = Some(match probe_sum {
                                    None => term,
                                    Some(a) => tape.add(a, term)?,
                                });
                            }
                            multi_terms.push(probe_sum.expect("k ≥ 1 checked above"));

                            let key = (pair.edit.concept, pair.edit.target.class_index());
                            let candidates =
                                source_index.get(&key).expect("coverage checked above");
                            let source =
                                &setup.source_pool[candidates[source_rng.index(candidates.len())]];
                            let site = site_for(&proxy.cfg, pair.edit.concept)?;
                            let trace = interchange_forward(
                                &mut tape,
                                &bound,
                                &pair.base.tokens,
                                &source.tokens,
                                &site,
                            )?;
                            cf_terms.push(smoothed_ce(
                                &mut tape,
                                &cf_teacher,
                                trace.logits,
                                weights.temperature,
                            )?);
                        }
                    }
                }
                let mimic = mean_of(&mut tape, &mimic_terms)?;
                let cf = mean_of(&mut tape, &cf_terms)?;
                let cf_weight = match setup.kind {
                    CpmKind::In => weights.intervention,
                    CpmKind::Hi => weights.interchange,
                };
                let mut total = tape.scale(mimic, weights.mimic)?;
                let cf_scaled = tape.scale(cf, cf_weight)?;
                total = tape.add(total, cf_scaled)?;
                if setup.kind == CpmKind::Hi {
                    let multi = mean_of(&mut tape, &multi_terms)?;
                    let multi_scaled = tape.scale(multi, weights.multi)?;
                    total = tape.add(total, multi_scaled)?;
                }
                (nodes, tape.backward(total)?)
            };
            adam.step(&mut proxy, &nodes, &grads, lr)?;
            step += 1;
            if step % cfg.eval_interval_steps == 0 || step == total_steps {
                let record = evaluate_proxy(&proxy, setup, &dev_targets, cfg.seed, step)?;
                log.push(record);
                BestTracker::observe(&mut best, record.cosine, step, &proxy, false);
                if BestTracker::exhausted(&best, cfg.patience) {
                    break 'epochs;
                }
            }
        }
    }
    let best = best.expect("at least one evaluation always runs");
    Ok(TrainOutcome {
        model: best.model,
        log,
        best_metric: best.metric,
        best_step: best.step,
    })
}

/// Dev-set effect errors (all three distances, one estimate per pair) plus
/// Macro-F1 for one proxy state.
fn evaluate_proxy(
    proxy: &EncoderModel,
    setup: &CpmTrainSetup<'_>,
    dev_targets: &[crate::explain::EffectVector],
    eval_seed: u64,
    step: usize,
) -> Result<EvalRecord> {
    let estimator: Box<dyn Explainer> = match setup.kind {
        CpmKind::In => {
            Box::new(CpmInEstimator::new(proxy, setup.blackbox, setup.layout))
        }
        CpmKind::Hi => Box::new(CpmHiEstimator::new(
            proxy,
            setup.blackbox,
            setup.source_pool,
            SourceStrategy::GoldLabel,
            setup.k,
            eval_seed,
        )?),
    };
    let mut sums = [0.0; 3];
    let mut evaluated = 0usize;
    for (pair, target) in setup.dev_pairs.iter().zip(dev_targets) {
        match estimator.estimate(&pair.base, &pair.edit) {
            Ok(estimate) => {
                for (sum, metric) in sums.iter_mut().zip(DistMetric::ALL) {
                    *sum += dist(metric, target, &estimate);
                }
                evaluated += 1;
            }
            Err(CoreError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if evaluated == 0 {
        return Err(CoreError::NotFound(
            "the dev estimator answered none of the dev pairs".into(),
        ));
    }
    let n = evaluated as f64;
    Ok(EvalRecord {
        step,
        l2: sums[0] / n,
        cosine: sums[1] / n,
        normdiff: sums[2] / n,
        macro_f1: macro_f1(proxy, setup.dev_examples)?,
    })
}
