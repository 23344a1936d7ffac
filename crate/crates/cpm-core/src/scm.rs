//! Synthetic structural causal model.
//!
//! The generative story: exogenous seeds `(u, v)` determine everything.
//! The u-stream draws each concept's value (and the rare label jitter); the
//! v-stream determines the "writing" — which concepts actually emit their
//! indicative tokens, the noise tokens that pad the sequence, and the final
//! shuffle. The sentiment label is a monotone bucketing of the summed concept
//! values.
//!
//! Every random choice is keyed by `(seed, stream, counter)` through
//! [`crate::rng::mix`], never drawn from shared sequential state. That is
//! what makes true counterfactuals work: regenerating an example with one
//! concept forced re-uses bit-identical draws for every other choice, so
//! "all else held equal" is literal.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CoreError, Result};
use crate::rng::{bounded, mix, unit_f64, StreamRng};

// ───────────────────────────── concept values ─────────────────────────────

/// Ternary concept state. The integer encoding (−1, 0, +1) is part of the
/// data format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConceptValue {
    Negative,
    Unknown,
    Positive,
}

impl ConceptValue {
    pub const ALL: [ConceptValue; 3] =
        [ConceptValue::Negative, ConceptValue::Unknown, ConceptValue::Positive];

    /// Signed score used by the label rule.
    pub fn score(self) -> i64 {
        match self {
            ConceptValue::Negative => -1,
            ConceptValue::Unknown => 0,
            ConceptValue::Positive => 1,
        }
    }

    /// Dense index in value-major order (Negative, Unknown, Positive).
    pub fn class_index(self) -> usize {
        match self {
            ConceptValue::Negative => 0,
            ConceptValue::Unknown => 1,
            ConceptValue::Positive => 2,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn from_score(score: i64) -> Option<Self> {
        match score {
            -1 => Some(ConceptValue::Negative),
            0 => Some(ConceptValue::Unknown),
            1 => Some(ConceptValue::Positive),
            _ => None,
        }
    }

    /// Single-character code used in derived example ids.
    fn code(self) -> char {
        match self {
            ConceptValue::Negative => 'n',
            ConceptValue::Unknown => 'u',
            ConceptValue::Positive => 'p',
        }
    }
}

impl Serialize for ConceptValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_i64(self.score())
    }
}

impl<'de> Deserialize<'de> for ConceptValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        ConceptValue::from_score(raw)
            .ok_or_else(|| D::Error::custom(format!("concept value must be -1, 0, or 1, got {raw}")))
    }
}

// ───────────────────────────── configuration ─────────────────────────────

/// Parameters of the synthetic SCM.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    /// Number of mediating concepts.
    pub k: usize,
    /// Count of style (noise) token ids.
    pub vocab_noise: usize,
    /// Token ids reserved per (concept, value); an emitting concept
    /// contributes this whole set.
    pub tokens_per_concept_value: usize,
    /// Length of every example's token sequence.
    pub seq_len: usize,
    /// Per-concept categorical prior over (Negative, Unknown, Positive).
    /// Empty means uniform for every concept.
    pub concept_priors: Vec<[f64; 3]>,
    /// Probability of a ±1 label jitter.
    pub label_noise: f64,
    /// Probability that a non-Unknown concept emits its token set.
    pub emit_prob: f64,
    /// Per-token resampling rate for human-like counterfactual style noise.
    pub p_style: f64,
    /// Rate of null-effect pairs in the sampled pair-building strategy.
    pub null_rate: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            k: 4,
            vocab_noise: 32,
            tokens_per_concept_value: 3,
            seq_len: 16,
            concept_priors: Vec::new(),
            label_noise: 0.05,
            emit_prob: 0.9,
            p_style: 0.15,
            null_rate: 0.1,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(CoreError::Config("k must be at least 1".into()));
        }
        if self.seq_len < self.k {
            return Err(CoreError::Config(format!(
                "seq_len ({}) must be at least k ({})",
                self.seq_len, self.k
            )));
        }
        if self.vocab_noise < 1 {
            return Err(CoreError::Config("vocab_noise must be at least 1".into()));
        }
        if self.tokens_per_concept_value < 1 {
            return Err(CoreError::Config("tokens_per_concept_value must be at least 1".into()));
        }
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("emit_prob", self.emit_prob),
            ("p_style", self.p_style),
            ("null_rate", self.null_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !self.concept_priors.is_empty() {
            if self.concept_priors.len() != self.k {
                return Err(CoreError::Config(format!(
                    "concept_priors has {} rows, expected k = {}",
                    self.concept_priors.len(),
                    self.k
                )));
            }
            for (i, row) in self.concept_priors.iter().enumerate() {
                if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || row.iter().sum::<f64>() <= 0.0 {
                    return Err(CoreError::Config(format!(
                        "concept_priors[{i}] must be nonnegative with positive sum"
                    )));
                }
            }
        }
        Ok(())
    }

    fn prior(&self, concept: usize) -> [f64; 3] {
        if self.concept_priors.is_empty() {
            [1.0, 1.0, 1.0]
        } else {
            self.concept_priors[concept]
        }
    }
}

// ───────────────────────────── vocabulary layout ─────────────────────────────

/// Fixed vocabulary layout: id 0 is PAD; then `3·k·t` concept tokens in
/// (concept-major, value-major) order — Unknown's ids are reserved but never
/// emitted; then `vocab_noise` style tokens; then `3·k` intervention tokens
/// in the same (concept-major, value-major) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub k: usize,
    pub tokens_per_concept_value: usize,
    pub vocab_noise: usize,
}

pub const PAD_TOKEN: usize = 0;

impl VocabLayout {
    pub fn from_config(cfg: &ScmConfig) -> Self {
        Self {
            k: cfg.k,
            tokens_per_concept_value: cfg.tokens_per_concept_value,
            vocab_noise: cfg.vocab_noise,
        }
    }

    pub fn vocab_size(&self) -> usize {
        1 + 3 * self.k * self.tokens_per_concept_value + self.vocab_noise + 3 * self.k
    }

    /// Token ids dedicated to `(concept, value)`.
    pub fn concept_token_range(&self, concept: usize, value: ConceptValue) -> Range<usize> {
        let t = self.tokens_per_concept_value;
        let start = 1 + (concept * 3 + value.class_index()) * t;
        start..start + t
    }

    pub fn noise_start(&self) -> usize {
        1 + 3 * self.k * self.tokens_per_concept_value
    }

    pub fn noise_range(&self) -> Range<usize> {
        self.noise_start()..self.noise_start() + self.vocab_noise
    }

    pub fn intervention_start(&self) -> usize {
        self.noise_start() + self.vocab_noise
    }

    /// The dedicated token id for an intervention description.
    pub fn intervention_token(&self, edit: &InterventionDescriptor) -> usize {
        self.intervention_start() + edit.concept * 3 + edit.target.class_index()
    }

    pub fn is_noise(&self, id: usize) -> bool {
        self.noise_range().contains(&id)
    }

    pub fn is_concept_token(&self, id: usize) -> bool {
        (1..self.noise_start()).contains(&id)
    }

    /// Which (concept, value) a concept token id belongs to.
    pub fn concept_of_token(&self, id: usize) -> Option<(usize, ConceptValue)> {
        if !self.is_concept_token(id) {
            return None;
        }
        let slot = (id - 1) / self.tokens_per_concept_value;
        let concept = slot / 3;
        let value = ConceptValue::from_class_index(slot % 3)?;
        Some((concept, value))
    }
}

// ───────────────────────────── domain records ─────────────────────────────

/// One generated text stand-in: a token sequence plus the latent state that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    pub concepts: Vec<ConceptValue>,
    pub label: usize,
    pub u_seed: u64,
    pub v_seed: u64,
}

/// A concept intervention `C_i ← target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionDescriptor {
    pub concept: usize,
    pub target: ConceptValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    TrueCf,
    HumanLike,
    Sampled,
    Null,
}

/// Strategy used to construct approximate counterfactual training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    HumanLike,
    Sampled,
}

/// A (base, counterfactual) pair under one intervention description.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPair {
    pub base: Example,
    pub counterfactual: Example,
    pub edit: InterventionDescriptor,
    pub kind: PairKind,
}

impl CounterfactualPair {
    /// Stable identifier used in estimate dumps.
    pub fn pair_id(&self) -> String {
        format!(
            "{}>{}#c{}{}",
            self.base.id,
            self.counterfactual.id,
            self.edit.concept,
            self.edit.target.code()
        )
    }
}

// ───────────────────────────── stream ids ─────────────────────────────

// Keyed sub-streams of the generative process. Values are arbitrary but
// frozen: changing them changes every generated dataset.
const STREAM_CONCEPTS: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_EMIT: u64 = 3;
const STREAM_NOISE_FILL: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;
const STREAM_STYLE_COIN: u64 = 6;
const STREAM_STYLE_TOKEN: u64 = 7;
const STREAM_DATASET_U: u64 = 8;
const STREAM_DATASET_V: u64 = 9;
const STREAM_NULL_COIN: u64 = 10;
const STREAM_NULL_CONCEPT: u64 = 11;
const STREAM_PAIR_NOISE: u64 = 12;
const STREAM_SAMPLE_PICK: u64 = 13;

// ───────────────────────────── label rule ─────────────────────────────

/// Maps the summed concept score into 5 ordinal classes with thresholds at
/// −k/2, −k/6, k/6, k/2.
pub fn bucket_label(sum: i64, k: usize) -> usize {
    let s = sum as f64;
    let k = k as f64;
    if s <= -k / 2.0 {
        0
    } else if s <= -k / 6.0 {
        1
    } else if s < k / 6.0 {
        2
    } else if s < k / 2.0 {
        3
    } else {
        4
    }
}

fn jittered_label(base: usize, u_seed: u64, label_noise: f64) -> usize {
    if label_noise > 0.0 && unit_f64(mix(u_seed, STREAM_JITTER, 0)) < label_noise {
        if mix(u_seed, STREAM_JITTER, 1) & 1 == 1 {
            (base + 1).min(4)
        } else {
            base.saturating_sub(1)
        }
    } else {
        base
    }
}

// ───────────────────────────── generation ─────────────────────────────

/// Renders an example from its latent state. Pure in `(cfg, u_seed, v_seed,
/// concepts)`; the id is carried through untouched.
fn realize(
    cfg: &ScmConfig,
    id: String,
    u_seed: u64,
    v_seed: u64,
    concepts: Vec<ConceptValue>,
) -> Example {
    let layout = VocabLayout::from_config(cfg);
    let sum: i64 = concepts.iter().map(|c| c.score()).sum();
    let label = jittered_label(bucket_label(sum, cfg.k), u_seed, cfg.label_noise);

    let mut tokens: Vec<usize> = Vec::with_capacity(cfg.seq_len);
    for (i, &value) in concepts.iter().enumerate() {
        if value != ConceptValue::Unknown
            && unit_f64(mix(v_seed, STREAM_EMIT, i as u64)) < cfg.emit_prob
        {
            tokens.extend(layout.concept_token_range(i, value));
        }
    }
    tokens.truncate(cfg.seq_len);
    let fill = cfg.seq_len - tokens.len();
    for slot in 0..fill {
        let pick = bounded(mix(v_seed, STREAM_NOISE_FILL, slot as u64), cfg.vocab_noise);
        tokens.push(layout.noise_start() + pick);
    }
    StreamRng::new(v_seed, STREAM_SHUFFLE).shuffle(&mut tokens);

    Example { id, tokens, concepts, label, u_seed, v_seed }
}

fn draw_concepts(cfg: &ScmConfig, u_seed: u64) -> Vec<ConceptValue> {
    (0..cfg.k)
        .map(|i| {
            let word = mix(u_seed, STREAM_CONCEPTS, i as u64);
            let weights = cfg.prior(i);
            let total: f64 = weights.iter().sum();
            let mut mark = unit_f64(word) * total;
            for (idx, w) in weights.iter().enumerate() {
                mark -= w;
                if mark < 0.0 {
                    return ConceptValue::ALL[idx];
                }
            }
            ConceptValue::Positive
        })
        .collect()
}

/// Regenerates the example owned by `(u_seed, v_seed)` under `cfg`. The SCM
/// is a pure function of these inputs, so this reproduces a stored example
/// bit for bit.
pub fn regenerate_example(cfg: &ScmConfig, id: &str, u_seed: u64, v_seed: u64) -> Example {
    realize(cfg, id.to_string(), u_seed, v_seed, draw_concepts(cfg, u_seed))
}

/// Draws `n` examples deterministically from `(cfg, seed)`.
pub fn generate_dataset(cfg: &ScmConfig, n: usize, seed: u64) -> Result<Vec<Example>> {
    cfg.validate()?;
    if n == 0 {
        return Err(CoreError::Config("dataset size must be at least 1".into()));
    }
    Ok((0..n)
        .map(|j| {
            let u = mix(seed, STREAM_DATASET_U, j as u64);
            let v = mix(seed, STREAM_DATASET_V, j as u64);
            regenerate_example(cfg, &format!("ex{j:06}"), u, v)
        })
        .collect())
}

fn root_id(id: &str) -> &str {
    id.split('~').next().unwrap_or(id)
}

fn derived_id(base_id: &str, concepts: &[ConceptValue]) -> String {
    let code: String = concepts.iter().map(|v| v.code()).collect();
    format!("{}~{}", root_id(base_id), code)
}

/// The SCM-oracle counterfactual: same exogenous seeds, concept `i` forced
/// to the target, everything else re-rendered through identical draws.
///
/// The derived id encodes the full concept assignment, so edits commute and
/// repeated application is idempotent. A no-op edit returns the base
/// unchanged.
pub fn true_counterfactual(
    base: &Example,
    edit: &InterventionDescriptor,
    cfg: &ScmConfig,
) -> Result<Example> {
    if edit.concept >= base.concepts.len() {
        return Err(CoreError::Usage(format!(
            "edit concept {} out of range for {} concepts",
            edit.concept,
            base.concepts.len()
        )));
    }
    if base.concepts[edit.concept] == edit.target {
        return Ok(base.clone());
    }
    let mut concepts = base.concepts.clone();
    concepts[edit.concept] = edit.target;
    let id = derived_id(&base.id, &concepts);
    Ok(realize(cfg, id, base.u_seed, base.v_seed, concepts))
}

/// A true counterfactual with human-editor style noise: each noise token is
/// independently resampled with probability `cfg.p_style` under
/// `noise_seed`. Concept tokens, concept labels, and the sentiment label are
/// untouched.
pub fn humanlike_counterfactual(
    base: &Example,
    edit: &InterventionDescriptor,
    cfg: &ScmConfig,
    noise_seed: u64,
) -> Result<Example> {
    let mut cf = true_counterfactual(base, edit, cfg)?;
    if cfg.p_style == 0.0 {
        return Ok(cf);
    }
    let layout = VocabLayout::from_config(cfg);
    let noise_start = layout.noise_start();
    let mut touched = false;
    for (pos, token) in cf.tokens.iter_mut().enumerate() {
        if layout.is_noise(*token)
            && unit_f64(mix(noise_seed, STREAM_STYLE_COIN, pos as u64)) < cfg.p_style
        {
            let pick = bounded(mix(noise_seed, STREAM_STYLE_TOKEN, pos as u64), cfg.vocab_noise);
            if *token != noise_start + pick {
                touched = true;
            }
            *token = noise_start + pick;
        }
    }
    if touched {
        cf.id = format!("{}~h{noise_seed:016x}", cf.id);
    }
    Ok(cf)
}

/// Uniformly samples a pool member expressing `C_i ← target` while agreeing
/// with `base` on every other concept. `None` when no member matches.
pub fn sample_counterfactual<'p>(
    base: &Example,
    edit: &InterventionDescriptor,
    pool: &'p [Example],
    rng: &mut StreamRng,
) -> Option<&'p Example> {
    let matches: Vec<&Example> = pool
        .iter()
        .filter(|cand| {
            cand.concepts.len() == base.concepts.len()
                && cand.concepts[edit.concept] == edit.target
                && cand
                    .concepts
                    .iter()
                    .zip(&base.concepts)
                    .enumerate()
                    .all(|(j, (a, b))| j == edit.concept || a == b)
        })
        .collect();
    if matches.is_empty() {
        None
    } else {
        Some(matches[rng.index(matches.len())])
    }
}

/// Builds the training pair set for one strategy.
///
/// For every example and every `(concept, target ≠ current)` edit, the
/// chosen strategy produces a counterfactual (skipping edits the sampled
/// strategy cannot realize), and both orientations of the pair are emitted.
/// The sampled strategy additionally emits null-effect pairs — an example
/// paired with itself under a no-op edit — at rate `cfg.null_rate`.
pub fn build_pairs(
    dataset: &[Example],
    strategy: PairStrategy,
    cfg: &ScmConfig,
    seed: u64,
) -> Result<Vec<CounterfactualPair>> {
    if dataset.is_empty() {
        return Err(CoreError::Usage("build_pairs requires a nonempty dataset".into()));
    }
    let mut pairs = Vec::new();
    let mut pick_rng = StreamRng::new(seed, STREAM_SAMPLE_PICK);
    let mut edit_counter: u64 = 0;
    for (idx, example) in dataset.iter().enumerate() {
        for concept in 0..cfg.k {
            let current = example.concepts[concept];
            for target in ConceptValue::ALL {
                if target == current {
                    continue;
                }
                let edit = InterventionDescriptor { concept, target };
                let reverse = InterventionDescriptor { concept, target: current };
                match strategy {
                    PairStrategy::HumanLike => {
                        let noise_seed = mix(seed, STREAM_PAIR_NOISE, edit_counter);
                        let cf = humanlike_counterfactual(example, &edit, cfg, noise_seed)?;
                        pairs.push(CounterfactualPair {
                            base: example.clone(),
                            counterfactual: cf.clone(),
                            edit,
                            kind: PairKind::HumanLike,
                        });
                        pairs.push(CounterfactualPair {
                            base: cf,
                            counterfactual: example.clone(),
                            edit: reverse,
                            kind: PairKind::HumanLike,
                        });
                    }
                    PairStrategy::Sampled => {
                        if let Some(cf) =
                            sample_counterfactual(example, &edit, dataset, &mut pick_rng)
                        {
                            pairs.push(CounterfactualPair {
                                base: example.clone(),
                                counterfactual: cf.clone(),
                                edit,
                                kind: PairKind::Sampled,
                            });
                            pairs.push(CounterfactualPair {
                                base: cf.clone(),
                                counterfactual: example.clone(),
                                edit: reverse,
                                kind: PairKind::Sampled,
                            });
                        }
                    }
                }
                edit_counter += 1;
            }
        }
        if strategy == PairStrategy::Sampled
            && unit_f64(mix(seed, STREAM_NULL_COIN, idx as u64)) < cfg.null_rate
        {
            let concept = bounded(mix(seed, STREAM_NULL_CONCEPT, idx as u64), cfg.k);
            pairs.push(CounterfactualPair {
                base: example.clone(),
                counterfactual: example.clone(),
                edit: InterventionDescriptor { concept, target: example.concepts[concept] },
                kind: PairKind::Null,
            });
        }
    }
    Ok(pairs)
}

/// Enumerates every directed true-counterfactual pair for evaluation: for
/// each example and each `(concept, target ≠ current)` edit, the SCM-oracle
/// pair plus its mirror.
pub fn build_true_pairs(dataset: &[Example], cfg: &ScmConfig) -> Result<Vec<CounterfactualPair>> {
    if dataset.is_empty() {
        return Err(CoreError::Usage("build_true_pairs requires a nonempty dataset".into()));
    }
    let mut pairs = Vec::new();
    for example in dataset {
        for concept in 0..cfg.k {
            let current = example.concepts[concept];
            for target in ConceptValue::ALL {
                if target == current {
                    continue;
                }
                let edit = InterventionDescriptor { concept, target };
                let cf = true_counterfactual(example, &edit, cfg)?;
                pairs.push(CounterfactualPair {
                    base: example.clone(),
                    counterfactual: cf.clone(),
                    edit,
                    kind: PairKind::TrueCf,
                });
                pairs.push(CounterfactualPair {
                    base: cf,
                    counterfactual: example.clone(),
                    edit: InterventionDescriptor { concept, target: current },
                    kind: PairKind::TrueCf,
                });
            }
        }
    }
    Ok(pairs)
}

/// Index examples by id (bases plus any derived counterfactuals).
pub fn example_index<'a, I: IntoIterator<Item = &'a Example>>(
    examples: I,
) -> BTreeMap<String, Example> {
    examples.into_iter().map(|e| (e.id.clone(), e.clone())).collect()
}
