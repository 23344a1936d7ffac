//! Encoder architectures, intervention sites, and checkpoints.
//!
//! One architecture serves every role in the pipeline: token embeddings are
//! mean-pooled into a bag-of-embeddings vector, pushed through `L` ReLU
//! layers, and read out by a linear head with softmax. The black box ℕ, the
//! proxies, and (with per-concept heads) the concept predictor used by the
//! S-Learner are all instances of it.
//!
//! Concept `i`'s **intervention site** is the slice
//! `[i·site_width, (i+1)·site_width)` of the designated hidden layer's
//! activation; sites are disjoint by construction and any leftover width is
//! unassigned residual. Proxies trained with interchange interventions carry
//! one probe head per concept (a one-hidden-layer MLP from the site slice to
//! the three concept classes) so concept values can be predicted from the
//! sites themselves.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    interchange_forward, InterventionSite, ModelTrace, NodeId, SitePatch, Tape, TapeModel, Tensor,
};
use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::scm::{InterventionDescriptor, VocabLayout};

/// Number of sentiment classes; the bucket rule and effect vectors assume it.
pub const NUM_CLASSES: usize = 5;
/// Number of concept classes (Negative, Unknown, Positive).
pub const CONCEPT_CLASSES: usize = 3;

// ───────────────────────────── configuration ─────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Number of hidden layers L.
    pub hidden_layers: usize,
    /// Hidden layer width w.
    pub hidden_width: usize,
    /// Output classes; fixed at 5.
    pub classes: usize,
    /// 1-based index of the hidden layer holding the intervention sites.
    pub intervention_layer: usize,
    /// Width w_c of each concept's site slice.
    pub site_width: usize,
    /// Hidden width of each concept probe head.
    pub probe_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: VocabLayout::from_config(&crate::scm::ScmConfig::default()).vocab_size(),
            embed_dim: 32,
            hidden_layers: 3,
            hidden_width: 64,
            classes: NUM_CLASSES,
            intervention_layer: 2,
            site_width: 16,
            probe_hidden: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::Config("vocab_size must be at least 2".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_layers", self.hidden_layers),
            ("hidden_width", self.hidden_width),
            ("site_width", self.site_width),
            ("probe_hidden", self.probe_hidden),
        ] {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.classes != NUM_CLASSES {
            return Err(CoreError::Config(format!(
                "classes is fixed at {NUM_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.intervention_layer < 1 || self.intervention_layer > self.hidden_layers {
            return Err(CoreError::Config(format!(
                "intervention_layer must lie in 1..={}, got {}",
                self.hidden_layers, self.intervention_layer
            )));
        }
        Ok(())
    }

    /// Validates that `k` disjoint sites fit into the hidden width.
    pub fn validate_sites(&self, k: usize) -> Result<()> {
        self.validate()?;
        if k * self.site_width > self.hidden_width {
            return Err(CoreError::Config(format!(
                "{k} sites of width {} exceed hidden width {}",
                self.site_width, self.hidden_width
            )));
        }
        Ok(())
    }
}

/// The intervention site of concept `concept`: slice
/// `[concept·w_c, (concept+1)·w_c)` of the designated hidden layer. The
/// returned `layer` is the 0-based index into a forward trace's layer list.
pub fn site_for(cfg: &EncoderConfig, concept: usize) -> Result<InterventionSite> {
    let start = concept * cfg.site_width;
    let end = start + cfg.site_width;
    if end > cfg.hidden_width {
        return Err(CoreError::Usage(format!(
            "concept {concept} has no site: [{start}, {end}) exceeds hidden width {}",
            cfg.hidden_width
        )));
    }
    Ok(InterventionSite { layer: cfg.intervention_layer - 1, range: start..end })
}

// ───────────────────────────── parameters ─────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let scale = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::matrix(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect(),
        )
        .expect("init shapes are consistent");
        Self { weight, bias: Tensor::zeros(vec![fan_out]) }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(vec![fan_in, fan_out]), bias: Tensor::zeros(vec![fan_out]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub hidden: Affine,
    pub out: Affine,
}

/// Anything whose parameters can be walked in a canonical order. The
/// optimizer, checkpointing, and parameter diffs all rely on the order being
/// identical between `visit` and `visit_mut`.
pub trait ParamVisit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

// ───────────────────────────── encoder model ─────────────────────────────

/// A classifier instance: configuration plus parameters (and optional
/// per-concept probe heads).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub embedding: Tensor,
    pub layers: Vec<Affine>,
    pub output: Affine,
    pub probes: Vec<Probe>,
}

impl EncoderModel {
    /// Fresh seeded initialization: He-scaled normal weights, zero biases,
    /// embedding rows from N(0, 0.1²). `probe_count` heads are attached
    /// (zero for the black box and intervention-token proxies).
    pub fn init(cfg: EncoderConfig, probe_count: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if probe_count > 0 {
            cfg.validate_sites(probe_count)?;
        }
        let mut stream = 0u64;
        let mut next_rng = || {
            let rng = StreamRng::new(seed, stream);
            stream += 1;
            rng
        };
        let mut erng = next_rng();
        let embedding = Tensor::matrix(
            cfg.vocab_size,
            cfg.embed_dim,
            (0..cfg.vocab_size * cfg.embed_dim).map(|_| erng.normal() * 0.1).collect(),
        )
        .expect("init shapes are consistent");
        let mut layers = Vec::with_capacity(cfg.hidden_layers);
        for j in 0..cfg.hidden_layers {
            let fan_in = if j == 0 { cfg.embed_dim } else { cfg.hidden_width };
            layers.push(Affine::init(fan_in, cfg.hidden_width, &mut next_rng()));
        }
        let output = Affine::init(cfg.hidden_width, cfg.classes, &mut next_rng());
        let probes = (0..probe_count)
            .map(|_| Probe {
                hidden: Affine::init(cfg.site_width, cfg.probe_hidden, &mut next_rng()),
                out: Affine::init(cfg.probe_hidden, CONCEPT_CLASSES, &mut next_rng()),
            })
            .collect();
        Ok(Self { cfg, embedding, layers, output, probes })
    }

    pub fn k_probes(&self) -> usize {
        self.probes.len()
    }

    /// Pushes all parameters onto a tape once; forwards for any number of
    /// examples can then share them, so one backward pass accumulates
    /// gradients across a whole batch.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundEncoder<'m> {
        let embedding = tape.leaf(self.embedding.clone());
        let layers = self
            .layers
            .iter()
            .map(|a| (tape.leaf(a.weight.clone()), tape.leaf(a.bias.clone())))
            .collect();
        let output = (tape.leaf(self.output.weight.clone()), tape.leaf(self.output.bias.clone()));
        let probes = self
            .probes
            .iter()
            .map(|p| {
                (
                    (tape.leaf(p.hidden.weight.clone()), tape.leaf(p.hidden.bias.clone())),
                    (tape.leaf(p.out.weight.clone()), tape.leaf(p.out.bias.clone())),
                )
            })
            .collect();
        BoundEncoder { model: self, embedding, layers, output, probes }
    }

    /// Class probabilities for a token sequence (inference convenience).
    pub fn probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let trace = bound.forward(&mut tape, tokens)?;
        Ok(tape.value(trace.probs).data().to_vec())
    }

    /// Raw logits for a token sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let trace = bound.forward(&mut tape, tokens)?;
        Ok(tape.value(trace.logits).data().to_vec())
    }

    /// Probabilities after substituting the site slice computed on `source`
    /// into the forward pass of `base`.
    pub fn interchange_probs(
        &self,
        base: &[usize],
        source: &[usize],
        site: &InterventionSite,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let trace = interchange_forward(&mut tape, &bound, base, source, site)?;
        Ok(tape.value(trace.probs).data().to_vec())
    }

    /// Per-concept class predictions (0 = Negative, 1 = Unknown,
    /// 2 = Positive) from the probe heads.
    pub fn probe_predictions(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if self.probes.is_empty() {
            return Err(CoreError::Usage("model has no probe heads".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let trace = bound.forward(&mut tape, tokens)?;
        (0..self.probes.len())
            .map(|concept| {
                let logits = bound.probe_logits(&mut tape, &trace, concept)?;
                Ok(argmax(tape.value(logits).data()))
            })
            .collect()
    }
}

impl ParamVisit for EncoderModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embedding", &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.weight"), &layer.weight);
            f(&format!("layer{i}.bias"), &layer.bias);
        }
        f("output.weight", &self.output.weight);
        f("output.bias", &self.output.bias);
        for (i, probe) in self.probes.iter().enumerate() {
            f(&format!("probe{i}.hidden.weight"), &probe.hidden.weight);
            f(&format!("probe{i}.hidden.bias"), &probe.hidden.bias);
            f(&format!("probe{i}.out.weight"), &probe.out.weight);
            f(&format!("probe{i}.out.bias"), &probe.out.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embedding", &mut self.embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), &mut layer.weight);
            f(&format!("layer{i}.bias"), &mut layer.bias);
        }
        f("output.weight", &mut self.output.weight);
        f("output.bias", &mut self.output.bias);
        for (i, probe) in self.probes.iter_mut().enumerate() {
            f(&format!("probe{i}.hidden.weight"), &mut probe.hidden.weight);
            f(&format!("probe{i}.hidden.bias"), &mut probe.hidden.bias);
            f(&format!("probe{i}.out.weight"), &mut probe.out.weight);
            f(&format!("probe{i}.out.bias"), &mut probe.out.bias);
        }
    }
}

/// Index of the largest component (first one on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Parameters of an encoder bound to one tape.
pub struct BoundEncoder<'m> {
    pub model: &'m EncoderModel,
    pub embedding: NodeId,
    layers: Vec<(NodeId, NodeId)>,
    output: (NodeId, NodeId),
    probes: Vec<((NodeId, NodeId), (NodeId, NodeId))>,
}

impl BoundEncoder<'_> {
    /// Tape nodes of all parameters, in the canonical [`ParamVisit`] order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut nodes = vec![self.embedding];
        for &(w, b) in &self.layers {
            nodes.push(w);
            nodes.push(b);
        }
        nodes.push(self.output.0);
        nodes.push(self.output.1);
        for &((hw, hb), (ow, ob)) in &self.probes {
            nodes.extend([hw, hb, ow, ob]);
        }
        nodes
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<ModelTrace> {
        self.forward_patched(tape, tokens, None)
    }

    pub fn forward_patched(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        patch: Option<SitePatch>,
    ) -> Result<ModelTrace> {
        let vocab = self.model.cfg.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(CoreError::Usage(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        if tokens.is_empty() {
            return Err(CoreError::Usage("cannot encode an empty token sequence".into()));
        }
        let embedded = tape.embed_lookup(self.embedding, tokens)?;
        self.trunk(tape, embedded, patch)
    }

    /// Forward from an explicit `[n, d]` embedding node (integrated
    /// gradients interpolate in embedding space).
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        embedded: NodeId,
        patch: Option<SitePatch>,
    ) -> Result<ModelTrace> {
        self.trunk(tape, embedded, patch)
    }

    fn trunk(
        &self,
        tape: &mut Tape,
        embedded: NodeId,
        patch: Option<SitePatch>,
    ) -> Result<ModelTrace> {
        if let Some(p) = &patch {
            if p.layer >= self.layers.len() {
                return Err(CoreError::Config(format!(
                    "patch layer {} does not exist (model has {} hidden layers)",
                    p.layer,
                    self.layers.len()
                )));
            }
            if p.range.end > self.model.cfg.hidden_width {
                return Err(CoreError::Config(format!(
                    "patch range {:?} exceeds hidden width {}",
                    p.range, self.model.cfg.hidden_width
                )));
            }
        }
        let pooled = tape.mean_pool(embedded)?;
        let mut h = pooled;
        let mut layer_nodes = Vec::with_capacity(self.layers.len());
        for (j, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matvec(h, w)?;
            h = tape.add_bias(h, b)?;
            h = tape.relu(h)?;
            if let Some(p) = patch.as_ref().filter(|p| p.layer == j) {
                h = tape.slice_replace(h, p.value, p.range.clone())?;
            }
            layer_nodes.push(h);
        }
        let pre = tape.matvec(h, self.output.0)?;
        let logits = tape.add_bias(pre, self.output.1)?;
        let probs = tape.softmax(logits)?;
        Ok(ModelTrace { embedded, pooled, layers: layer_nodes, logits, probs })
    }

    /// Probe head logits (3 classes) for one concept, reading the site slice
    /// of an existing trace. Gradients flow into the trunk through the slice.
    pub fn probe_logits(
        &self,
        tape: &mut Tape,
        trace: &ModelTrace,
        concept: usize,
    ) -> Result<NodeId> {
        let ((hw, hb), (ow, ob)) = *self.probes.get(concept).ok_or_else(|| {
            CoreError::Usage(format!(
                "concept {concept} has no probe head ({} attached)",
                self.probes.len()
            ))
        })?;
        let site = site_for(&self.model.cfg, concept)?;
        let slice = tape.slice(trace.layers[site.layer], site.range)?;
        let mut h = tape.matvec(slice, hw)?;
        h = tape.add_bias(h, hb)?;
        h = tape.relu(h)?;
        let out = tape.matvec(h, ow)?;
        tape.add_bias(out, ob)
    }
}

impl TapeModel for BoundEncoder<'_> {
    fn forward_on(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        patch: Option<SitePatch>,
    ) -> Result<ModelTrace> {
        self.forward_patched(tape, tokens, patch)
    }

    fn layer_width(&self, layer: usize) -> Option<usize> {
        (layer < self.layers.len()).then_some(self.model.cfg.hidden_width)
    }
}

// ───────────────────────────── intervention tokens ─────────────────────────────

/// Appends the dedicated intervention token for `edit` to a token sequence.
pub fn append_intervention_token(
    tokens: &[usize],
    edit: &InterventionDescriptor,
    layout: &VocabLayout,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.extend_from_slice(tokens);
    out.push(layout.intervention_token(edit));
    out
}

/// Initializes a proxy from the black box: identical weights, with the
/// intervention-token embedding rows re-drawn from a seeded N(0, 0.02²) and
/// `probe_count` fresh probe heads attached.
pub fn proxy_from_blackbox(
    blackbox: &EncoderModel,
    layout: &VocabLayout,
    probe_count: usize,
    seed: u64,
) -> Result<EncoderModel> {
    if layout.vocab_size() != blackbox.cfg.vocab_size {
        return Err(CoreError::Config(format!(
            "vocabulary layout size {} does not match model vocab {}",
            layout.vocab_size(),
            blackbox.cfg.vocab_size
        )));
    }
    let mut proxy = blackbox.clone();
    let d = proxy.cfg.embed_dim;
    let mut rng = StreamRng::new(seed, 90);
    let start = layout.intervention_start();
    for row in start..layout.vocab_size() {
        for j in 0..d {
            proxy.embedding.data_mut()[row * d + j] = rng.normal() * 0.02;
        }
    }
    if probe_count > 0 {
        proxy.cfg.validate_sites(probe_count)?;
        let cfg = proxy.cfg.clone();
        proxy.probes = (0..probe_count)
            .map(|i| {
                let mut hrng = StreamRng::new(seed, 91 + 2 * i as u64);
                let mut orng = StreamRng::new(seed, 92 + 2 * i as u64);
                Probe {
                    hidden: Affine::init(cfg.site_width, cfg.probe_hidden, &mut hrng),
                    out: Affine::init(cfg.probe_hidden, CONCEPT_CLASSES, &mut orng),
                }
            })
            .collect();
    }
    Ok(proxy)
}

// ───────────────────────────── concept predictor ─────────────────────────────

/// The S-Learner's concept predictor ℬ: the shared trunk with one linear
/// 3-way head per concept reading the last hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub cfg: EncoderConfig,
    pub embedding: Tensor,
    pub layers: Vec<Affine>,
    pub heads: Vec<Affine>,
}

impl ConceptModel {
    pub fn init(cfg: EncoderConfig, k: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if k == 0 {
            return Err(CoreError::Config("concept predictor needs at least one concept".into()));
        }
        let mut stream = 1000u64;
        let mut next_rng = || {
            let rng = StreamRng::new(seed, stream);
            stream += 1;
            rng
        };
        let mut erng = next_rng();
        let embedding = Tensor::matrix(
            cfg.vocab_size,
            cfg.embed_dim,
            (0..cfg.vocab_size * cfg.embed_dim).map(|_| erng.normal() * 0.1).collect(),
        )
        .expect("init shapes are consistent");
        let mut layers = Vec::with_capacity(cfg.hidden_layers);
        for j in 0..cfg.hidden_layers {
            let fan_in = if j == 0 { cfg.embed_dim } else { cfg.hidden_width };
            layers.push(Affine::init(fan_in, cfg.hidden_width, &mut next_rng()));
        }
        let heads =
            (0..k).map(|_| Affine::init(cfg.hidden_width, CONCEPT_CLASSES, &mut next_rng())).collect();
        Ok(Self { cfg, embedding, layers, heads })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundConceptModel<'m> {
        let embedding = tape.leaf(self.embedding.clone());
        let layers = self
            .layers
            .iter()
            .map(|a| (tape.leaf(a.weight.clone()), tape.leaf(a.bias.clone())))
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|a| (tape.leaf(a.weight.clone()), tape.leaf(a.bias.clone())))
            .collect();
        BoundConceptModel { model: self, embedding, layers, heads }
    }

    /// Predicted class index (0/1/2) per concept.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = bound.forward(&mut tape, tokens)?;
        Ok(logits.into_iter().map(|id| argmax(tape.value(id).data())).collect())
    }
}

impl ParamVisit for ConceptModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embedding", &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.weight"), &layer.weight);
            f(&format!("layer{i}.bias"), &layer.bias);
        }
        for (i, head) in self.heads.iter().enumerate() {
            f(&format!("head{i}.weight"), &head.weight);
            f(&format!("head{i}.bias"), &head.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embedding", &mut self.embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), &mut layer.weight);
            f(&format!("layer{i}.bias"), &mut layer.bias);
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.weight"), &mut head.weight);
            f(&format!("head{i}.bias"), &mut head.bias);
        }
    }
}

pub struct BoundConceptModel<'m> {
    model: &'m ConceptModel,
    embedding: NodeId,
    layers: Vec<(NodeId, NodeId)>,
    heads: Vec<(NodeId, NodeId)>,
}

impl BoundConceptModel<'_> {
    /// Tape nodes of all parameters, in the canonical [`ParamVisit`] order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut nodes = vec![self.embedding];
        for &(w, b) in &self.layers {
            nodes.push(w);
            nodes.push(b);
        }
        for &(w, b) in &self.heads {
            nodes.push(w);
            nodes.push(b);
        }
        nodes
    }

    /// Head logits (one 3-vector per concept).
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Vec<NodeId>> {
        let vocab = self.model.cfg.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(CoreError::Usage(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        let embedded = tape.embed_lookup(self.embedding, tokens)?;
        let pooled = tape.mean_pool(embedded)?;
        let mut h = pooled;
        for &(w, b) in &self.layers {
            h = tape.matvec(h, w)?;
            h = tape.add_bias(h, b)?;
            h = tape.relu(h)?;
        }
        self.heads
            .iter()
            .map(|&(w, b)| {
                let out = tape.matvec(h, w)?;
                tape.add_bias(out, b)
            })
            .collect()
    }
}

// ───────────────────────────── checkpoints ─────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model format: a config/version header plus named parameter
/// arrays with base-10 decimal values (JSON round-trips f64 exactly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: EncoderConfig,
    pub params: Vec<NamedArray>,
}

impl EncoderModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = Vec::new();
        self.visit_params(&mut |name, tensor| {
            params.push(NamedArray {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                data: tensor.data().to_vec(),
            });
        });
        Checkpoint { version: CHECKPOINT_VERSION, config: self.cfg.clone(), params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.config.validate()?;
        let probe_count = ck
            .params
            .iter()
            .filter(|p| p.name.starts_with("probe") && p.name.ends_with(".hidden.weight"))
            .count();
        let cfg = ck.config.clone();
        let mut model = EncoderModel {
            embedding: Tensor::zeros(vec![cfg.vocab_size, cfg.embed_dim]),
            layers: (0..cfg.hidden_layers)
                .map(|j| {
                    let fan_in = if j == 0 { cfg.embed_dim } else { cfg.hidden_width };
                    Affine::zeros(fan_in, cfg.hidden_width)
                })
                .collect(),
            output: Affine::zeros(cfg.hidden_width, cfg.classes),
            probes: (0..probe_count)
                .map(|_| Probe {
                    hidden: Affine::zeros(cfg.site_width, cfg.probe_hidden),
                    out: Affine::zeros(cfg.probe_hidden, CONCEPT_CLASSES),
                })
                .collect(),
            cfg,
        };
        let mut by_name: std::collections::BTreeMap<&str, &NamedArray> =
            ck.params.iter().map(|p| (p.name.as_str(), p)).collect();
        if by_name.len() != ck.params.len() {
            return Err(CoreError::Format("duplicate parameter name in checkpoint".into()));
        }
        let mut failure: Option<String> = None;
        model.visit_params_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => failure = Some(format!("checkpoint is missing parameter '{name}'")),
                Some(arr) => {
                    if arr.shape != tensor.shape() {
                        failure = Some(format!(
                            "parameter '{name}' has shape {:?}, expected {:?}",
                            arr.shape,
                            tensor.shape()
                        ));
                    } else {
                        tensor.data_mut().copy_from_slice(&arr.data);
                    }
                }
            }
        });
        if let Some(msg) = failure {
            return Err(CoreError::Format(msg));
        }
        if let Some((name, _)) = by_name.iter().next() {
            return Err(CoreError::Format(format!("unexpected parameter '{name}' in checkpoint")));
        }
        if !model.embedding.all_finite() {
            return Err(CoreError::Format("checkpoint contains non-finite values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io_at(path, e))?;
        serde_json::to_writer(BufWriter::new(file), &self.to_checkpoint())
            .map_err(|e| CoreError::Format(format!("failed to write checkpoint: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CoreError::io_at(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CoreError::Format(format!("{}: failed to parse checkpoint: {e}", path.display())))?;
        Self::from_checkpoint(&ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{ConceptValue, ScmConfig};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 30,
            embed_dim: 6,
            hidden_layers: 2,
            hidden_width: 8,
            intervention_layer: 1,
            site_width: 2,
            probe_hidden: 4,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_initialized_model_outputs_uniform_probabilities() {
        let mut model = EncoderModel::init(tiny_cfg(), 0, 1).unwrap();
        model.visit_params_mut(&mut |_, t| t.data_mut().fill(0.0));
        let probs = model.probs(&[1, 2, 3]).unwrap();
        assert_eq!(probs, vec![0.2; 5]);
    }

    #[test]
    fn mean_pool_makes_the_encoder_order_invariant() {
        let model = EncoderModel::init(tiny_cfg(), 0, 2).unwrap();
        let a = model.probs(&[5, 9, 1, 22, 9]).unwrap();
        let b = model.probs(&[9, 22, 1, 9, 5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn outputs_form_a_simplex() {
        let model = EncoderModel::init(tiny_cfg(), 0, 3).unwrap();
        let probs = model.probs(&[0, 7, 13, 29]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn unknown_token_ids_are_rejected() {
        let model = EncoderModel::init(tiny_cfg(), 0, 4).unwrap();
        assert!(matches!(model.probs(&[1, 30]), Err(CoreError::Usage(_))));
    }

    #[test]
    fn intervention_token_append_and_strip_roundtrip() {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let tokens = vec![3, 14, 15];
        let edit = InterventionDescriptor { concept: 2, target: ConceptValue::Negative };
        let mut appended = append_intervention_token(&tokens, &edit, &layout);
        assert_eq!(appended.len(), tokens.len() + 1);
        appended.pop();
        assert_eq!(appended, tokens);
    }

    #[test]
    fn first_intervention_token_is_concept_zero_negative() {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let edit = InterventionDescriptor { concept: 0, target: ConceptValue::Negative };
        assert_eq!(layout.intervention_token(&edit), layout.intervention_start());
    }

    #[test]
    fn intervention_tokens_are_injective_over_all_edits() {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let mut seen = std::collections::BTreeSet::new();
        for concept in 0..scm.k {
            for target in ConceptValue::ALL {
                let id = layout.intervention_token(&InterventionDescriptor { concept, target });
                assert!(seen.insert(id), "token id {id} reused");
                assert!(id >= layout.intervention_start() && id < layout.vocab_size());
            }
        }
        assert_eq!(seen.len(), 3 * scm.k);
    }

    #[test]
    fn sites_tile_the_layer_from_zero() {
        let cfg = EncoderConfig::default();
        let site0 = site_for(&cfg, 0).unwrap();
        assert_eq!(site0.range, 0..16);
        assert_eq!(site0.layer, cfg.intervention_layer - 1);
        let mut covered = vec![false; cfg.hidden_width];
        for concept in 0..4 {
            let site = site_for(&cfg, concept).unwrap();
            for j in site.range {
                assert!(!covered[j], "sites must be disjoint");
                covered[j] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "4 sites of width 16 cover [0, 64)");
    }

    #[test]
    fn oversized_site_requests_are_rejected() {
        let cfg = EncoderConfig::default();
        assert!(matches!(site_for(&cfg, 4), Err(CoreError::Usage(_))));
        assert!(matches!(cfg.validate_sites(5), Err(CoreError::Config(_))));
        assert!(cfg.validate_sites(4).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = EncoderModel::init(tiny_cfg(), 3, 77).unwrap();
        model.save(&path).unwrap();
        let loaded = EncoderModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        let tokens = [4usize, 17, 2, 8];
        assert_eq!(model.probs(&tokens).unwrap(), loaded.probs(&tokens).unwrap());
        assert_eq!(
            model.probe_predictions(&tokens).unwrap(),
            loaded.probe_predictions(&tokens).unwrap()
        );
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let model = EncoderModel::init(tiny_cfg(), 0, 5).unwrap();
        let mut ck = model.to_checkpoint();
        ck.params[0].data.push(1.0);
        ck.params[0].shape = vec![31, 6];
        assert!(matches!(EncoderModel::from_checkpoint(&ck), Err(CoreError::Format(_))));

        let mut ck = model.to_checkpoint();
        ck.params.pop();
        assert!(matches!(EncoderModel::from_checkpoint(&ck), Err(CoreError::Format(_))));

        let mut ck = model.to_checkpoint();
        ck.version = 99;
        assert!(matches!(EncoderModel::from_checkpoint(&ck), Err(CoreError::Format(_))));
    }

    #[test]
    fn self_interchange_on_the_encoder_is_bitwise() {
        let model = EncoderModel::init(tiny_cfg(), 0, 6).unwrap();
        let tokens = [1usize, 9, 14, 3];
        let site = site_for(&model.cfg, 1).unwrap();
        let plain = model.probs(&tokens).unwrap();
        let patched = model.interchange_probs(&tokens, &tokens, &site).unwrap();
        assert_eq!(plain, patched);
    }

    #[test]
    fn proxy_initialization_redraws_only_intervention_rows() {
        let scm = ScmConfig::default();
        let layout = VocabLayout::from_config(&scm);
        let cfg = EncoderConfig { vocab_size: layout.vocab_size(), ..EncoderConfig::default() };
        let blackbox = EncoderModel::init(cfg, 0, 8).unwrap();
        let proxy = proxy_from_blackbox(&blackbox, &layout, scm.k, 9).unwrap();
        let d = blackbox.cfg.embed_dim;
        for row in 0..layout.vocab_size() {
            let same = blackbox.embedding.data()[row * d..(row + 1) * d]
                == proxy.embedding.data()[row * d..(row + 1) * d];
            if row < layout.intervention_start() {
                assert!(same, "non-intervention row {row} must be copied verbatim");
            } else {
                assert!(!same, "intervention row {row} must be re-drawn");
            }
        }
        assert_eq!(proxy.k_probes(), scm.k);
        assert_eq!(blackbox.layers, proxy.layers);
        assert_eq!(blackbox.output, proxy.output);
    }

    #[test]
    fn concept_model_predicts_per_concept_classes() {
        let cfg = tiny_cfg();
        let model = ConceptModel::init(cfg, 3, 10).unwrap();
        let preds = model.predict(&[2, 5, 11]).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|&c| c < 3));
    }
}
