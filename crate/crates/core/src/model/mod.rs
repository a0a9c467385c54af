//! Desk-scale decoder-only transformer with an exactly decomposable residual
//! stream and edge/node-level intervention machinery.
//!
//! The residual stream is a plain running sum: embedding plus every attention
//! head output plus every MLP output, with no normalization layers. That keeps
//! `ResidPost(l) == Embed + sum of sublayer outputs` an exact identity, which
//! the projection-based reconstruction relies on. Gradients are accumulated by
//! an explicit reverse pass over the node graph (no autodiff), so the gradient
//! at every downstream read point is available for edge attribution.

mod backward;
mod forward;

pub use forward::ForwardRun;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};
use crate::rng::{normal_f64, rng_from_seed, Rng};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Hidden width of the MLP block; 0 means attention-only.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn has_mlp(&self) -> bool {
        self.d_mlp > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Embed,
    AttnHeadOut { layer: usize, head: usize },
    MlpOut { layer: usize },
    ResidPost { layer: usize },
    Logits,
}

impl NodeKind {
    /// Stage at which this node writes into the residual stream. Reads are
    /// only valid from strictly earlier stages.
    fn write_stage(&self) -> usize {
        match *self {
            NodeKind::Embed => 0,
            NodeKind::AttnHeadOut { layer, .. } => 2 * layer + 1,
            NodeKind::MlpOut { layer } => 2 * layer + 2,
            NodeKind::ResidPost { layer } => 2 * layer + 2,
            NodeKind::Logits => usize::MAX,
        }
    }

    /// Layer whose residual stream first contains this node's output.
    pub fn resident_layer(&self) -> Option<usize> {
        match *self {
            NodeKind::Embed => Some(0),
            NodeKind::AttnHeadOut { layer, .. } => Some(layer),
            NodeKind::MlpOut { layer } => Some(layer),
            NodeKind::ResidPost { layer } => Some(layer),
            NodeKind::Logits => None,
        }
    }
}

/// A single activation site: one node kind at one token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub position: usize,
}

impl NodeId {
    pub fn new(kind: NodeKind, position: usize) -> Self {
        NodeId { kind, position }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Embed => write!(f, "embed@{}", self.position),
            NodeKind::AttnHeadOut { layer, head } => {
                write!(f, "attn.l{layer}.h{head}@{}", self.position)
            }
            NodeKind::MlpOut { layer } => write!(f, "mlp.l{layer}@{}", self.position),
            NodeKind::ResidPost { layer } => write!(f, "resid.l{layer}@{}", self.position),
            NodeKind::Logits => write!(f, "logits@{}", self.position),
        }
    }
}

/// Where a downstream component reads the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DownstreamInput {
    AttnQ { layer: usize, head: usize },
    AttnK { layer: usize, head: usize },
    AttnV { layer: usize, head: usize },
    MlpIn { layer: usize },
    LogitsIn,
}

impl DownstreamInput {
    fn read_stage(&self, n_layers: usize) -> usize {
        match *self {
            DownstreamInput::AttnQ { layer, .. }
            | DownstreamInput::AttnK { layer, .. }
            | DownstreamInput::AttnV { layer, .. } => 2 * layer + 1,
            DownstreamInput::MlpIn { layer } => 2 * layer + 2,
            DownstreamInput::LogitsIn => 2 * n_layers + 1,
        }
    }

    /// Keys and values may be read from earlier positions; queries, MLP and
    /// logit reads are position-local.
    fn allows_earlier_upstream(&self) -> bool {
        matches!(
            self,
            DownstreamInput::AttnK { .. } | DownstreamInput::AttnV { .. }
        )
    }
}

/// One computational edge: an upstream node as read by one downstream input
/// at one position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub upstream: NodeId,
    pub input: DownstreamInput,
    /// Downstream position: the query position for attention reads, the read
    /// position for MLP and logit inputs.
    pub position: usize,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> ", self.upstream)?;
        match self.input {
            DownstreamInput::AttnQ { layer, head } => write!(f, "q.l{layer}.h{head}")?,
            DownstreamInput::AttnK { layer, head } => write!(f, "k.l{layer}.h{head}")?,
            DownstreamInput::AttnV { layer, head } => write!(f, "v.l{layer}.h{head}")?,
            DownstreamInput::MlpIn { layer } => write!(f, "mlpin.l{layer}")?,
            DownstreamInput::LogitsIn => write!(f, "logits")?,
        }
        write!(f, "@{}", self.position)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    TokenOutOfRange { token: TokenId, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    PositionOutOfRange { position: usize, len: usize },
    InvalidEdge { reason: &'static str },
    InvalidNode { reason: &'static str },
    ConflictingPatch,
    BadReplacement { expected: usize, got: usize },
    NonFiniteReplacement,
    MetricOutOfRange { reason: &'static str },
    MissingWeight { name: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} outside vocabulary of size {vocab}")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq {max}")
            }
            ModelError::EmptySequence => write!(f, "empty token sequence"),
            ModelError::PositionOutOfRange { position, len } => {
                write!(f, "position {position} outside sequence of length {len}")
            }
            ModelError::InvalidEdge { reason } => write!(f, "invalid edge: {reason}"),
            ModelError::InvalidNode { reason } => write!(f, "invalid node: {reason}"),
            ModelError::ConflictingPatch => write!(f, "conflicting patches on the same site"),
            ModelError::BadReplacement { expected, got } => {
                write!(f, "replacement has dim {got}, expected {expected}")
            }
            ModelError::NonFiniteReplacement => write!(f, "replacement contains non-finite values"),
            ModelError::MetricOutOfRange { reason } => write!(f, "metric out of range: {reason}"),
            ModelError::MissingWeight { name } => write!(f, "missing weight tensor {name:?}"),
        }
    }
}

/// Per-node activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    seq_len: usize,
    entries: BTreeMap<NodeId, Vector>,
}

impl ActivationCache {
    pub(crate) fn new(seq_len: usize, entries: BTreeMap<NodeId, Vector>) -> Self {
        ActivationCache { seq_len, entries }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, node: &NodeId) -> Option<&Vector> {
        self.entries.get(node)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Vector)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Key for the gradient at a downstream read point. `position` is the
/// downstream (query) position, `upstream_position` the position whose
/// residual contribution is being read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReadKey {
    pub input: DownstreamInput,
    pub position: usize,
    pub upstream_position: usize,
}

/// Gradients of a scalar metric with respect to node outputs and downstream
/// read inputs, produced against one forward run.
#[derive(Clone, Debug)]
pub struct GradientCache {
    pub(crate) nodes: BTreeMap<NodeId, Vector>,
    pub(crate) reads: BTreeMap<ReadKey, Vector>,
}

impl GradientCache {
    pub fn node(&self, node: &NodeId) -> Option<&Vector> {
        self.nodes.get(node)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// Gradient of the metric at the read point of `edge`, i.e. the gradient
    /// an edge attribution dots the activation difference against.
    pub fn edge_grad(&self, edge: &EdgeId) -> Option<&Vector> {
        self.reads.get(&ReadKey {
            input: edge.input,
            position: edge.position,
            upstream_position: edge.upstream.position,
        })
    }
}

/// Scalar objective read off the logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    /// `logits[positive] - logits[negative]` at `position`.
    LogitDiff {
        position: usize,
        positive: TokenId,
        negative: TokenId,
    },
    SingleLogit { position: usize, token: TokenId },
    /// `logits[token]^2` at `position`; handy as a curved objective.
    SquaredLogit { position: usize, token: TokenId },
}

impl Metric {
    pub fn logit_diff_at_last(prompt_len: usize, positive: TokenId, negative: TokenId) -> Metric {
        Metric::LogitDiff {
            position: prompt_len - 1,
            positive,
            negative,
        }
    }

    pub fn position(&self) -> usize {
        match *self {
            Metric::LogitDiff { position, .. }
            | Metric::SingleLogit { position, .. }
            | Metric::SquaredLogit { position, .. } => position,
        }
    }

    pub fn validate(&self, seq_len: usize, vocab: usize) -> Result<(), ModelError> {
        if self.position() >= seq_len {
            return Err(ModelError::MetricOutOfRange {
                reason: "metric position beyond sequence end",
            });
        }
        let tokens_ok = match *self {
            Metric::LogitDiff {
                positive, negative, ..
            } => positive < vocab && negative < vocab,
            Metric::SingleLogit { token, .. } | Metric::SquaredLogit { token, .. } => token < vocab,
        };
        if !tokens_ok {
            return Err(ModelError::MetricOutOfRange {
                reason: "metric token outside vocabulary",
            });
        }
        Ok(())
    }

    pub fn value(&self, logits: &[Vector]) -> f64 {
        match *self {
            Metric::LogitDiff {
                position,
                positive,
                negative,
            } => logits[position].0[positive] - logits[position].0[negative],
            Metric::SingleLogit { position, token } => logits[position].0[token],
            Metric::SquaredLogit { position, token } => {
                let v = logits[position].0[token];
                v * v
            }
        }
    }

    /// Gradient of the metric with respect to each position's logits.
    pub(crate) fn seeds(&self, logits: &[Vector], vocab: usize) -> Vec<Option<Vector>> {
        let mut seeds: Vec<Option<Vector>> = (0..logits.len()).map(|_| None).collect();
        match *self {
            Metric::LogitDiff {
                position,
                positive,
                negative,
            } => {
                let mut g = Vector::zeros(vocab);
                g.0[positive] += 1.0;
                g.0[negative] -= 1.0;
                seeds[position] = Some(g);
            }
            Metric::SingleLogit { position, token } => {
                let mut g = Vector::zeros(vocab);
                g.0[token] = 1.0;
                seeds[position] = Some(g);
            }
            Metric::SquaredLogit { position, token } => {
                let mut g = Vector::zeros(vocab);
                g.0[token] = 2.0 * logits[position].0[token];
                seeds[position] = Some(g);
            }
        }
        seeds
    }
}

/// Logit difference between two tokens at the final position.
pub fn logit_diff(logits: &[Vector], tok_a: TokenId, tok_b: TokenId) -> Result<f64, ModelError> {
    let last = logits.last().ok_or(ModelError::EmptySequence)?;
    if tok_a >= last.dim() || tok_b >= last.dim() {
        return Err(ModelError::TokenOutOfRange {
            token: tok_a.max(tok_b),
            vocab: last.dim(),
        });
    }
    Ok(last.0[tok_a] - last.0[tok_b])
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vector,
    pub b_k: Vector,
    pub b_v: Vector,
    pub w_o: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MlpParams {
    pub w_in: Matrix,
    pub b_in: Vector,
    pub w_out: Matrix,
    pub b_out: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub mlp: Option<MlpParams>,
}

/// All trainable tensors; also reused as the container shape for gradients
/// and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub(crate) embed: Matrix,
    pub(crate) pos: Matrix,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) unembed: Matrix,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    pub(crate) fn zeros(config: &ModelConfig) -> Self {
        let head = || HeadParams {
            w_q: Matrix::zeros(config.d_head, config.d_model),
            w_k: Matrix::zeros(config.d_head, config.d_model),
            w_v: Matrix::zeros(config.d_head, config.d_model),
            b_q: Vector::zeros(config.d_head),
            b_k: Vector::zeros(config.d_head),
            b_v: Vector::zeros(config.d_head),
            w_o: Matrix::zeros(config.d_model, config.d_head),
        };
        let mlp = config.has_mlp().then(|| MlpParams {
            w_in: Matrix::zeros(config.d_mlp, config.d_model),
            b_in: Vector::zeros(config.d_mlp),
            w_out: Matrix::zeros(config.d_model, config.d_mlp),
            b_out: Vector::zeros(config.d_model),
        });
        ModelParams {
            embed: Matrix::zeros(config.vocab_size, config.d_model),
            pos: Matrix::zeros(config.max_seq, config.d_model),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    heads: (0..config.n_heads).map(|_| head()).collect(),
                    mlp: mlp.clone(),
                })
                .collect(),
            unembed: Matrix::zeros(config.vocab_size, config.d_model),
        }
    }

    fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(config);
        for tensor in params.weight_tensors_mut() {
            for v in tensor {
                *v = INIT_STD * normal_f64(rng);
            }
        }
        params
    }

    /// Weight matrices only (biases stay zero at init).
    fn weight_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelParams {
            embed,
            pos,
            layers,
            unembed,
        } = self;
        let mut out: Vec<&mut [f64]> = alloc::vec![embed.data_mut(), pos.data_mut()];
        for layer in layers {
            for h in &mut layer.heads {
                out.push(h.w_q.data_mut());
                out.push(h.w_k.data_mut());
                out.push(h.w_v.data_mut());
                out.push(h.w_o.data_mut());
            }
            if let Some(m) = &mut layer.mlp {
                out.push(m.w_in.data_mut());
                out.push(m.w_out.data_mut());
            }
        }
        out.push(unembed.data_mut());
        out
    }

    /// Every trainable tensor in a fixed traversal order.
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelParams {
            embed,
            pos,
            layers,
            unembed,
        } = self;
        let mut out: Vec<&mut [f64]> = alloc::vec![embed.data_mut(), pos.data_mut()];
        for layer in layers {
            for h in &mut layer.heads {
                out.push(h.w_q.data_mut());
                out.push(h.w_k.data_mut());
                out.push(h.w_v.data_mut());
                out.push(h.b_q.0.as_mut_slice());
                out.push(h.b_k.0.as_mut_slice());
                out.push(h.b_v.0.as_mut_slice());
                out.push(h.w_o.data_mut());
            }
            if let Some(m) = &mut layer.mlp {
                out.push(m.w_in.data_mut());
                out.push(m.b_in.0.as_mut_slice());
                out.push(m.w_out.data_mut());
                out.push(m.b_out.0.as_mut_slice());
            }
        }
        out.push(unembed.data_mut());
        out
    }

    /// Named tensors in the same order as [`ModelParams::tensors_mut`]; used
    /// by persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        use alloc::format;
        let mut out: Vec<(String, &Matrix)> = alloc::vec![
            (String::from("embed"), &self.embed),
            (String::from("pos"), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("l{l}.h{h}.w_q"), &head.w_q));
                out.push((format!("l{l}.h{h}.w_k"), &head.w_k));
                out.push((format!("l{l}.h{h}.w_v"), &head.w_v));
                out.push((format!("l{l}.h{h}.w_o"), &head.w_o));
            }
            if let Some(m) = &layer.mlp {
                out.push((format!("l{l}.mlp.w_in"), &m.w_in));
                out.push((format!("l{l}.mlp.w_out"), &m.w_out));
            }
        }
        out.push((String::from("unembed"), &self.unembed));
        out
    }

    /// Named bias vectors; kept separate from matrices for persistence.
    pub fn named_biases(&self) -> Vec<(String, &Vector)> {
        use alloc::format;
        let mut out: Vec<(String, &Vector)> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("l{l}.h{h}.b_q"), &head.b_q));
                out.push((format!("l{l}.h{h}.b_k"), &head.b_k));
                out.push((format!("l{l}.h{h}.b_v"), &head.b_v));
            }
            if let Some(m) = &layer.mlp {
                out.push((format!("l{l}.mlp.b_in"), &m.b_in));
                out.push((format!("l{l}.mlp.b_out"), &m.b_out));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        use alloc::format;
        let ModelParams {
            embed,
            pos,
            layers,
            unembed,
        } = self;
        let mut out: Vec<(String, &mut [f64])> = alloc::vec![
            (String::from("embed"), embed.data_mut()),
            (String::from("pos"), pos.data_mut()),
        ];
        for (l, layer) in layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("l{l}.h{h}.w_q"), head.w_q.data_mut()));
                out.push((format!("l{l}.h{h}.w_k"), head.w_k.data_mut()));
                out.push((format!("l{l}.h{h}.w_v"), head.w_v.data_mut()));
                out.push((format!("l{l}.h{h}.w_o"), head.w_o.data_mut()));
            }
            if let Some(m) = &mut layer.mlp {
                out.push((format!("l{l}.mlp.w_in"), m.w_in.data_mut()));
                out.push((format!("l{l}.mlp.w_out"), m.w_out.data_mut()));
            }
        }
        out.push((String::from("unembed"), unembed.data_mut()));
        out
    }

    fn named_biases_mut(&mut self) -> Vec<(String, &mut [f64])> {
        use alloc::format;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("l{l}.h{h}.b_q"), head.b_q.0.as_mut_slice()));
                out.push((format!("l{l}.h{h}.b_k"), head.b_k.0.as_mut_slice()));
                out.push((format!("l{l}.h{h}.b_v"), head.b_v.0.as_mut_slice()));
            }
            if let Some(m) = &mut layer.mlp {
                out.push((format!("l{l}.mlp.b_in"), m.b_in.0.as_mut_slice()));
                out.push((format!("l{l}.mlp.b_out"), m.b_out.0.as_mut_slice()));
            }
        }
        out
    }
}

/// One named weight tensor, as exported to or imported from persistence.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// The transformer itself: immutable weights plus its configuration.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub(crate) params: ModelParams,
}

impl Model {
    /// Fresh model with seeded Gaussian weights.
    pub fn new(config: ModelConfig) -> Model {
        let mut rng = rng_from_seed(config.seed);
        let params = ModelParams::init(&config, &mut rng);
        Model { config, params }
    }

    /// All weights as named tensors, matrices first, then bias vectors.
    pub fn export_weights(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| NamedTensor {
                name,
                dims: alloc::vec![m.rows(), m.cols()],
                data: m.data().to_vec(),
            })
            .collect();
        out.extend(self.params.named_biases().into_iter().map(|(name, v)| {
            NamedTensor {
                name,
                dims: alloc::vec![v.dim()],
                data: v.0.clone(),
            }
        }));
        out
    }

    /// Rebuilds a model from named tensors; every tensor of the architecture
    /// must be present with matching dimensions.
    pub fn from_weights(
        config: ModelConfig,
        tensors: &[NamedTensor],
    ) -> Result<Model, ModelError> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut params = ModelParams::zeros(&config);
        {
            let fill = |name: &str, target: &mut [f64], dims: &[usize]| -> Result<(), ModelError> {
                let tensor = by_name.get(name).ok_or_else(|| ModelError::MissingWeight {
                    name: String::from(name),
                })?;
                if tensor.dims != dims || tensor.data.len() != target.len() {
                    return Err(ModelError::BadReplacement {
                        expected: target.len(),
                        got: tensor.data.len(),
                    });
                }
                target.copy_from_slice(&tensor.data);
                Ok(())
            };
            let expect_matrices: Vec<(String, Vec<usize>)> = {
                let zero = ModelParams::zeros(&config);
                zero.named_tensors()
                    .into_iter()
                    .map(|(n, m)| (n, alloc::vec![m.rows(), m.cols()]))
                    .collect()
            };
            for ((name, m), (_, dims)) in params
                .named_tensors_mut()
                .into_iter()
                .zip(expect_matrices)
            {
                fill(&name, m, &dims)?;
            }
            let expect_biases: Vec<(String, Vec<usize>)> = {
                let zero = ModelParams::zeros(&config);
                zero.named_biases()
                    .into_iter()
                    .map(|(n, v)| (n, alloc::vec![v.dim()]))
                    .collect()
            };
            for ((name, v), (_, dims)) in params.named_biases_mut().into_iter().zip(expect_biases) {
                fill(&name, v, &dims)?;
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access for the trainer and weight loading.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub(crate) fn validate_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Checks structural validity of an edge under this configuration.
    pub fn validate_edge(&self, edge: &EdgeId, seq_len: usize) -> Result<(), ModelError> {
        let cfg = &self.config;
        match edge.upstream.kind {
            NodeKind::Embed => {}
            NodeKind::AttnHeadOut { layer, head } => {
                if layer >= cfg.n_layers || head >= cfg.n_heads {
                    return Err(ModelError::InvalidEdge {
                        reason: "upstream head out of range",
                    });
                }
            }
            NodeKind::MlpOut { layer } => {
                if !cfg.has_mlp() || layer >= cfg.n_layers {
                    return Err(ModelError::InvalidEdge {
                        reason: "upstream mlp out of range",
                    });
                }
            }
            _ => {
                return Err(ModelError::InvalidEdge {
                    reason: "upstream must write into the residual stream",
                })
            }
        }
        let input_ok = match edge.input {
            DownstreamInput::AttnQ { layer, head }
            | DownstreamInput::AttnK { layer, head }
            | DownstreamInput::AttnV { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            DownstreamInput::MlpIn { layer } => cfg.has_mlp() && layer < cfg.n_layers,
            DownstreamInput::LogitsIn => true,
        };
        if !input_ok {
            return Err(ModelError::InvalidEdge {
                reason: "downstream input out of range",
            });
        }
        if edge.upstream.kind.write_stage() >= edge.input.read_stage(cfg.n_layers) {
            return Err(ModelError::InvalidEdge {
                reason: "upstream does not precede downstream read point",
            });
        }
        if edge.position >= seq_len || edge.upstream.position >= seq_len {
            return Err(ModelError::InvalidEdge {
                reason: "edge position outside sequence",
            });
        }
        if edge.input.allows_earlier_upstream() {
            if edge.upstream.position > edge.position {
                return Err(ModelError::InvalidEdge {
                    reason: "key/value upstream position after query position",
                });
            }
        } else if edge.upstream.position != edge.position {
            return Err(ModelError::InvalidEdge {
                reason: "read is position-local but positions differ",
            });
        }
        Ok(())
    }

    /// Gradients of `metric` with respect to every node output and every
    /// downstream read input, evaluated on `run`.
    pub fn backward(&self, run: &ForwardRun, metric: &Metric) -> Result<GradientCache, ModelError> {
        metric.validate(run.seq_len(), self.config.vocab_size)?;
        let seeds = metric.seeds(run.logits(), self.config.vocab_size);
        Ok(backward::backward_pass(self, run.trace(), &seeds, true, None))
    }

    /// As [`Model::backward`] but only materialises read-point gradients at
    /// or after `from_position`; attribution over late positions uses this.
    pub fn backward_reads_from(
        &self,
        run: &ForwardRun,
        metric: &Metric,
        from_position: usize,
    ) -> Result<GradientCache, ModelError> {
        metric.validate(run.seq_len(), self.config.vocab_size)?;
        let seeds = metric.seeds(run.logits(), self.config.vocab_size);
        Ok(backward::backward_pass_with(
            self,
            run.trace(),
            &seeds,
            backward::ReadGrads::DownstreamFrom(from_position),
            None,
        ))
    }

    /// Accumulates parameter gradients for training into `grads`; skips the
    /// per-edge read bookkeeping.
    pub(crate) fn backward_params_into(
        &self,
        run: &ForwardRun,
        seeds: &[Option<Vector>],
        grads: &mut ModelParams,
    ) {
        backward::backward_pass(self, run.trace(), seeds, false, Some(grads));
    }
}

/// Smooth elementwise nonlinearity for the MLP block.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let phi_small = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    phi_big + x * phi_small
}
