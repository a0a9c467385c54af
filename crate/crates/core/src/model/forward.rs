//! Forward execution with optional edge- and node-level interventions.
//!
//! Edge patches are carried as additive deltas against the clean upstream
//! contribution at the specific read point, so a patch whose replacement
//! equals the clean activation is a bitwise no-op. Node patches override the
//! node's output for every downstream reader. Key/value deltas are keyed by
//! (key position, query position): a patched key is seen only by the query
//! position named in the edge.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::linalg::{softmax, Vector};

use super::{
    gelu, ActivationCache, DownstreamInput, EdgeId, Model, ModelError, NodeId, NodeKind, TokenId,
};

#[derive(Clone, Debug, Default)]
pub(crate) struct PatchSet {
    pub node_overrides: BTreeMap<NodeId, Vector>,
    /// (layer, head, position) -> residual-space delta on the query read.
    pub q_deltas: BTreeMap<(usize, usize, usize), Vector>,
    /// (layer, head, key position, query position) -> delta on the key read.
    pub k_deltas: BTreeMap<(usize, usize, usize, usize), Vector>,
    pub v_deltas: BTreeMap<(usize, usize, usize, usize), Vector>,
    /// (layer, position) -> delta on the MLP input read.
    pub mlp_deltas: BTreeMap<(usize, usize), Vector>,
    /// position -> delta on the unembedding read.
    pub logits_deltas: BTreeMap<usize, Vector>,
}

impl PatchSet {
    /// Translates edge patches into read-point deltas against the clean run.
    /// Multiple edges feeding the same read point accumulate; the same edge
    /// listed twice is a conflict.
    pub fn from_edge_patches(
        model: &Model,
        seq_len: usize,
        patches: &[(EdgeId, Vector)],
        clean: &ActivationCache,
    ) -> Result<PatchSet, ModelError> {
        let d_model = model.config().d_model;
        let mut seen: Vec<EdgeId> = Vec::with_capacity(patches.len());
        let mut set = PatchSet::default();
        for (edge, replacement) in patches {
            model.validate_edge(edge, seq_len)?;
            if replacement.dim() != d_model {
                return Err(ModelError::BadReplacement {
                    expected: d_model,
                    got: replacement.dim(),
                });
            }
            if !replacement.is_finite() {
                return Err(ModelError::NonFiniteReplacement);
            }
            if seen.contains(edge) {
                return Err(ModelError::ConflictingPatch);
            }
            seen.push(*edge);
            let upstream = clean.get(&edge.upstream).ok_or(ModelError::InvalidEdge {
                reason: "upstream node missing from clean cache",
            })?;
            let delta = replacement.sub(upstream);
            let q = edge.upstream.position;
            match edge.input {
                DownstreamInput::AttnQ { layer, head } => {
                    accumulate(&mut set.q_deltas, (layer, head, edge.position), &delta);
                }
                DownstreamInput::AttnK { layer, head } => {
                    accumulate(&mut set.k_deltas, (layer, head, q, edge.position), &delta);
                }
                DownstreamInput::AttnV { layer, head } => {
                    accumulate(&mut set.v_deltas, (layer, head, q, edge.position), &delta);
                }
                DownstreamInput::MlpIn { layer } => {
                    accumulate(&mut set.mlp_deltas, (layer, edge.position), &delta);
                }
                DownstreamInput::LogitsIn => {
                    accumulate(&mut set.logits_deltas, edge.position, &delta);
                }
            }
        }
        Ok(set)
    }

    pub fn from_node_patches(
        model: &Model,
        seq_len: usize,
        patches: &[(NodeId, Vector)],
    ) -> Result<PatchSet, ModelError> {
        let cfg = model.config();
        let mut set = PatchSet::default();
        for (node, replacement) in patches {
            if node.position >= seq_len {
                return Err(ModelError::PositionOutOfRange {
                    position: node.position,
                    len: seq_len,
                });
            }
            let expected = match node.kind {
                NodeKind::Embed => cfg.d_model,
                NodeKind::AttnHeadOut { layer, head } => {
                    if layer >= cfg.n_layers || head >= cfg.n_heads {
                        return Err(ModelError::InvalidNode {
                            reason: "head out of range",
                        });
                    }
                    cfg.d_model
                }
                NodeKind::MlpOut { layer } => {
                    if !cfg.has_mlp() || layer >= cfg.n_layers {
                        return Err(ModelError::InvalidNode {
                            reason: "mlp out of range",
                        });
                    }
                    cfg.d_model
                }
                NodeKind::ResidPost { layer } => {
                    if layer >= cfg.n_layers {
                        return Err(ModelError::InvalidNode {
                            reason: "layer out of range",
                        });
                    }
                    cfg.d_model
                }
                NodeKind::Logits => cfg.vocab_size,
            };
            if replacement.dim() != expected {
                return Err(ModelError::BadReplacement {
                    expected,
                    got: replacement.dim(),
                });
            }
            if !replacement.is_finite() {
                return Err(ModelError::NonFiniteReplacement);
            }
            if set
                .node_overrides
                .insert(*node, replacement.clone())
                .is_some()
            {
                return Err(ModelError::ConflictingPatch);
            }
        }
        Ok(set)
    }
}

fn accumulate<K: Ord>(map: &mut BTreeMap<K, Vector>, key: K, delta: &Vector) {
    match map.get_mut(&key) {
        Some(existing) => {
            for (e, d) in existing.0.iter_mut().zip(&delta.0) {
                *e += d;
            }
        }
        None => {
            map.insert(key, delta.clone());
        }
    }
}

/// Full record of one forward pass: logits, the public activation cache, and
/// the internal trace the backward pass replays.
#[derive(Clone, Debug)]
pub struct ForwardRun {
    logits: Vec<Vector>,
    cache: ActivationCache,
    trace: Trace,
}

impl ForwardRun {
    pub fn logits(&self) -> &[Vector] {
        &self.logits
    }

    pub fn cache(&self) -> &ActivationCache {
        &self.cache
    }

    pub fn seq_len(&self) -> usize {
        self.cache.seq_len()
    }

    pub(crate) fn trace(&self) -> &Trace {
        &self.trace
    }
}

/// Internal forward trace kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub tokens: Vec<TokenId>,
    pub patches: PatchSet,
    /// Residual stream read by layer `l`'s attention; index `n_layers` holds
    /// the stream read by the unembedding.
    pub resid_pre: Vec<Vec<Vector>>,
    /// Residual stream after layer `l`'s heads (MLP input stream).
    pub resid_mid: Vec<Vec<Vector>>,
    /// Query vectors with any patch applied: [layer][head][pos].
    pub q: Vec<Vec<Vec<Vector>>>,
    /// Unpatched key/value vectors: [layer][head][pos].
    pub k_base: Vec<Vec<Vec<Vector>>>,
    pub v_base: Vec<Vec<Vec<Vector>>>,
    /// Attention weights: [layer][head][query][key <= query].
    pub probs: Vec<Vec<Vec<Vec<f64>>>>,
    /// Attention-weighted values: [layer][head][pos].
    pub z: Vec<Vec<Vec<Vector>>>,
    /// MLP pre-activations and activations: [layer][pos] (empty if no MLP).
    pub mlp_pre: Vec<Vec<Vector>>,
    pub mlp_act: Vec<Vec<Vector>>,
}

impl Trace {
    /// Effective key vector for key position `j` as seen by query position
    /// `p`; recomputed identically to the forward pass.
    pub fn k_eff(&self, model: &Model, layer: usize, head: usize, j: usize, p: usize) -> Vector {
        let base = &self.k_base[layer][head][j];
        match self.patches.k_deltas.get(&(layer, head, j, p)) {
            Some(delta) => base.add(&model.params.layers[layer].heads[head].w_k.matvec(delta)),
            None => base.clone(),
        }
    }

    pub fn v_eff(&self, model: &Model, layer: usize, head: usize, j: usize, p: usize) -> Vector {
        let base = &self.v_base[layer][head][j];
        match self.patches.v_deltas.get(&(layer, head, j, p)) {
            Some(delta) => base.add(&model.params.layers[layer].heads[head].w_v.matvec(delta)),
            None => base.clone(),
        }
    }

    /// Input actually read by layer `l`'s MLP at `pos`.
    pub fn mlp_input(&self, layer: usize, pos: usize) -> Vector {
        let base = &self.resid_mid[layer][pos];
        match self.patches.mlp_deltas.get(&(layer, pos)) {
            Some(delta) => base.add(delta),
            None => base.clone(),
        }
    }

    /// Input actually read by the unembedding at `pos`.
    pub fn logits_input(&self, pos: usize) -> Vector {
        let base = &self.resid_pre[self.resid_pre.len() - 1][pos];
        match self.patches.logits_deltas.get(&pos) {
            Some(delta) => base.add(delta),
            None => base.clone(),
        }
    }

    /// Input actually read by the query projection of (layer, head) at `pos`.
    pub fn q_input(&self, layer: usize, head: usize, pos: usize) -> Vector {
        let base = &self.resid_pre[layer][pos];
        match self.patches.q_deltas.get(&(layer, head, pos)) {
            Some(delta) => base.add(delta),
            None => base.clone(),
        }
    }

    pub fn k_input(&self, layer: usize, head: usize, j: usize, p: usize) -> Vector {
        let base = &self.resid_pre[layer][j];
        match self.patches.k_deltas.get(&(layer, head, j, p)) {
            Some(delta) => base.add(delta),
            None => base.clone(),
        }
    }

    pub fn v_input(&self, layer: usize, head: usize, j: usize, p: usize) -> Vector {
        let base = &self.resid_pre[layer][j];
        match self.patches.v_deltas.get(&(layer, head, j, p)) {
            Some(delta) => base.add(delta),
            None => base.clone(),
        }
    }
}

impl Model {
    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardRun, ModelError> {
        self.forward_with(tokens, PatchSet::default())
    }

    /// Forward pass with edge patches expressed against a fresh clean run.
    pub fn run_with_edge_patch(
        &self,
        tokens: &[TokenId],
        patches: &[(EdgeId, Vector)],
    ) -> Result<ForwardRun, ModelError> {
        let clean = self.forward(tokens)?;
        self.run_with_edge_patch_against(tokens, patches, &clean)
    }

    /// Same as [`Model::run_with_edge_patch`] but reuses an existing clean run
    /// to define the per-edge deltas.
    pub fn run_with_edge_patch_against(
        &self,
        tokens: &[TokenId],
        patches: &[(EdgeId, Vector)],
        clean: &ForwardRun,
    ) -> Result<ForwardRun, ModelError> {
        let set = PatchSet::from_edge_patches(self, tokens.len(), patches, clean.cache())?;
        self.forward_with(tokens, set)
    }

    pub fn run_with_node_patch(
        &self,
        tokens: &[TokenId],
        patches: &[(NodeId, Vector)],
    ) -> Result<ForwardRun, ModelError> {
        let set = PatchSet::from_node_patches(self, tokens.len(), patches)?;
        self.forward_with(tokens, set)
    }

    pub(crate) fn forward_with(
        &self,
        tokens: &[TokenId],
        patches: PatchSet,
    ) -> Result<ForwardRun, ModelError> {
        self.validate_tokens(tokens)?;
        let cfg = self.config();
        let seq = tokens.len();
        let scale = 1.0 / libm::sqrt(cfg.d_head as f64);
        let mut entries: BTreeMap<NodeId, Vector> = BTreeMap::new();

        let mut resid: Vec<Vector> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let mut x = Vector(self.params.embed.row(t).to_vec());
                for (a, b) in x.0.iter_mut().zip(self.params.pos.row(p)) {
                    *a += b;
                }
                x
            })
            .collect();
        for p in 0..seq {
            let node = NodeId::new(NodeKind::Embed, p);
            if let Some(replacement) = patches.node_overrides.get(&node) {
                resid[p] = replacement.clone();
            }
            entries.insert(node, resid[p].clone());
        }

        let mut trace = Trace {
            tokens: tokens.to_vec(),
            patches,
            resid_pre: Vec::with_capacity(cfg.n_layers + 1),
            resid_mid: Vec::with_capacity(cfg.n_layers),
            q: Vec::with_capacity(cfg.n_layers),
            k_base: Vec::with_capacity(cfg.n_layers),
            v_base: Vec::with_capacity(cfg.n_layers),
            probs: Vec::with_capacity(cfg.n_layers),
            z: Vec::with_capacity(cfg.n_layers),
            mlp_pre: Vec::new(),
            mlp_act: Vec::new(),
        };

        for layer in 0..cfg.n_layers {
            trace.resid_pre.push(resid.clone());
            let mut layer_q = Vec::with_capacity(cfg.n_heads);
            let mut layer_k = Vec::with_capacity(cfg.n_heads);
            let mut layer_v = Vec::with_capacity(cfg.n_heads);
            let mut layer_probs = Vec::with_capacity(cfg.n_heads);
            let mut layer_z = Vec::with_capacity(cfg.n_heads);
            let mut head_outputs: Vec<Vec<Vector>> = Vec::with_capacity(cfg.n_heads);

            for head in 0..cfg.n_heads {
                let hp = &self.params.layers[layer].heads[head];
                let mut q_vecs = Vec::with_capacity(seq);
                let mut k_vecs = Vec::with_capacity(seq);
                let mut v_vecs = Vec::with_capacity(seq);
                for p in 0..seq {
                    let mut q = hp.w_q.matvec(&resid[p]);
                    q = q.add(&hp.b_q);
                    if let Some(delta) = trace.patches.q_deltas.get(&(layer, head, p)) {
                        q = q.add(&hp.w_q.matvec(delta));
                    }
                    q_vecs.push(q);
                    k_vecs.push(hp.w_k.matvec(&resid[p]).add(&hp.b_k));
                    v_vecs.push(hp.w_v.matvec(&resid[p]).add(&hp.b_v));
                }
                let mut probs_h = Vec::with_capacity(seq);
                let mut z_h = Vec::with_capacity(seq);
                let mut out_h = Vec::with_capacity(seq);
                let has_k_patch = !trace.patches.k_deltas.is_empty();
                let has_v_patch = !trace.patches.v_deltas.is_empty();
                for p in 0..seq {
                    let mut scores = Vector::zeros(p + 1);
                    for j in 0..=p {
                        let patched = if has_k_patch {
                            trace.patches.k_deltas.get(&(layer, head, j, p))
                        } else {
                            None
                        };
                        let s = match patched {
                            Some(delta) => q_vecs[p].dot(&k_vecs[j].add(&hp.w_k.matvec(delta))),
                            None => q_vecs[p].dot(&k_vecs[j]),
                        };
                        scores.0[j] = s * scale;
                    }
                    let probs = softmax(&scores);
                    let mut z = Vector::zeros(cfg.d_head);
                    for j in 0..=p {
                        let patched = if has_v_patch {
                            trace.patches.v_deltas.get(&(layer, head, j, p))
                        } else {
                            None
                        };
                        match patched {
                            Some(delta) => z.axpy(probs.0[j], &v_vecs[j].add(&hp.w_v.matvec(delta))),
                            None => z.axpy(probs.0[j], &v_vecs[j]),
                        }
                    }
                    out_h.push(hp.w_o.matvec(&z));
                    probs_h.push(probs.0);
                    z_h.push(z);
                }
                layer_q.push(q_vecs);
                layer_k.push(k_vecs);
                layer_v.push(v_vecs);
                layer_probs.push(probs_h);
                layer_z.push(z_h);
                head_outputs.push(out_h);
            }

            for (head, outputs) in head_outputs.iter_mut().enumerate() {
                for (p, out) in outputs.iter_mut().enumerate() {
                    let node = NodeId::new(NodeKind::AttnHeadOut { layer, head }, p);
                    if let Some(replacement) = trace.patches.node_overrides.get(&node) {
                        *out = replacement.clone();
                    }
                    entries.insert(node, out.clone());
                }
            }
            for p in 0..seq {
                for outputs in &head_outputs {
                    resid[p] = resid[p].add(&outputs[p]);
                }
            }
            trace.q.push(layer_q);
            trace.k_base.push(layer_k);
            trace.v_base.push(layer_v);
            trace.probs.push(layer_probs);
            trace.z.push(layer_z);
            trace.resid_mid.push(resid.clone());

            if let Some(mlp) = &self.params.layers[layer].mlp {
                let mut pre_l = Vec::with_capacity(seq);
                let mut act_l = Vec::with_capacity(seq);
                for p in 0..seq {
                    let mut input = resid[p].clone();
                    if let Some(delta) = trace.patches.mlp_deltas.get(&(layer, p)) {
                        input = input.add(delta);
                    }
                    let pre = mlp.w_in.matvec(&input).add(&mlp.b_in);
                    let act = Vector(pre.0.iter().map(|&x| gelu(x)).collect());
                    let mut out = mlp.w_out.matvec(&act).add(&mlp.b_out);
                    let node = NodeId::new(NodeKind::MlpOut { layer }, p);
                    if let Some(replacement) = trace.patches.node_overrides.get(&node) {
                        out = replacement.clone();
                    }
                    entries.insert(node, out.clone());
                    resid[p] = resid[p].add(&out);
                    pre_l.push(pre);
                    act_l.push(act);
                }
                trace.mlp_pre.push(pre_l);
                trace.mlp_act.push(act_l);
            }

            for p in 0..seq {
                let node = NodeId::new(NodeKind::ResidPost { layer }, p);
                if let Some(replacement) = trace.patches.node_overrides.get(&node) {
                    resid[p] = replacement.clone();
                }
                entries.insert(node, resid[p].clone());
            }
        }

        trace.resid_pre.push(resid.clone());
        let mut logits = Vec::with_capacity(seq);
        for p in 0..seq {
            let mut input = resid[p].clone();
            if let Some(delta) = trace.patches.logits_deltas.get(&p) {
                input = input.add(delta);
            }
            let mut out = self.params.unembed.matvec(&input);
            let node = NodeId::new(NodeKind::Logits, p);
            if let Some(replacement) = trace.patches.node_overrides.get(&node) {
                out = replacement.clone();
            }
            entries.insert(node, out.clone());
            logits.push(out);
        }

        Ok(ForwardRun {
            logits,
            cache: ActivationCache::new(seq, entries),
            trace,
        })
    }
}
