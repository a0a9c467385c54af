//! Explicit reverse-mode accumulation over the node graph.
//!
//! Node gradients are recorded for every cache entry; read-point gradients
//! (the quantity edge attribution needs) are recorded per downstream input,
//! keyed by (downstream position, upstream position) for key/value reads.
//! Overridden nodes cut the flow into their internal computation: the node
//! gradient itself is still reported, but nothing propagates to the weights
//! or residual stream that produced the replaced value.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Vector;

use super::forward::Trace;
use super::{
    gelu_prime, DownstreamInput, GradientCache, Model, ModelParams, NodeId, NodeKind, ReadKey,
};

/// Which read-point gradients to materialise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum ReadGrads {
    None,
    All,
    /// Only reads whose downstream position is at or after the given
    /// position; attribution restricted to late positions uses this.
    DownstreamFrom(usize),
}

impl ReadGrads {
    fn wants(&self, downstream_pos: usize) -> bool {
        match *self {
            ReadGrads::None => false,
            ReadGrads::All => true,
            ReadGrads::DownstreamFrom(p0) => downstream_pos >= p0,
        }
    }

}

pub(crate) fn backward_pass(
    model: &Model,
    trace: &Trace,
    seeds: &[Option<Vector>],
    want_reads: bool,
    pgrads: Option<&mut ModelParams>,
) -> GradientCache {
    let mode = if want_reads {
        ReadGrads::All
    } else {
        ReadGrads::None
    };
    backward_pass_with(model, trace, seeds, mode, pgrads)
}

pub(crate) fn backward_pass_with(
    model: &Model,
    trace: &Trace,
    seeds: &[Option<Vector>],
    reads_mode: ReadGrads,
    mut pgrads: Option<&mut ModelParams>,
) -> GradientCache {
    let cfg = *model.config();
    let seq = trace.tokens.len();
    let scale = 1.0 / libm::sqrt(cfg.d_head as f64);
    let mut nodes: BTreeMap<NodeId, Vector> = BTreeMap::new();
    let mut reads: BTreeMap<ReadKey, Vector> = BTreeMap::new();
    let overrides = &trace.patches.node_overrides;

    // Unembedding.
    let mut grad_resid: Vec<Vector> = vec![Vector::zeros(cfg.d_model); seq];
    for p in 0..seq {
        let node = NodeId::new(NodeKind::Logits, p);
        let seed = seeds[p].clone();
        nodes.insert(
            node,
            seed.clone().unwrap_or_else(|| Vector::zeros(cfg.vocab_size)),
        );
        let flows = seed.is_some() && !overrides.contains_key(&node);
        let g_in = if flows {
            let g_logits = seed.as_ref().unwrap();
            if let Some(pg) = pgrads.as_mut() {
                let input = trace.logits_input(p);
                pg.unembed
                    .add_outer(1.0, g_logits.as_slice(), input.as_slice());
            }
            model.params.unembed.matvec_transposed(g_logits)
        } else {
            Vector::zeros(cfg.d_model)
        };
        if reads_mode.wants(p) {
            reads.insert(
                ReadKey {
                    input: DownstreamInput::LogitsIn,
                    position: p,
                    upstream_position: p,
                },
                g_in.clone(),
            );
        }
        grad_resid[p] = g_in;
    }

    for layer in (0..cfg.n_layers).rev() {
        for p in 0..seq {
            let node = NodeId::new(NodeKind::ResidPost { layer }, p);
            nodes.insert(node, grad_resid[p].clone());
            if overrides.contains_key(&node) {
                grad_resid[p] = Vector::zeros(cfg.d_model);
            }
        }

        if let Some(mlp) = model.params.layers[layer].mlp.as_ref() {
            for p in 0..seq {
                let node = NodeId::new(NodeKind::MlpOut { layer }, p);
                let g_out = grad_resid[p].clone();
                nodes.insert(node, g_out.clone());
                if overrides.contains_key(&node) {
                    if reads_mode.wants(p) {
                        reads.insert(
                            ReadKey {
                                input: DownstreamInput::MlpIn { layer },
                                position: p,
                                upstream_position: p,
                            },
                            Vector::zeros(cfg.d_model),
                        );
                    }
                    continue;
                }
                let g_act = mlp.w_out.matvec_transposed(&g_out);
                let pre = &trace.mlp_pre[layer][p];
                let g_pre = Vector(
                    g_act
                        .0
                        .iter()
                        .zip(&pre.0)
                        .map(|(g, &x)| g * gelu_prime(x))
                        .collect(),
                );
                let g_in = mlp.w_in.matvec_transposed(&g_pre);
                if reads_mode.wants(p) {
                    reads.insert(
                        ReadKey {
                            input: DownstreamInput::MlpIn { layer },
                            position: p,
                            upstream_position: p,
                        },
                        g_in.clone(),
                    );
                }
                if let Some(pg) = pgrads.as_mut() {
                    let m = pg.layers[layer].mlp.as_mut().expect("mlp grads");
                    m.w_out
                        .add_outer(1.0, g_out.as_slice(), trace.mlp_act[layer][p].as_slice());
                    for (b, g) in m.b_out.0.iter_mut().zip(&g_out.0) {
                        *b += g;
                    }
                    let input = trace.mlp_input(layer, p);
                    m.w_in
                        .add_outer(1.0, g_pre.as_slice(), input.as_slice());
                    for (b, g) in m.b_in.0.iter_mut().zip(&g_pre.0) {
                        *b += g;
                    }
                }
                for (a, b) in grad_resid[p].0.iter_mut().zip(&g_in.0) {
                    *a += b;
                }
            }
        }

        // All heads read the same mid-stream gradient; their own read
        // gradients then accumulate on top for the pre-stream.
        let g_mid: Vec<Vector> = grad_resid.clone();
        for head in 0..cfg.n_heads {
            let hp = &model.params.layers[layer].heads[head];
            // Without key/value patches the read input is query-independent,
            // so parameter gradients can accumulate per key position.
            let kv_unpatched = trace.patches.k_deltas.is_empty() && trace.patches.v_deltas.is_empty();
            // Accumulated key/value gradients per key position, applied to the
            // residual stream once per position.
            let mut g_k_accum = vec![Vector::zeros(cfg.d_head); seq];
            let mut g_v_accum = vec![Vector::zeros(cfg.d_head); seq];
            for p in 0..seq {
                let node = NodeId::new(NodeKind::AttnHeadOut { layer, head }, p);
                nodes.insert(node, g_mid[p].clone());
                let overridden = overrides.contains_key(&node);
                let g_head = if overridden {
                    Vector::zeros(cfg.d_model)
                } else {
                    g_mid[p].clone()
                };
                let g_z = hp.w_o.matvec_transposed(&g_head);
                if let Some(pg) = pgrads.as_mut() {
                    if !overridden {
                        pg.layers[layer].heads[head].w_o.add_outer(
                            1.0,
                            g_head.as_slice(),
                            trace.z[layer][head][p].as_slice(),
                        );
                    }
                }
                // Nothing flows through this query position and no reads are
                // wanted here: skip the pair loop.
                if !reads_mode.wants(p) && g_z.0.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let has_v_patch = !trace.patches.v_deltas.is_empty();
                let has_k_patch = !trace.patches.k_deltas.is_empty();
                let probs = &trace.probs[layer][head][p];
                let mut g_probs = vec![0.0; p + 1];
                for j in 0..=p {
                    let g_v_pair = g_z.scale(probs[j]);
                    g_probs[j] = if has_v_patch {
                        trace.v_eff(model, layer, head, j, p).dot(&g_z)
                    } else {
                        trace.v_base[layer][head][j].dot(&g_z)
                    };
                    if reads_mode.wants(p) {
                        reads.insert(
                            ReadKey {
                                input: DownstreamInput::AttnV { layer, head },
                                position: p,
                                upstream_position: j,
                            },
                            hp.w_v.matvec_transposed(&g_v_pair),
                        );
                    }
                    if !kv_unpatched {
                        if let Some(pg) = pgrads.as_mut() {
                            let hgrad = &mut pg.layers[layer].heads[head];
                            let input = trace.v_input(layer, head, j, p);
                            hgrad
                                .w_v
                                .add_outer(1.0, g_v_pair.as_slice(), input.as_slice());
                            for (b, g) in hgrad.b_v.0.iter_mut().zip(&g_v_pair.0) {
                                *b += g;
                            }
                        }
                    }
                    g_v_accum[j].axpy(1.0, &g_v_pair);
                }
                let weighted: f64 = (0..=p).map(|j| probs[j] * g_probs[j]).sum();
                let mut g_q = Vector::zeros(cfg.d_head);
                for j in 0..=p {
                    let g_score = probs[j] * (g_probs[j] - weighted);
                    let g_k_pair = trace.q[layer][head][p].scale(g_score * scale);
                    if reads_mode.wants(p) {
                        reads.insert(
                            ReadKey {
                                input: DownstreamInput::AttnK { layer, head },
                                position: p,
                                upstream_position: j,
                            },
                            hp.w_k.matvec_transposed(&g_k_pair),
                        );
                    }
                    if !kv_unpatched {
                        if let Some(pg) = pgrads.as_mut() {
                            let hgrad = &mut pg.layers[layer].heads[head];
                            let input = trace.k_input(layer, head, j, p);
                            hgrad
                                .w_k
                                .add_outer(1.0, g_k_pair.as_slice(), input.as_slice());
                            for (b, g) in hgrad.b_k.0.iter_mut().zip(&g_k_pair.0) {
                                *b += g;
                            }
                        }
                    }
                    g_k_accum[j].axpy(1.0, &g_k_pair);
                    if has_k_patch {
                        g_q.axpy(g_score * scale, &trace.k_eff(model, layer, head, j, p));
                    } else {
                        g_q.axpy(g_score * scale, &trace.k_base[layer][head][j]);
                    }
                }
                let g_q_read = hp.w_q.matvec_transposed(&g_q);
                if reads_mode.wants(p) {
                    reads.insert(
                        ReadKey {
                            input: DownstreamInput::AttnQ { layer, head },
                            position: p,
                            upstream_position: p,
                        },
                        g_q_read.clone(),
                    );
                }
                if let Some(pg) = pgrads.as_mut() {
                    let hgrad = &mut pg.layers[layer].heads[head];
                    let input = trace.q_input(layer, head, p);
                    hgrad.w_q.add_outer(1.0, g_q.as_slice(), input.as_slice());
                    for (b, g) in hgrad.b_q.0.iter_mut().zip(&g_q.0) {
                        *b += g;
                    }
                }
                for (a, b) in grad_resid[p].0.iter_mut().zip(&g_q_read.0) {
                    *a += b;
                }
            }
            for j in 0..seq {
                if kv_unpatched {
                    if let Some(pg) = pgrads.as_mut() {
                        let hgrad = &mut pg.layers[layer].heads[head];
                        let input = &trace.resid_pre[layer][j];
                        hgrad
                            .w_k
                            .add_outer(1.0, g_k_accum[j].as_slice(), input.as_slice());
                        hgrad
                            .w_v
                            .add_outer(1.0, g_v_accum[j].as_slice(), input.as_slice());
                        for (b, g) in hgrad.b_k.0.iter_mut().zip(&g_k_accum[j].0) {
                            *b += g;
                        }
                        for (b, g) in hgrad.b_v.0.iter_mut().zip(&g_v_accum[j].0) {
                            *b += g;
                        }
                    }
                }
                let g_k_read = hp.w_k.matvec_transposed(&g_k_accum[j]);
                let g_v_read = hp.w_v.matvec_transposed(&g_v_accum[j]);
                for ((a, k), v) in grad_resid[j].0.iter_mut().zip(&g_k_read.0).zip(&g_v_read.0) {
                    *a += k + v;
                }
            }
        }
    }

    for p in 0..seq {
        let node = NodeId::new(NodeKind::Embed, p);
        nodes.insert(node, grad_resid[p].clone());
        if let Some(pg) = pgrads.as_mut() {
            if !overrides.contains_key(&node) {
                let token = trace.tokens[p];
                for (e, g) in pg
                    .embed
                    .row_mut(token)
                    .iter_mut()
                    .zip(&grad_resid[p].0)
                {
                    *e += g;
                }
                for (e, g) in pg.pos.row_mut(p).iter_mut().zip(&grad_resid[p].0) {
                    *e += g;
                }
            }
        }
    }

    GradientCache { nodes, reads }
}
