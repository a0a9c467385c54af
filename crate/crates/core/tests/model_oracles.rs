//! Oracle checks for the transformer: residual decomposition, determinism,
//! finite-difference gradient agreement, and patch semantics.

use saeval_core::linalg::Vector;
use saeval_core::model::{
    logit_diff, DownstreamInput, EdgeId, Metric, Model, ModelConfig, NodeId, NodeKind,
};
use saeval_core::rng::{rng_from_seed, uniform_usize};

fn config(n_layers: usize, n_heads: usize, d_model: usize, d_head: usize, d_mlp: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head,
        d_mlp,
        vocab_size: 13,
        max_seq: 8,
        seed,
    }
}

fn random_tokens(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    (0..len).map(|_| uniform_usize(&mut rng, vocab)).collect()
}

#[test]
fn residual_stream_is_exact_sum_of_sublayer_outputs() {
    for (d_mlp, seed) in [(0usize, 11u64), (16, 12)] {
        let model = Model::new(config(2, 3, 12, 4, d_mlp, seed));
        let tokens = random_tokens(seed, 6, 13);
        let run = model.forward(&tokens).unwrap();
        let cache = run.cache();
        for layer in 0..2 {
            for p in 0..tokens.len() {
                let mut sum = cache
                    .get(&NodeId::new(NodeKind::Embed, p))
                    .unwrap()
                    .clone();
                for l in 0..=layer {
                    for h in 0..3 {
                        sum = sum.add(
                            cache
                                .get(&NodeId::new(NodeKind::AttnHeadOut { layer: l, head: h }, p))
                                .unwrap(),
                        );
                    }
                    if d_mlp > 0 {
                        sum = sum.add(cache.get(&NodeId::new(NodeKind::MlpOut { layer: l }, p)).unwrap());
                    }
                }
                let resid = cache
                    .get(&NodeId::new(NodeKind::ResidPost { layer }, p))
                    .unwrap();
                for (a, b) in sum.0.iter().zip(&resid.0) {
                    assert!((a - b).abs() < 1e-10, "residual identity violated");
                }
            }
        }
    }
}

#[test]
fn forward_is_deterministic_bitwise() {
    let model_a = Model::new(config(2, 2, 8, 4, 8, 99));
    let model_b = Model::new(config(2, 2, 8, 4, 8, 99));
    let tokens = random_tokens(1, 6, 13);
    let run_a = model_a.forward(&tokens).unwrap();
    let run_b = model_b.forward(&tokens).unwrap();
    for (a, b) in run_a.logits().iter().zip(run_b.logits()) {
        assert_eq!(a.0, b.0);
    }
    for (id, v) in run_a.cache().iter() {
        assert_eq!(v.0, run_b.cache().get(id).unwrap().0);
    }
}

#[test]
fn zero_layer_model_is_embedding_plus_unembedding() {
    let model = Model::new(config(0, 1, 8, 4, 0, 7));
    let tokens = [3usize, 5];
    let run = model.forward(&tokens).unwrap();
    for (p, &t) in tokens.iter().enumerate() {
        let mut x = Vector(model.params().named_tensors()[0].1.row(t).to_vec());
        let pos_row = model.params().named_tensors()[1].1.row(p).to_vec();
        for (a, b) in x.0.iter_mut().zip(&pos_row) {
            *a += b;
        }
        let unembed = model.params().named_tensors().last().unwrap().1.clone();
        let expect = unembed.matvec(&x);
        for (a, b) in expect.0.iter().zip(&run.logits()[p].0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

#[test]
fn node_gradients_match_central_finite_differences() {
    let mut rng = rng_from_seed(2024);
    let cases = [
        config(1, 2, 8, 4, 0, 21),
        config(2, 2, 8, 4, 0, 22),
        config(2, 2, 10, 5, 12, 23),
        config(1, 3, 9, 3, 6, 24),
    ];
    for cfg in cases {
        let model = Model::new(cfg);
        let tokens = random_tokens(cfg.seed, 5, cfg.vocab_size);
        let run = model.forward(&tokens).unwrap();
        let metric = Metric::LogitDiff {
            position: tokens.len() - 1,
            positive: 2,
            negative: 9,
        };
        let grads = model.backward(&run, &metric).unwrap();
        // A few random nodes per model.
        let node_ids: Vec<NodeId> = run.cache().node_ids().cloned().collect();
        for _ in 0..4 {
            let node = node_ids[uniform_usize(&mut rng, node_ids.len())];
            if matches!(node.kind, NodeKind::Logits) {
                continue;
            }
            let clean = run.cache().get(&node).unwrap().clone();
            let analytic = grads.node(&node).unwrap().clone();
            let h = 1e-4;
            let mut fd = vec![0.0; clean.dim()];
            for i in 0..clean.dim() {
                let mut plus = clean.clone();
                plus.0[i] += h;
                let mut minus = clean.clone();
                minus.0[i] -= h;
                let run_p = model.run_with_node_patch(&tokens, &[(node, plus)]).unwrap();
                let run_m = model.run_with_node_patch(&tokens, &[(node, minus)]).unwrap();
                fd[i] = (metric.value(run_p.logits()) - metric.value(run_m.logits())) / (2.0 * h);
            }
            let err = relative_error(&fd, &analytic.0);
            let scale: f64 = analytic.0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if scale > 1e-7 {
                assert!(err < 1e-4, "node {node:?} rel err {err}");
            }
        }
    }
}

#[test]
fn edge_gradients_match_central_finite_differences() {
    let cfg = config(2, 2, 8, 4, 8, 31);
    let model = Model::new(cfg);
    let tokens = random_tokens(31, 5, cfg.vocab_size);
    let run = model.forward(&tokens).unwrap();
    let metric = Metric::LogitDiff {
        position: 4,
        positive: 1,
        negative: 6,
    };
    let grads = model.backward(&run, &metric).unwrap();
    let edges = [
        EdgeId {
            upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 2),
            input: DownstreamInput::AttnK { layer: 1, head: 1 },
            position: 4,
        },
        EdgeId {
            upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 1 }, 3),
            input: DownstreamInput::AttnV { layer: 1, head: 0 },
            position: 4,
        },
        EdgeId {
            upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 4),
            input: DownstreamInput::AttnQ { layer: 1, head: 0 },
            position: 4,
        },
        EdgeId {
            upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 1 }, 4),
            input: DownstreamInput::LogitsIn,
            position: 4,
        },
        EdgeId {
            upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 1 }, 4),
            input: DownstreamInput::MlpIn { layer: 1 },
            position: 4,
        },
    ];
    let h = 1e-4;
    for edge in edges {
        let clean_upstream = run.cache().get(&edge.upstream).unwrap().clone();
        let analytic = grads.edge_grad(&edge).unwrap().clone();
        let mut fd = vec![0.0; clean_upstream.dim()];
        for i in 0..clean_upstream.dim() {
            let mut plus = clean_upstream.clone();
            plus.0[i] += h;
            let mut minus = clean_upstream.clone();
            minus.0[i] -= h;
            let run_p = model
                .run_with_edge_patch_against(&tokens, &[(edge, plus)], &run)
                .unwrap();
            let run_m = model
                .run_with_edge_patch_against(&tokens, &[(edge, minus)], &run)
                .unwrap();
            fd[i] = (metric.value(run_p.logits()) - metric.value(run_m.logits())) / (2.0 * h);
        }
        let err = relative_error(&fd, &analytic.0);
        assert!(err < 1e-4, "edge {edge:?} rel err {err}");
    }
}

#[test]
fn noop_patches_are_bitwise_identities() {
    let model = Model::new(config(2, 2, 8, 4, 8, 41));
    let tokens = random_tokens(41, 6, 13);
    let clean = model.forward(&tokens).unwrap();
    let edge = EdgeId {
        upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 1 }, 2),
        input: DownstreamInput::AttnV { layer: 1, head: 0 },
        position: 5,
    };
    let clean_upstream = clean.cache().get(&edge.upstream).unwrap().clone();
    let patched = model
        .run_with_edge_patch(&tokens, &[(edge, clean_upstream)])
        .unwrap();
    for (a, b) in clean.logits().iter().zip(patched.logits()) {
        assert_eq!(a.0, b.0, "no-op edge patch must be exact");
    }

    let node = NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 0 }, 4);
    let clean_value = clean.cache().get(&node).unwrap().clone();
    let patched = model.run_with_node_patch(&tokens, &[(node, clean_value)]).unwrap();
    for (a, b) in clean.logits().iter().zip(patched.logits()) {
        assert_eq!(a.0, b.0, "no-op node patch must be exact");
    }
}

#[test]
fn zero_patch_into_logits_shifts_by_unembedded_activation() {
    let model = Model::new(config(2, 2, 8, 4, 0, 43));
    let tokens = random_tokens(43, 5, 13);
    let clean = model.forward(&tokens).unwrap();
    let upstream = NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 1 }, 4);
    let edge = EdgeId {
        upstream,
        input: DownstreamInput::LogitsIn,
        position: 4,
    };
    let patched = model
        .run_with_edge_patch(&tokens, &[(edge, Vector::zeros(8))])
        .unwrap();
    let upstream_act = clean.cache().get(&upstream).unwrap();
    let unembed = model.params().named_tensors().last().unwrap().1.clone();
    let shift = unembed.matvec(upstream_act);
    for i in 0..13 {
        let expect = clean.logits()[4].0[i] - shift.0[i];
        assert!((patched.logits()[4].0[i] - expect).abs() < 1e-10);
    }
}

#[test]
fn node_patch_delta_propagates_additively() {
    let model = Model::new(config(2, 2, 8, 4, 0, 47));
    let tokens = random_tokens(47, 5, 13);
    let clean = model.forward(&tokens).unwrap();
    let node = NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 0 }, 4);
    let mut delta = Vector::zeros(8);
    delta.0[3] = 0.37;
    let replacement = clean.cache().get(&node).unwrap().add(&delta);
    let patched = model.run_with_node_patch(&tokens, &[(node, replacement)]).unwrap();
    // Final-layer head: the change reaches ResidPost(1) at the same position
    // exactly, untouched by any later nonlinearity.
    let clean_resid = clean.cache().get(&NodeId::new(NodeKind::ResidPost { layer: 1 }, 4)).unwrap();
    let patched_resid = patched.cache().get(&NodeId::new(NodeKind::ResidPost { layer: 1 }, 4)).unwrap();
    for i in 0..8 {
        assert!((patched_resid.0[i] - clean_resid.0[i] - delta.0[i]).abs() < 1e-10);
    }
}

#[test]
fn final_layer_node_patch_equals_sum_of_outgoing_edge_patches() {
    let model = Model::new(config(2, 2, 8, 4, 0, 53));
    let tokens = random_tokens(53, 5, 13);
    let clean = model.forward(&tokens).unwrap();
    let node = NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 1 }, 4);
    let mut replacement = clean.cache().get(&node).unwrap().clone();
    replacement.0[0] += 0.21;
    replacement.0[5] -= 0.4;
    // A final-layer head's only outgoing edge reads are the unembedding.
    let node_run = model
        .run_with_node_patch(&tokens, &[(node, replacement.clone())])
        .unwrap();
    let edge_run = model
        .run_with_edge_patch(
            &tokens,
            &[(
                EdgeId {
                    upstream: node,
                    input: DownstreamInput::LogitsIn,
                    position: 4,
                },
                replacement,
            )],
        )
        .unwrap();
    for (a, b) in node_run.logits()[4].0.iter().zip(&edge_run.logits()[4].0) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn edge_patch_into_query_leaves_other_heads_unchanged() {
    let model = Model::new(config(2, 2, 8, 4, 0, 59));
    let tokens = random_tokens(59, 5, 13);
    let clean = model.forward(&tokens).unwrap();
    let edge = EdgeId {
        upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 4),
        input: DownstreamInput::AttnQ { layer: 1, head: 0 },
        position: 4,
    };
    let mut replacement = clean.cache().get(&edge.upstream).unwrap().clone();
    replacement.0[2] += 1.5;
    let patched = model.run_with_edge_patch(&tokens, &[(edge, replacement)]).unwrap();
    for p in 0..5 {
        let other = NodeId::new(NodeKind::AttnHeadOut { layer: 1, head: 1 }, p);
        assert_eq!(
            clean.cache().get(&other).unwrap().0,
            patched.cache().get(&other).unwrap().0,
            "untouched head must be bitwise identical"
        );
        for layer0_head in 0..2 {
            let n = NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: layer0_head }, p);
            assert_eq!(clean.cache().get(&n).unwrap().0, patched.cache().get(&n).unwrap().0);
        }
    }
}

#[test]
fn gradient_cache_covers_every_activation_node() {
    let model = Model::new(config(2, 2, 8, 4, 8, 71));
    let tokens = random_tokens(71, 5, 13);
    let run = model.forward(&tokens).unwrap();
    let metric = Metric::LogitDiff {
        position: 4,
        positive: 1,
        negative: 2,
    };
    let grads = model.backward(&run, &metric).unwrap();
    let cache_keys: Vec<_> = run.cache().node_ids().cloned().collect();
    let grad_keys: Vec<_> = grads.node_ids().cloned().collect();
    assert_eq!(cache_keys, grad_keys);
}

#[test]
fn logit_diff_basic_properties() {
    let model = Model::new(config(1, 2, 8, 4, 0, 61));
    let tokens = random_tokens(61, 4, 13);
    let run = model.forward(&tokens).unwrap();
    assert_eq!(logit_diff(run.logits(), 3, 3).unwrap(), 0.0);
    let ab = logit_diff(run.logits(), 2, 7).unwrap();
    let ba = logit_diff(run.logits(), 7, 2).unwrap();
    assert!((ab + ba).abs() < 1e-12);
    assert!(logit_diff(run.logits(), 2, 99).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = Model::new(config(1, 2, 8, 4, 0, 67));
    assert!(model.forward(&[]).is_err());
    assert!(model.forward(&[99]).is_err());
    assert!(model.forward(&vec![1; 100]).is_err());
    let run = model.forward(&[1, 2, 3]).unwrap();
    let bad_metric = Metric::SingleLogit {
        position: 9,
        token: 1,
    };
    assert!(model.backward(&run, &bad_metric).is_err());
    // Same-layer attention edge is invalid.
    let edge = EdgeId {
        upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 2),
        input: DownstreamInput::AttnQ { layer: 0, head: 1 },
        position: 2,
    };
    assert!(model.run_with_edge_patch(&[1, 2, 3], &[(edge, Vector::zeros(8))]).is_err());
    // Duplicate patch on one edge conflicts.
    let edge = EdgeId {
        upstream: NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 2),
        input: DownstreamInput::LogitsIn,
        position: 2,
    };
    assert!(model
        .run_with_edge_patch(&[1, 2, 3], &[(edge, Vector::zeros(8)), (edge, Vector::zeros(8))])
        .is_err());
}
