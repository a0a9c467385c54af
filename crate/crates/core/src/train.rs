//! Model training, accuracy evaluation and activation harvesting.
//!
//! The trainer is plain Adam with a cosine-decayed step size on a
//! cross-entropy objective over designated (position, target) pairs, which
//! covers both next-token pretraining mixtures and final-position task
//! training. Activation harvesting walks forward passes and exposes
//! residual-stream matrices and per-node positionwise means for the
//! downstream dictionary and ablation machinery.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{cross_entropy, softmax, Matrix, Vector};
use crate::model::{Model, ModelConfig, ModelError, NodeId, NodeKind, TokenId};
use crate::rng::{sample_distinct, shuffle, uniform_f64, uniform_usize, Rng};
use crate::task::TaskPrompt;

#[derive(Clone, Debug)]
pub enum TrainError {
    EmptyData,
    Diverged { step: usize },
    NotConverged { report: TrainReport },
    PositionOutOfRange { position: usize, len: usize },
    LayerOutOfRange { layer: usize, n_layers: usize },
    Model(ModelError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyData => write!(f, "no training data"),
            TrainError::Diverged { step } => write!(f, "loss became non-finite at step {step}"),
            TrainError::NotConverged { report } => write!(
                f,
                "training ended below the accuracy bar: reached {:.4}",
                report.accuracy
            ),
            TrainError::PositionOutOfRange { position, len } => {
                write!(f, "position {position} out of range for length {len}")
            }
            TrainError::LayerOutOfRange { layer, n_layers } => {
                write!(f, "layer {layer} out of range for {n_layers} layers")
            }
            TrainError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

/// One training example: tokens plus the (position, target) pairs that carry
/// cross-entropy loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay floor as a fraction of the peak learning rate.
    pub lr_floor_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Held-out accuracy required for the run to count as converged.
    pub accuracy_threshold: f64,
    /// Accuracy at which training stops early (checked once per epoch).
    pub early_stop_accuracy: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_floor_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accuracy_threshold: 0.95,
            early_stop_accuracy: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-out task accuracy at the end of training.
    pub accuracy: f64,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub epochs_run: usize,
    pub steps_run: usize,
}

/// Generic Adam over a list of equally shaped tensors.
pub(crate) struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}

fn cosine_lr(params: &TrainParams, step: usize, total: usize) -> f64 {
    let floor = params.learning_rate * params.lr_floor_fraction;
    let progress = if total <= 1 {
        1.0
    } else {
        step as f64 / (total - 1) as f64
    };
    floor + 0.5 * (params.learning_rate - floor) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Trains a fresh model on `data` until the held-out prompts are solved at
/// the configured accuracy, or fails with the report attached.
pub fn train_model(
    config: &ModelConfig,
    data: &[TrainExample],
    heldout: &[TaskPrompt],
    params: &TrainParams,
    rng: &mut Rng,
) -> Result<(Model, TrainReport), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut model = Model::new(*config);
    let shapes: Vec<usize> = model
        .params_mut()
        .tensors_mut()
        .iter()
        .map(|t| t.len())
        .collect();
    let mut adam = AdamState::new(&shapes);
    let mut grads = crate::model::ModelParams::zeros(config);
    let batches_per_epoch = data.len().div_ceil(params.batch_size);
    let total_steps = params.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(params.epochs);
    let mut steps_run = 0;
    let mut epochs_run = 0;

    for _epoch in 0..params.epochs {
        shuffle(rng, &mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_targets = 0usize;
        for batch in order.chunks(params.batch_size) {
            for g in grads.tensors_mut() {
                g.fill(0.0);
            }
            let mut batch_targets = 0usize;
            for &idx in batch {
                batch_targets += data[idx].targets.len();
            }
            if batch_targets == 0 {
                continue;
            }
            let scale = 1.0 / batch_targets as f64;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let example = &data[idx];
                let run = model.forward(&example.tokens)?;
                let mut seeds: Vec<Option<Vector>> =
                    (0..example.tokens.len()).map(|_| None).collect();
                for &(pos, target) in &example.targets {
                    if pos >= example.tokens.len() {
                        return Err(TrainError::PositionOutOfRange {
                            position: pos,
                            len: example.tokens.len(),
                        });
                    }
                    let logits = &run.logits()[pos];
                    batch_loss += cross_entropy(logits, target).expect("target in vocab");
                    let mut seed = softmax(logits);
                    seed.0[target] -= 1.0;
                    let seed = seed.scale(scale);
                    match &mut seeds[pos] {
                        Some(existing) => existing.axpy(1.0, &seed),
                        slot => *slot = Some(seed),
                    }
                }
                model.backward_params_into(&run, &seeds, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step: steps_run });
            }
            epoch_loss += batch_loss;
            epoch_targets += batch_targets;
            let lr = cosine_lr(params, steps_run, total_steps);
            {
                let grad_view = grads.tensors_mut();
                let grad_refs: Vec<&[f64]> = grad_view.iter().map(|g| &**g).collect();
                let mut param_view = model.params_mut().tensors_mut();
                adam.step(
                    &mut param_view,
                    &grad_refs,
                    lr,
                    params.beta1,
                    params.beta2,
                    params.eps,
                );
            }
            steps_run += 1;
        }
        epochs_run += 1;
        loss_curve.push(epoch_loss / epoch_targets.max(1) as f64);
        if !heldout.is_empty() {
            let acc = eval_accuracy(&model, heldout)?;
            if acc >= params.early_stop_accuracy {
                break;
            }
        }
    }

    let accuracy = if heldout.is_empty() {
        1.0
    } else {
        eval_accuracy(&model, heldout)?
    };
    let report = TrainReport {
        accuracy,
        loss_curve,
        epochs_run,
        steps_run,
    };
    if accuracy < params.accuracy_threshold {
        return Err(TrainError::NotConverged { report });
    }
    Ok((model, report))
}

/// Fraction of prompts whose final-position argmax equals the target token.
pub fn eval_accuracy(model: &Model, prompts: &[TaskPrompt]) -> Result<f64, TrainError> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for prompt in prompts {
        let run = model.forward(&prompt.tokens)?;
        let logits = run.logits().last().expect("nonempty prompt");
        let argmax = logits
            .0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        if argmax == prompt.target {
            correct += 1;
        }
    }
    Ok(correct as f64 / prompts.len() as f64)
}

/// Residual-stream activations `ResidPost(layer)` for each prompt at each of
/// the requested positions; rows are prompt-major.
pub fn collect_residual_activations(
    model: &Model,
    prompts: &[Vec<TokenId>],
    layer: usize,
    positions: &[usize],
) -> Result<Matrix, TrainError> {
    if layer >= model.config().n_layers {
        return Err(TrainError::LayerOutOfRange {
            layer,
            n_layers: model.config().n_layers,
        });
    }
    let mut rows: Vec<Vector> = Vec::with_capacity(prompts.len() * positions.len());
    for tokens in prompts {
        for &pos in positions {
            if pos >= tokens.len() {
                return Err(TrainError::PositionOutOfRange {
                    position: pos,
                    len: tokens.len(),
                });
            }
        }
        let run = model.forward(tokens)?;
        for &pos in positions {
            rows.push(
                run.cache()
                    .get(&NodeId::new(NodeKind::ResidPost { layer }, pos))
                    .expect("cached residual")
                    .clone(),
            );
        }
    }
    Ok(Matrix::from_rows(&rows))
}

/// Per-node, per-position mean activation over a prompt dataset.
pub type MeanActivations = BTreeMap<NodeId, Vector>;

pub fn mean_activations(
    model: &Model,
    prompts: &[Vec<TokenId>],
) -> Result<MeanActivations, TrainError> {
    let mut sums: BTreeMap<NodeId, (Vector, usize)> = BTreeMap::new();
    for tokens in prompts {
        let run = model.forward(tokens)?;
        for (node, value) in run.cache().iter() {
            match sums.get_mut(node) {
                Some((sum, count)) => {
                    sum.axpy(1.0, value);
                    *count += 1;
                }
                None => {
                    sums.insert(*node, (value.clone(), 1));
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(node, (sum, count))| (node, sum.scale(1.0 / count as f64)))
        .collect())
}

/// Task examples with loss on the final-position target only.
pub fn task_examples(prompts: &[TaskPrompt]) -> Vec<TrainExample> {
    prompts
        .iter()
        .map(|p| TrainExample {
            tokens: p.tokens.clone(),
            targets: vec![(p.tokens.len() - 1, p.target)],
        })
        .collect()
}

/// Synthetic next-token data that teaches induction before any task exists:
/// a mixture of template-shaped sequences (random prefix, random feature
/// tokens, both orders) and plain `r + t + r` probe sequences. Targets sit on
/// the positions whose continuation is determined by the repeated structure.
pub fn induction_pretrain_examples(
    pool: &[TokenId],
    comma: TokenId,
    prefix_len: usize,
    count: usize,
    rng: &mut Rng,
) -> Vec<TrainExample> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if uniform_f64(rng) < 0.5 {
            out.push(template_shaped_example(pool, comma, prefix_len, rng));
        } else {
            out.push(probe_shaped_example(pool, prefix_len, rng));
        }
    }
    out
}

fn template_shaped_example(
    pool: &[TokenId],
    comma: TokenId,
    prefix_len: usize,
    rng: &mut Rng,
) -> TrainExample {
    let n = prefix_len;
    let drawn = sample_distinct(rng, pool.len(), n + 2);
    let seq: Vec<TokenId> = drawn[..n].iter().map(|&i| pool[i]).collect();
    let ind1 = pool[drawn[n]];
    let ind2 = pool[drawn[n + 1]];
    let alt = uniform_usize(rng, 2) == 0;
    let pattern: [TokenId; 7] = if alt {
        [ind2, comma, ind1, comma, ind2, comma, ind1]
    } else {
        [ind1, comma, ind1, comma, ind2, comma, ind2]
    };
    let mut tokens = Vec::with_capacity(2 * n + 11);
    tokens.extend_from_slice(&seq);
    tokens.extend_from_slice(&pattern);
    tokens.extend_from_slice(&seq);
    tokens.extend_from_slice(&[pattern[0], comma, pattern[2], comma]);
    // Second-sequence induction targets, then the tail whose continuations
    // repeat the pattern block, ending on the ind2 prediction.
    let mut targets = Vec::new();
    for i in 0..n.saturating_sub(1) {
        // Position n + 7 + i holds seq[i]; the next token is seq[i + 1].
        targets.push((n + 7 + i, seq[i + 1]));
    }
    targets.push((2 * n + 6, pattern[0]));
    targets.push((2 * n + 7, comma));
    targets.push((2 * n + 9, comma));
    targets.push((2 * n + 10, ind2));
    TrainExample { tokens, targets }
}

fn probe_shaped_example(pool: &[TokenId], prefix_len: usize, rng: &mut Rng) -> TrainExample {
    let n = prefix_len;
    let drawn = sample_distinct(rng, pool.len(), n + 1);
    let prefix: Vec<TokenId> = drawn[..n].iter().map(|&i| pool[i]).collect();
    let probe = pool[drawn[n]];
    let mut tokens = Vec::with_capacity(2 * n + 1);
    tokens.extend_from_slice(&prefix);
    tokens.push(probe);
    tokens.extend_from_slice(&prefix);
    let mut targets = Vec::new();
    for i in 1..n {
        // Position n + i holds prefix[i - 1]; the next token is prefix[i].
        targets.push((n + i, prefix[i]));
    }
    targets.push((2 * n, probe));
    TrainExample { tokens, targets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            d_head: 4,
            d_mlp: 0,
            vocab_size: 12,
            max_seq: 12,
            seed: 5,
        };
        let init = Model::new(config);
        let data = vec![TrainExample {
            tokens: vec![1, 2, 3],
            targets: vec![(2, 4)],
        }];
        let params = TrainParams {
            epochs: 3,
            batch_size: 1,
            learning_rate: 0.0,
            accuracy_threshold: 0.0,
            ..TrainParams::default()
        };
        let mut rng = rng_from_seed(1);
        let (model, _) = train_model(&config, &data, &[], &params, &mut rng).unwrap();
        for (a, b) in model
            .params()
            .named_tensors()
            .iter()
            .zip(init.params().named_tensors())
        {
            assert_eq!(a.1.data(), b.1.data());
        }
    }

    #[test]
    fn eval_accuracy_counts_argmax_hits() {
        // All-zero weights except one unembedding row: logits are uniform
        // zero, so the argmax is token 0 everywhere.
        let config = ModelConfig {
            n_layers: 0,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 0,
            vocab_size: 6,
            max_seq: 8,
            seed: 1,
        };
        let zeros = Model::new(config)
            .export_weights()
            .into_iter()
            .map(|mut t| {
                t.data.fill(0.0);
                t
            })
            .collect::<Vec<_>>();
        let model = Model::from_weights(config, &zeros).unwrap();
        let prompt = |target| crate::task::TaskPrompt {
            tokens: vec![1, 2, 3],
            assignment: alloc::collections::BTreeMap::new(),
            template: alloc::string::String::from("t"),
            target,
            contrast: 0,
        };
        // Uniform zero logits resolve ties to the last token index.
        let always = vec![prompt(5), prompt(5)];
        assert_eq!(eval_accuracy(&model, &always).unwrap(), 1.0);
        let never = vec![prompt(1), prompt(2), prompt(3)];
        assert_eq!(eval_accuracy(&model, &never).unwrap(), 0.0);
        let mixed = vec![prompt(5), prompt(2)];
        assert_eq!(eval_accuracy(&model, &mixed).unwrap(), 0.5);
    }

    #[test]
    fn collected_rows_match_cache_and_means() {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 0,
            vocab_size: 12,
            max_seq: 8,
            seed: 3,
        };
        let model = Model::new(config);
        let mut rng = rng_from_seed(4);
        let prompts: Vec<Vec<TokenId>> = (0..6)
            .map(|_| (0..5).map(|_| crate::rng::uniform_usize(&mut rng, 12)).collect())
            .collect();
        let rows = collect_residual_activations(&model, &prompts, 1, &[4]).unwrap();
        assert_eq!(rows.rows(), prompts.len());
        let run = model.forward(&prompts[0]).unwrap();
        let direct = run
            .cache()
            .get(&NodeId::new(NodeKind::ResidPost { layer: 1 }, 4))
            .unwrap();
        assert_eq!(rows.row(0), direct.as_slice());
        // The positionwise mean agrees with the mean of collected rows.
        let means = mean_activations(&model, &prompts).unwrap();
        let stored = &means[&NodeId::new(NodeKind::ResidPost { layer: 1 }, 4)];
        for c in 0..8 {
            let col_mean: f64 =
                (0..rows.rows()).map(|r| rows.get(r, c)).sum::<f64>() / rows.rows() as f64;
            assert!((col_mean - stored.0[c]).abs() < 1e-12);
        }
        // Out-of-range requests are rejected.
        assert!(collect_residual_activations(&model, &prompts, 5, &[0]).is_err());
        assert!(collect_residual_activations(&model, &prompts, 1, &[9]).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_loss_curves() {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 0,
            vocab_size: 16,
            max_seq: 24,
            seed: 9,
        };
        let pool: Vec<TokenId> = (0..15).collect();
        let params = TrainParams {
            epochs: 2,
            batch_size: 4,
            accuracy_threshold: 0.0,
            ..TrainParams::default()
        };
        let mut curves = Vec::new();
        for _ in 0..2 {
            let mut rng = rng_from_seed(77);
            let data = induction_pretrain_examples(&pool, 15, 5, 32, &mut rng);
            let (_, report) = train_model(&config, &data, &[], &params, &mut rng).unwrap();
            curves.push(report.loss_curve);
        }
        assert_eq!(curves[0], curves[1]);
    }
}
