//! Edge-level causal attribution and cross-section group formation.
//!
//! Three estimators of the patching effect on a metric: a first-order
//! expansion at the clean activation, the integrated variant averaging
//! gradients along the clean-to-corrupt interpolation, and the clean-corrupt
//! form that averages the endpoint gradients. Scores averaged over
//! counterfactual pairs feed top-n, sign-split group formation and a
//! mean-ablation validation filter.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    DownstreamInput, EdgeId, ForwardRun, Metric, Model, ModelError, NodeId, NodeKind, TokenId,
};
use crate::task::CounterfactualPair;
use crate::train::MeanActivations;

#[derive(Clone, Debug, PartialEq)]
pub enum AttributionError {
    LengthMismatch { clean: usize, corrupt: usize },
    EmptyPairs,
    EmptyEdges,
    MixedVariedAttributes { first: String, other: String },
    ZeroSteps,
    MissingMean { node: NodeId },
    Model(ModelError),
}

impl fmt::Display for AttributionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributionError::LengthMismatch { clean, corrupt } => {
                write!(f, "clean/corrupt lengths differ: {clean} vs {corrupt}")
            }
            AttributionError::EmptyPairs => write!(f, "no counterfactual pairs supplied"),
            AttributionError::EmptyEdges => write!(f, "no edges supplied"),
            AttributionError::MixedVariedAttributes { first, other } => {
                write!(f, "pairs vary different attributes: {first:?} vs {other:?}")
            }
            AttributionError::ZeroSteps => write!(f, "integrated estimator needs steps >= 1"),
            AttributionError::MissingMean { node } => {
                write!(f, "no mean activation recorded for node {node}")
            }
            AttributionError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl From<ModelError> for AttributionError {
    fn from(e: ModelError) -> Self {
        AttributionError::Model(e)
    }
}

/// Which approximation of the patching effect to use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Basic,
    CleanCorrupt,
    Integrated { steps: usize },
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Basic => String::from("basic"),
            Estimator::CleanCorrupt => String::from("clean-corrupt"),
            Estimator::Integrated { steps } => format!("integrated-{steps}"),
        }
    }
}

fn check_lengths(clean: &[TokenId], corrupt: &[TokenId]) -> Result<(), AttributionError> {
    if clean.len() != corrupt.len() {
        return Err(AttributionError::LengthMismatch {
            clean: clean.len(),
            corrupt: corrupt.len(),
        });
    }
    Ok(())
}

fn min_downstream(edges: &[EdgeId]) -> usize {
    edges.iter().map(|e| e.position).min().unwrap_or(0)
}

/// First-order estimate `(e_corr - e_clean) . dL/de` at the clean run.
pub fn attribution_basic(
    model: &Model,
    clean: &[TokenId],
    corrupt: &[TokenId],
    metric: &Metric,
    edges: &[EdgeId],
) -> Result<BTreeMap<EdgeId, f64>, AttributionError> {
    check_lengths(clean, corrupt)?;
    if edges.is_empty() {
        return Err(AttributionError::EmptyEdges);
    }
    let clean_run = model.forward(clean)?;
    let corrupt_run = model.forward(corrupt)?;
    let grads = model.backward_reads_from(&clean_run, metric, min_downstream(edges))?;
    let mut scores = BTreeMap::new();
    for edge in edges {
        model.validate_edge(edge, clean.len())?;
        let e_clean = clean_run.cache().get(&edge.upstream).expect("cached node");
        let e_corr = corrupt_run.cache().get(&edge.upstream).expect("cached node");
        let grad = grads.edge_grad(edge).expect("read gradient");
        scores.insert(*edge, e_corr.sub(e_clean).dot(grad));
    }
    Ok(scores)
}

/// Clean-corrupt estimate: the activation difference dotted with the average
/// of the clean-run and corrupt-run gradients. Two forward and two backward
/// passes cover every edge.
pub fn attribution_clean_corrupt(
    model: &Model,
    clean: &[TokenId],
    corrupt: &[TokenId],
    metric: &Metric,
    edges: &[EdgeId],
) -> Result<BTreeMap<EdgeId, f64>, AttributionError> {
    check_lengths(clean, corrupt)?;
    if edges.is_empty() {
        return Err(AttributionError::EmptyEdges);
    }
    let from = min_downstream(edges);
    let clean_run = model.forward(clean)?;
    let corrupt_run = model.forward(corrupt)?;
    let grads_clean = model.backward_reads_from(&clean_run, metric, from)?;
    let grads_corrupt = model.backward_reads_from(&corrupt_run, metric, from)?;
    let mut scores = BTreeMap::new();
    for edge in edges {
        model.validate_edge(edge, clean.len())?;
        let e_clean = clean_run.cache().get(&edge.upstream).expect("cached node");
        let e_corr = corrupt_run.cache().get(&edge.upstream).expect("cached node");
        let diff = e_corr.sub(e_clean);
        let g_clean = grads_clean.edge_grad(edge).expect("read gradient");
        let g_corr = grads_corrupt.edge_grad(edge).expect("read gradient");
        scores.insert(*edge, 0.5 * diff.dot(g_clean) + 0.5 * diff.dot(g_corr));
    }
    Ok(scores)
}

/// Integrated estimate: gradients taken at `steps` points along the
/// interpolation `e_clean + k/steps (e_corr - e_clean)`, all edges patched
/// together per step, so the whole batch costs `steps` patched passes.
pub fn attribution_integrated(
    model: &Model,
    clean: &[TokenId],
    corrupt: &[TokenId],
    metric: &Metric,
    edges: &[EdgeId],
    steps: usize,
) -> Result<BTreeMap<EdgeId, f64>, AttributionError> {
    check_lengths(clean, corrupt)?;
    if edges.is_empty() {
        return Err(AttributionError::EmptyEdges);
    }
    if steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    let from = min_downstream(edges);
    let clean_run = model.forward(clean)?;
    let corrupt_run = model.forward(corrupt)?;
    let mut grad_sums: BTreeMap<EdgeId, crate::linalg::Vector> = BTreeMap::new();
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        let patches: Vec<(EdgeId, crate::linalg::Vector)> = edges
            .iter()
            .map(|edge| {
                let e_clean = clean_run.cache().get(&edge.upstream).expect("cached node");
                let e_corr = corrupt_run.cache().get(&edge.upstream).expect("cached node");
                let interp = e_clean.add(&e_corr.sub(e_clean).scale(t));
                (*edge, interp)
            })
            .collect();
        let patched = model.run_with_edge_patch_against(clean, &patches, &clean_run)?;
        let grads = model.backward_reads_from(&patched, metric, from)?;
        for edge in edges {
            let g = grads.edge_grad(edge).expect("read gradient");
            match grad_sums.get_mut(edge) {
                Some(sum) => sum.axpy(1.0, g),
                None => {
                    grad_sums.insert(*edge, g.clone());
                }
            }
        }
    }
    let mut scores = BTreeMap::new();
    for edge in edges {
        let e_clean = clean_run.cache().get(&edge.upstream).expect("cached node");
        let e_corr = corrupt_run.cache().get(&edge.upstream).expect("cached node");
        let mean_grad = grad_sums.remove(edge).expect("accumulated").scale(1.0 / steps as f64);
        scores.insert(*edge, e_corr.sub(e_clean).dot(&mean_grad));
    }
    Ok(scores)
}

/// Per-edge mean attribution score over counterfactual pairs, with the metric
/// resolved per pair as the logit difference between the clean prompt's
/// target and contrast tokens at the final position.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScoreTable {
    pub attribute: String,
    pub metric: String,
    pub pair_count: usize,
    pub scores: BTreeMap<EdgeId, f64>,
}

pub fn average_attributions(
    model: &Model,
    pairs: &[CounterfactualPair],
    estimator: Estimator,
    edges: &[EdgeId],
) -> Result<EdgeScoreTable, AttributionError> {
    if pairs.is_empty() {
        return Err(AttributionError::EmptyPairs);
    }
    let attribute = pairs[0].varied_attribute.clone();
    for pair in pairs {
        if pair.varied_attribute != attribute {
            return Err(AttributionError::MixedVariedAttributes {
                first: attribute,
                other: pair.varied_attribute.clone(),
            });
        }
    }
    let mut sums: BTreeMap<EdgeId, f64> = edges.iter().map(|e| (*e, 0.0)).collect();
    for pair in pairs {
        let metric = Metric::logit_diff_at_last(
            pair.clean.tokens.len(),
            pair.clean.target,
            pair.clean.contrast,
        );
        let scores = match estimator {
            Estimator::Basic => {
                attribution_basic(model, &pair.clean.tokens, &pair.corrupt.tokens, &metric, edges)?
            }
            Estimator::CleanCorrupt => attribution_clean_corrupt(
                model,
                &pair.clean.tokens,
                &pair.corrupt.tokens,
                &metric,
                edges,
            )?,
            Estimator::Integrated { steps } => attribution_integrated(
                model,
                &pair.clean.tokens,
                &pair.corrupt.tokens,
                &metric,
                edges,
                steps,
            )?,
        };
        for (edge, score) in scores {
            *sums.get_mut(&edge).expect("known edge") += score;
        }
    }
    let n = pairs.len() as f64;
    Ok(EdgeScoreTable {
        attribute,
        metric: String::from("logit_diff"),
        pair_count: pairs.len(),
        scores: sums.into_iter().map(|(e, s)| (e, s / n)).collect(),
    })
}

/// Whether patching this group increases or reduces the logit difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Increase,
    Reduce,
}

impl Sign {
    pub fn label(&self) -> &'static str {
        match self {
            Sign::Increase => "increase",
            Sign::Reduce => "reduce",
        }
    }
}

/// An attribute-tagged, sign-tagged, score-ordered set of edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionGroup {
    pub attribute: String,
    pub sign: Sign,
    /// Ordered by |mean score| descending; ties broken by edge id.
    pub edges: Vec<EdgeId>,
    /// Validated prefix size chosen by the filter step.
    pub selected_subset_size: Option<usize>,
}

impl CrossSectionGroup {
    pub fn id(&self) -> String {
        format!("{}-{}", self.attribute, self.sign.label())
    }

    /// The filter-selected prefix (the whole list before filtering).
    pub fn selected_edges(&self) -> &[EdgeId] {
        let n = self.selected_subset_size.unwrap_or(self.edges.len());
        &self.edges[..n.min(self.edges.len())]
    }

    /// Distinct upstream nodes of the selected prefix, in id order.
    pub fn upstream_nodes(&self) -> Vec<NodeId> {
        let mut nodes: Vec<NodeId> = self.selected_edges().iter().map(|e| e.upstream).collect();
        nodes.sort();
        nodes.dedup();
        nodes
    }
}

/// Top-n edges by |mean score| split into a positive and a negative group.
/// Zero-score edges carry no sign and never join a group, so an all-zero
/// table yields no groups.
pub fn form_groups(table: &EdgeScoreTable, n: usize) -> Vec<CrossSectionGroup> {
    let mut entries: Vec<(EdgeId, f64)> = table
        .scores
        .iter()
        .filter(|(_, &s)| s != 0.0)
        .map(|(e, &s)| (*e, s))
        .collect();
    // Stable sort on top of edge-id order gives a deterministic tie-break.
    entries.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .expect("finite scores")
    });
    entries.truncate(n);
    let mut groups = Vec::new();
    for (sign, keep) in [(Sign::Increase, true), (Sign::Reduce, false)] {
        let edges: Vec<EdgeId> = entries
            .iter()
            .filter(|(_, s)| (*s > 0.0) == keep)
            .map(|(e, _)| *e)
            .collect();
        if !edges.is_empty() {
            groups.push(CrossSectionGroup {
                attribute: table.attribute.clone(),
                sign,
                edges,
                selected_subset_size: None,
            });
        }
    }
    groups
}

/// Replaces each edge's upstream contribution with its dataset mean, as read
/// by that edge's downstream input only.
pub fn edge_mean_ablation(
    model: &Model,
    tokens: &[TokenId],
    edges: &[EdgeId],
    means: &MeanActivations,
) -> Result<ForwardRun, AttributionError> {
    let clean = model.forward(tokens)?;
    edge_mean_ablation_against(model, tokens, edges, means, &clean)
}

pub fn edge_mean_ablation_against(
    model: &Model,
    tokens: &[TokenId],
    edges: &[EdgeId],
    means: &MeanActivations,
    clean: &ForwardRun,
) -> Result<ForwardRun, AttributionError> {
    let patches: Result<Vec<_>, AttributionError> = edges
        .iter()
        .map(|edge| {
            let mean = means
                .get(&edge.upstream)
                .ok_or(AttributionError::MissingMean {
                    node: edge.upstream,
                })?;
            Ok((*edge, mean.clone()))
        })
        .collect();
    Ok(model.run_with_edge_patch_against(tokens, &patches?, clean)?)
}

/// Outcome of validating one group by incremental edge mean ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub group: CrossSectionGroup,
    /// (prefix size, |mean logit-diff change|) per ladder rung.
    pub ladder: Vec<(usize, f64)>,
    pub best_delta: f64,
    pub retained: bool,
}

/// Geometric prefix sizes 1, 2, 4, ... capped by and always including `n`.
fn prefix_ladder(n: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut s = 1;
    while s < n {
        sizes.push(s);
        s *= 2;
    }
    if n > 0 {
        sizes.push(n);
    }
    sizes
}

/// Mean-ablates growing prefixes of every group, keeps the prefix with the
/// largest absolute change in logit difference, and drops groups whose best
/// change falls below `drop_ratio` times the mean best change across groups.
pub fn filter_groups(
    model: &Model,
    groups: &[CrossSectionGroup],
    prompts: &[crate::task::TaskPrompt],
    means: &MeanActivations,
    drop_ratio: f64,
) -> Result<Vec<FilterOutcome>, AttributionError> {
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    let mut clean_runs = Vec::with_capacity(prompts.len());
    let mut clean_ld = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let run = model.forward(&prompt.tokens)?;
        let metric = Metric::logit_diff_at_last(prompt.tokens.len(), prompt.target, prompt.contrast);
        clean_ld.push(metric.value(run.logits()));
        clean_runs.push(run);
    }
    let mut scored: Vec<(CrossSectionGroup, Vec<(usize, f64)>, usize, f64)> = Vec::new();
    for group in groups {
        let mut ladder = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        for size in prefix_ladder(group.edges.len()) {
            let edges = &group.edges[..size];
            let mut delta_sum = 0.0;
            for (i, prompt) in prompts.iter().enumerate() {
                let ablated =
                    edge_mean_ablation_against(model, &prompt.tokens, edges, means, &clean_runs[i])?;
                let metric =
                    Metric::logit_diff_at_last(prompt.tokens.len(), prompt.target, prompt.contrast);
                delta_sum += metric.value(ablated.logits()) - clean_ld[i];
            }
            let delta = (delta_sum / prompts.len().max(1) as f64).abs();
            ladder.push((size, delta));
            if best.is_none() || delta > best.unwrap().1 {
                best = Some((size, delta));
            }
        }
        let (best_size, best_delta) = best.unwrap_or((group.edges.len(), 0.0));
        let mut selected = group.clone();
        selected.selected_subset_size = Some(best_size);
        scored.push((selected, ladder, best_size, best_delta));
    }
    let mean_best: f64 =
        scored.iter().map(|(_, _, _, d)| d).sum::<f64>() / scored.len() as f64;
    Ok(scored
        .into_iter()
        .map(|(group, ladder, _, best_delta)| FilterOutcome {
            group,
            ladder,
            best_delta,
            retained: best_delta >= drop_ratio * mean_best,
        })
        .collect())
}

/// Position-selection rule for the edge inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionRule {
    /// Downstream position at/after the cutoff; upstream free (default).
    Downstream,
    /// Both endpoints at/after the cutoff.
    Both,
}

/// Attention-centric edge inventory: head outputs feeding q/k/v inputs of
/// later heads and the unembedding, at positions from `from_position` on.
/// MLP endpoints join only when enabled.
pub fn edge_inventory(
    model: &Model,
    seq_len: usize,
    from_position: usize,
    rule: PositionRule,
    include_mlp: bool,
) -> Vec<EdgeId> {
    let cfg = model.config();
    let mut edges = Vec::new();
    let upstream_nodes = |layer_limit: usize, position: usize| -> Vec<NodeId> {
        let mut ups = Vec::new();
        for l0 in 0..layer_limit {
            for h0 in 0..cfg.n_heads {
                ups.push(NodeId::new(NodeKind::AttnHeadOut { layer: l0, head: h0 }, position));
            }
            if include_mlp && cfg.has_mlp() {
                ups.push(NodeId::new(NodeKind::MlpOut { layer: l0 }, position));
            }
        }
        ups
    };
    for p in from_position..seq_len {
        for l1 in 0..cfg.n_layers {
            for h1 in 0..cfg.n_heads {
                for upstream in upstream_nodes(l1, p) {
                    edges.push(EdgeId {
                        upstream,
                        input: DownstreamInput::AttnQ { layer: l1, head: h1 },
                        position: p,
                    });
                }
                let q_start = match rule {
                    PositionRule::Downstream => 0,
                    PositionRule::Both => from_position,
                };
                for q in q_start..=p {
                    for upstream in upstream_nodes(l1, q) {
                        for input in [
                            DownstreamInput::AttnK { layer: l1, head: h1 },
                            DownstreamInput::AttnV { layer: l1, head: h1 },
                        ] {
                            edges.push(EdgeId {
                                upstream,
                                input,
                                position: p,
                            });
                        }
                    }
                }
            }
        }
        for upstream in upstream_nodes(cfg.n_layers, p) {
            edges.push(EdgeId {
                upstream,
                input: DownstreamInput::LogitsIn,
                position: p,
            });
        }
    }
    edges.sort();
    edges.dedup();
    edges
}
