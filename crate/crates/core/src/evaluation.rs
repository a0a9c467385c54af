//! Downstream evaluation of reconstruction methods over cross-section groups:
//! sufficiency/necessity scoring and sparse-controllability edits, with a
//! brute-force edit oracle for validation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::attribution::CrossSectionGroup;
use crate::dictionary::{DictionaryError, SupervisedFeatureDictionary};
use crate::linalg::Vector;
use crate::model::{ActivationCache, Metric, Model, ModelError, NodeId, NodeKind, TokenId};
use crate::projection::{
    project_sublayer, reconstruct_cross_section, CrossSectionSource, ProjectionError,
    ProjectionResult,
};
use crate::sae::SparseAutoencoder;
use crate::task::CounterfactualPair;
use crate::train::MeanActivations;

#[derive(Clone, Debug)]
pub enum EvalError {
    EmptyGroup { group: String },
    EmptyPrompts,
    MissingDictionary { node: NodeId },
    MissingMean { node: NodeId },
    WrongAttribute { expected: String, got: String },
    UnknownEditValue { attribute: String, value: String },
    BruteForceTooLarge { source: usize, target: usize, budget: usize },
    Model(ModelError),
    Projection(ProjectionError),
    Dictionary(DictionaryError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyGroup { group } => write!(f, "group {group} has no edges"),
            EvalError::EmptyPrompts => write!(f, "no evaluation prompts"),
            EvalError::MissingDictionary { node } => {
                write!(f, "no supervised dictionary fitted for node {node}")
            }
            EvalError::MissingMean { node } => write!(f, "no mean activation for node {node}"),
            EvalError::WrongAttribute { expected, got } => {
                write!(f, "pair varies {got:?} but the group is for {expected:?}")
            }
            EvalError::UnknownEditValue { attribute, value } => {
                write!(f, "attribute {attribute:?} has no value {value:?} to edit")
            }
            EvalError::BruteForceTooLarge { source, target, budget } => write!(
                f,
                "brute-force oracle capped: {source}x{target} features at budget {budget}"
            ),
            EvalError::Model(e) => write!(f, "model error: {e}"),
            EvalError::Projection(e) => write!(f, "projection error: {e}"),
            EvalError::Dictionary(e) => write!(f, "dictionary error: {e}"),
        }
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<ProjectionError> for EvalError {
    fn from(e: ProjectionError) -> Self {
        EvalError::Projection(e)
    }
}

impl From<DictionaryError> for EvalError {
    fn from(e: DictionaryError) -> Self {
        EvalError::Dictionary(e)
    }
}

/// A reconstruction/edit method under evaluation.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Supervised {
        dicts: &'a BTreeMap<NodeId, SupervisedFeatureDictionary>,
        weighted: bool,
    },
    Sae {
        sae: &'a SparseAutoencoder,
        layer: usize,
    },
    /// Reconstruction is the activation itself; edits leave it unchanged.
    Identity,
    /// Reconstruction is the dataset mean.
    Mean,
    /// Test-2 reference: the edit is the target activation itself.
    GroundTruth,
}

impl Method<'_> {
    pub fn label(&self) -> String {
        match self {
            Method::Supervised { weighted: false, .. } => String::from("supervised"),
            Method::Supervised { weighted: true, .. } => String::from("supervised-weighted"),
            Method::Sae { layer, .. } => alloc::format!("sae-l{layer}"),
            Method::Identity => String::from("identity"),
            Method::Mean => String::from("mean"),
            Method::GroundTruth => String::from("ground-truth"),
        }
    }

    fn reconstruct(
        &self,
        cache: &ActivationCache,
        node: &NodeId,
        assignment: &BTreeMap<String, String>,
        means: &MeanActivations,
    ) -> Result<Vector, EvalError> {
        match self {
            Method::Supervised { dicts, weighted } => {
                let dict = dicts
                    .get(node)
                    .ok_or(EvalError::MissingDictionary { node: *node })?;
                Ok(reconstruct_cross_section(
                    CrossSectionSource::Dictionary {
                        dict,
                        weighted: *weighted,
                    },
                    cache,
                    node,
                    assignment,
                )?)
            }
            Method::Sae { sae, layer } => Ok(reconstruct_cross_section(
                CrossSectionSource::Sae { sae, layer: *layer },
                cache,
                node,
                assignment,
            )?),
            Method::Identity | Method::GroundTruth => Ok(cache
                .get(node)
                .ok_or(EvalError::Model(ModelError::InvalidNode {
                    reason: "node missing from cache",
                }))?
                .clone()),
            Method::Mean => Ok(means
                .get(node)
                .ok_or(EvalError::MissingMean { node: *node })?
                .clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Test1Kind {
    Sufficiency,
    Necessity,
}

impl Test1Kind {
    pub fn label(&self) -> &'static str {
        match self {
            Test1Kind::Sufficiency => "sufficiency",
            Test1Kind::Necessity => "necessity",
        }
    }
}

/// One Test-1 score: the clean, patched and mean-baseline logit differences
/// plus the normalized score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Test1Score {
    pub group: String,
    pub method: String,
    pub kind: Test1Kind,
    pub l_clean: f64,
    pub l_patched: f64,
    pub l_mean: f64,
    pub score: f64,
    /// Set when |l_clean - l_mean| is too small to normalize against.
    pub degenerate: bool,
}

const DEGENERATE_DENOMINATOR: f64 = 1e-6;

fn test1_run(
    model: &Model,
    group: &CrossSectionGroup,
    method: &Method<'_>,
    prompts: &[crate::task::TaskPrompt],
    means: &MeanActivations,
    kind: Test1Kind,
) -> Result<Test1Score, EvalError> {
    let nodes = group.upstream_nodes();
    if nodes.is_empty() {
        return Err(EvalError::EmptyGroup { group: group.id() });
    }
    if prompts.is_empty() {
        return Err(EvalError::EmptyPrompts);
    }
    let mut l_clean = 0.0;
    let mut l_patched = 0.0;
    let mut l_mean = 0.0;
    for prompt in prompts {
        let metric = Metric::logit_diff_at_last(prompt.tokens.len(), prompt.target, prompt.contrast);
        let clean = model.forward(&prompt.tokens)?;
        l_clean += metric.value(clean.logits());

        let mut method_patches = Vec::with_capacity(nodes.len());
        let mut mean_patches = Vec::with_capacity(nodes.len());
        for node in &nodes {
            let recon = method.reconstruct(clean.cache(), node, &prompt.assignment, means)?;
            let mean = means
                .get(node)
                .ok_or(EvalError::MissingMean { node: *node })?;
            let replacement = match kind {
                Test1Kind::Sufficiency => recon,
                Test1Kind::Necessity => {
                    // Delete what the method captures: mean + (a - a_hat).
                    let a = clean.cache().get(node).expect("cached node");
                    mean.add(&a.sub(&recon))
                }
            };
            method_patches.push((*node, replacement));
            mean_patches.push((*node, mean.clone()));
        }
        let patched = model.run_with_node_patch(&prompt.tokens, &method_patches)?;
        l_patched += metric.value(patched.logits());
        let mean_run = model.run_with_node_patch(&prompt.tokens, &mean_patches)?;
        l_mean += metric.value(mean_run.logits());
    }
    let n = prompts.len() as f64;
    l_clean /= n;
    l_patched /= n;
    l_mean /= n;
    let denom = (l_clean - l_mean).abs();
    let degenerate = denom < DEGENERATE_DENOMINATOR;
    let score = if degenerate {
        f64::NAN
    } else {
        match kind {
            Test1Kind::Sufficiency => (l_patched - l_mean).abs() / denom,
            Test1Kind::Necessity => 1.0 - (l_patched - l_mean).abs() / denom,
        }
    };
    Ok(Test1Score {
        group: group.id(),
        method: method.label(),
        kind,
        l_clean,
        l_patched,
        l_mean,
        score,
        degenerate,
    })
}

/// Replaces the group's upstream activations with their reconstructions and
/// scores how much of the clean-vs-mean logit difference survives.
pub fn test1_sufficiency(
    model: &Model,
    group: &CrossSectionGroup,
    method: &Method<'_>,
    prompts: &[crate::task::TaskPrompt],
    means: &MeanActivations,
) -> Result<Test1Score, EvalError> {
    test1_run(model, group, method, prompts, means, Test1Kind::Sufficiency)
}

/// Removes each reconstruction from its activation and scores how much of
/// the logit difference is lost.
pub fn test1_necessity(
    model: &Model,
    group: &CrossSectionGroup,
    method: &Method<'_>,
    prompts: &[crate::task::TaskPrompt],
    means: &MeanActivations,
) -> Result<Test1Score, EvalError> {
    test1_run(model, group, method, prompts, means, Test1Kind::Necessity)
}

/// Supervised feature swap: subtract the source value's feature, add the
/// target value's.
pub fn supervised_edit(
    dict: &SupervisedFeatureDictionary,
    activation: &Vector,
    attribute: &str,
    from_value: &str,
    to_value: &str,
) -> Result<Vector, EvalError> {
    if from_value == to_value {
        return Ok(activation.clone());
    }
    let from = dict
        .feature(attribute, from_value)
        .map_err(|_| EvalError::UnknownEditValue {
            attribute: String::from(attribute),
            value: String::from(from_value),
        })?;
    let to = dict
        .feature(attribute, to_value)
        .map_err(|_| EvalError::UnknownEditValue {
            attribute: String::from(attribute),
            value: String::from(to_value),
        })?;
    let mut out = activation.clone();
    out.axpy(-1.0, from);
    out.axpy(1.0, to);
    Ok(out)
}

/// Result of a greedy feature-exchange edit.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyEdit {
    pub edited: Vector,
    /// (source feature index, target feature index) per applied round.
    pub swaps: Vec<(usize, usize)>,
    /// Distance to the target activation before any swap and after each one.
    pub distances: Vec<f64>,
}

impl GreedyEdit {
    /// Edited activation after the first `budget` swaps.
    pub fn edited_at_budget(
        &self,
        source: &[(Vector, f64)],
        target: &[(Vector, f64)],
        a_s: &Vector,
        budget: usize,
    ) -> Vector {
        let mut out = a_s.clone();
        for &(i, j) in self.swaps.iter().take(budget) {
            out.axpy(-source[i].1, &source[i].0);
            out.axpy(target[j].1, &target[j].0);
        }
        out
    }

    pub fn final_distance(&self) -> f64 {
        *self.distances.last().expect("at least the initial distance")
    }
}

/// Greedily exchanges up to `k` (remove source feature, add target feature)
/// pairs to pull `a_s` toward `a_t`; each feature is consumed once, every
/// pair is evaluated each round, and rounds stop early when no pair strictly
/// improves the distance.
pub fn greedy_edit(
    source: &[(Vector, f64)],
    target: &[(Vector, f64)],
    a_s: &Vector,
    a_t: &Vector,
    k: usize,
) -> GreedyEdit {
    let mut base = a_s.sub(a_t);
    let mut swaps = Vec::new();
    let mut distances = vec![base.norm()];
    let mut source_used = vec![false; source.len()];
    let mut target_used = vec![false; target.len()];
    for _ in 0..k {
        let current = *distances.last().expect("nonempty");
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, (u_s, c_s)) in source.iter().enumerate() {
            if source_used[i] {
                continue;
            }
            let after_remove = {
                let mut v = base.clone();
                v.axpy(-*c_s, u_s);
                v
            };
            for (j, (u_t, c_t)) in target.iter().enumerate() {
                if target_used[j] {
                    continue;
                }
                let mut cand = after_remove.clone();
                cand.axpy(*c_t, u_t);
                let dist = cand.norm();
                if best.is_none() || dist < best.unwrap().2 {
                    best = Some((i, j, dist));
                }
            }
        }
        match best {
            Some((i, j, dist)) if dist < current => {
                base.axpy(-source[i].1, &source[i].0);
                base.axpy(target[j].1, &target[j].0);
                source_used[i] = true;
                target_used[j] = true;
                swaps.push((i, j));
                distances.push(dist);
            }
            _ => break,
        }
    }
    let edited = a_t.add(&base);
    GreedyEdit {
        edited,
        swaps,
        distances,
    }
}

/// Exhaustive optimum over all r-swap combinations, r <= k, for tiny
/// instances; the oracle greedy is checked against.
pub fn brute_force_edit(
    source: &[(Vector, f64)],
    target: &[(Vector, f64)],
    a_s: &Vector,
    a_t: &Vector,
    k: usize,
) -> Result<(Vector, f64), EvalError> {
    if k > 2 || source.len() > 64 || target.len() > 64 {
        return Err(EvalError::BruteForceTooLarge {
            source: source.len(),
            target: target.len(),
            budget: k,
        });
    }
    let base = a_s.sub(a_t);
    let mut best_dist = base.norm();
    let mut best = base.clone();
    if k >= 1 {
        for i in 0..source.len() {
            let mut removed = base.clone();
            removed.axpy(-source[i].1, &source[i].0);
            for j in 0..target.len() {
                let mut cand = removed.clone();
                cand.axpy(target[j].1, &target[j].0);
                let dist = cand.norm();
                if dist < best_dist {
                    best_dist = dist;
                    best = cand.clone();
                }
                if k >= 2 {
                    for i2 in (i + 1)..source.len() {
                        let mut cand2 = cand.clone();
                        cand2.axpy(-source[i2].1, &source[i2].0);
                        for j2 in 0..target.len() {
                            if j2 == j {
                                continue;
                            }
                            let mut cand3 = cand2.clone();
                            cand3.axpy(target[j2].1, &target[j2].0);
                            let dist3 = cand3.norm();
                            if dist3 < best_dist {
                                best_dist = dist3;
                                best = cand3;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((a_t.add(&best), best_dist))
}

/// Whether each upstream node gets its own edit budget or the group shares
/// one global budget across nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditMode {
    PerNode,
    SharedBudget,
}

impl EditMode {
    pub fn label(&self) -> &'static str {
        match self {
            EditMode::PerNode => "per-node",
            EditMode::SharedBudget => "shared-budget",
        }
    }
}

/// One evaluated example of Test 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub source_assignment: BTreeMap<String, String>,
    pub target_assignment: BTreeMap<String, String>,
    pub template: String,
    pub varied_attribute: String,
    pub predicted_edit: TokenId,
    pub predicted_truth: TokenId,
    pub success: bool,
}

/// Success statistics of one (group, method, budget) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub group: String,
    pub method: String,
    pub mode: EditMode,
    pub budget: usize,
    pub success_rate: f64,
    pub records: Vec<EditRecord>,
}

fn argmax(v: &Vector) -> usize {
    v.0.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .expect("nonempty")
}

/// Per-node projection state for the SAE edit path.
struct SaeEditState {
    source_features: Vec<(Vector, f64)>,
    target_features: Vec<(Vector, f64)>,
    greedy: GreedyEdit,
}

/// Runs Test 2 for one group and method across the given edit budgets.
/// Success means matching the prediction under the ground-truth patch of the
/// target activations at every upstream node of the group.
pub fn test2_run(
    model: &Model,
    group: &CrossSectionGroup,
    method: &Method<'_>,
    pairs: &[CounterfactualPair],
    budgets: &[usize],
    mode: EditMode,
    means: &MeanActivations,
) -> Result<Vec<EditOutcome>, EvalError> {
    let nodes = group.upstream_nodes();
    if nodes.is_empty() {
        return Err(EvalError::EmptyGroup { group: group.id() });
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyPrompts);
    }
    for pair in pairs {
        if pair.varied_attribute != group.attribute {
            return Err(EvalError::WrongAttribute {
                expected: group.attribute.clone(),
                got: pair.varied_attribute.clone(),
            });
        }
    }
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    let mut outcomes: Vec<EditOutcome> = budgets
        .iter()
        .map(|&budget| EditOutcome {
            group: group.id(),
            method: method.label(),
            mode,
            budget,
            success_rate: 0.0,
            records: Vec::with_capacity(pairs.len()),
        })
        .collect();

    for pair in pairs {
        let source_run = model.forward(&pair.clean.tokens)?;
        let target_run = model.forward(&pair.corrupt.tokens)?;
        let truth_patches: Vec<(NodeId, Vector)> = nodes
            .iter()
            .map(|node| {
                (
                    *node,
                    target_run.cache().get(node).expect("cached node").clone(),
                )
            })
            .collect();
        let truth_run = model.run_with_node_patch(&pair.clean.tokens, &truth_patches)?;
        let predicted_truth = argmax(truth_run.logits().last().expect("nonempty"));
        let source_pred = argmax(source_run.logits().last().expect("nonempty"));

        // Per-node edit states for budgeted methods.
        let mut sae_states: BTreeMap<NodeId, SaeEditState> = BTreeMap::new();
        if let Method::Sae { sae, layer } = method {
            for node in &nodes {
                let a_s = source_run.cache().get(node).expect("cached").clone();
                let a_t = target_run.cache().get(node).expect("cached").clone();
                let recon_s = project_node(sae, *layer, &source_run, node)?;
                let recon_t = project_node(sae, *layer, &target_run, node)?;
                let source_features = recon_s.weighted_features(sae);
                let target_features = recon_t.weighted_features(sae);
                let greedy = match mode {
                    EditMode::PerNode => {
                        greedy_edit(&source_features, &target_features, &a_s, &a_t, max_budget)
                    }
                    // Budget distribution happens below; compute the full
                    // ladder here too.
                    EditMode::SharedBudget => {
                        greedy_edit(&source_features, &target_features, &a_s, &a_t, max_budget)
                    }
                };
                sae_states.insert(
                    *node,
                    SaeEditState {
                        source_features,
                        target_features,
                        greedy,
                    },
                );
            }
        }

        for (slot, &budget) in budgets.iter().enumerate() {
            let predicted_edit = if budget == 0 {
                match method {
                    Method::GroundTruth => predicted_truth,
                    Method::Mean => {
                        let patches: Result<Vec<_>, EvalError> = nodes
                            .iter()
                            .map(|node| {
                                Ok((
                                    *node,
                                    means
                                        .get(node)
                                        .ok_or(EvalError::MissingMean { node: *node })?
                                        .clone(),
                                ))
                            })
                            .collect();
                        let run = model.run_with_node_patch(&pair.clean.tokens, &patches?)?;
                        argmax(run.logits().last().expect("nonempty"))
                    }
                    _ => source_pred,
                }
            } else {
                let mut patches: Vec<(NodeId, Vector)> = Vec::with_capacity(nodes.len());
                match method {
                    Method::GroundTruth => {
                        patches = truth_patches.clone();
                    }
                    Method::Identity => {
                        for node in &nodes {
                            patches.push((
                                *node,
                                source_run.cache().get(node).expect("cached").clone(),
                            ));
                        }
                    }
                    Method::Mean => {
                        for node in &nodes {
                            patches.push((
                                *node,
                                means
                                    .get(node)
                                    .ok_or(EvalError::MissingMean { node: *node })?
                                    .clone(),
                            ));
                        }
                    }
                    Method::Supervised { dicts, .. } => {
                        let from = &pair.clean.assignment[&pair.varied_attribute];
                        let to = &pair.corrupt.assignment[&pair.varied_attribute];
                        for node in &nodes {
                            let dict = dicts
                                .get(node)
                                .ok_or(EvalError::MissingDictionary { node: *node })?;
                            let a_s = source_run.cache().get(node).expect("cached");
                            patches.push((
                                *node,
                                supervised_edit(dict, a_s, &pair.varied_attribute, from, to)?,
                            ));
                        }
                    }
                    Method::Sae { .. } => {
                        let per_node_budgets =
                            distribute_budget(mode, budget, &nodes, &sae_states);
                        for (node, node_budget) in nodes.iter().zip(per_node_budgets) {
                            let state = sae_states.get(node).expect("state built above");
                            let a_s = source_run.cache().get(node).expect("cached");
                            let edited = state.greedy.edited_at_budget(
                                &state.source_features,
                                &state.target_features,
                                a_s,
                                node_budget,
                            );
                            patches.push((*node, edited));
                        }
                    }
                }
                let run = model.run_with_node_patch(&pair.clean.tokens, &patches)?;
                argmax(run.logits().last().expect("nonempty"))
            };
            let success = predicted_edit == predicted_truth;
            outcomes[slot].records.push(EditRecord {
                source_assignment: pair.clean.assignment.clone(),
                target_assignment: pair.corrupt.assignment.clone(),
                template: pair.clean.template.clone(),
                varied_attribute: pair.varied_attribute.clone(),
                predicted_edit,
                predicted_truth,
                success,
            });
        }
    }
    for outcome in &mut outcomes {
        let wins = outcome.records.iter().filter(|r| r.success).count();
        outcome.success_rate = wins as f64 / outcome.records.len() as f64;
    }
    Ok(outcomes)
}

fn project_node(
    sae: &SparseAutoencoder,
    layer: usize,
    run: &crate::model::ForwardRun,
    node: &NodeId,
) -> Result<ProjectionResult, EvalError> {
    let resid_node = NodeId::new(NodeKind::ResidPost { layer }, node.position);
    let x_resid = run
        .cache()
        .get(&resid_node)
        .ok_or(EvalError::Model(ModelError::InvalidNode {
            reason: "residual node missing from cache",
        }))?;
    let h = run
        .cache()
        .get(node)
        .ok_or(EvalError::Model(ModelError::InvalidNode {
            reason: "node missing from cache",
        }))?;
    Ok(project_sublayer(sae, x_resid, h)?)
}

/// Splits a global budget across nodes. Per-node mode hands every node the
/// full budget; shared mode spends rounds on the nodes whose next greedy swap
/// improves its distance most, one round at a time.
fn distribute_budget(
    mode: EditMode,
    budget: usize,
    nodes: &[NodeId],
    states: &BTreeMap<NodeId, SaeEditState>,
) -> Vec<usize> {
    match mode {
        EditMode::PerNode => vec![budget; nodes.len()],
        EditMode::SharedBudget => {
            let mut spent = vec![0usize; nodes.len()];
            for _ in 0..budget {
                let mut best: Option<(usize, f64)> = None;
                for (idx, node) in nodes.iter().enumerate() {
                    let distances = &states[node].greedy.distances;
                    let used = spent[idx];
                    if used + 1 >= distances.len() {
                        continue;
                    }
                    let gain = distances[used] - distances[used + 1];
                    if best.is_none() || gain > best.unwrap().1 {
                        best = Some((idx, gain));
                    }
                }
                match best {
                    Some((idx, gain)) if gain > 0.0 => spent[idx] += 1,
                    _ => break,
                }
            }
            spent
        }
    }
}
