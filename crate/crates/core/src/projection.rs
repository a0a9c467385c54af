//! Sublayer reconstruction from a residual-stream sparse autoencoder.
//!
//! The residual stream at layer l is an exact sum of sublayer outputs, so a
//! feature direction a head writes must be present in the residual encoding.
//! The projection keeps the features active at the residual stream, filters
//! them by alignment with the head output, and fits closed-form coefficients
//! over the selected set. No decoder bias enters the sublayer fit: the bias
//! models the stream's offset, not an individual head's.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::dictionary::{
    reconstruct_unweighted, reconstruct_weighted, DictionaryError, SupervisedFeatureDictionary,
    WeightedMode,
};
use crate::linalg::{solve_least_squares, LinalgError, Matrix, Vector};
use crate::model::{ActivationCache, NodeId, NodeKind};
use crate::sae::SparseAutoencoder;

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectionError {
    DimensionMismatch { expected: usize, got: usize },
    NodeNotCached { node: NodeId },
    SaeLayerBeforeNode { node_layer: usize, sae_layer: usize },
    UnsupportedNode { node: NodeId },
    DictionaryNodeMismatch { expected: NodeId, got: NodeId },
    Dictionary(DictionaryError),
    Linalg(LinalgError),
}

impl fmt::Display for ProjectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionError::DimensionMismatch { expected, got } => {
                write!(f, "input has dim {got}, expected {expected}")
            }
            ProjectionError::NodeNotCached { node } => write!(f, "node {node} not in cache"),
            ProjectionError::SaeLayerBeforeNode { node_layer, sae_layer } => write!(
                f,
                "autoencoder at layer {sae_layer} cannot see a node written at layer {node_layer}"
            ),
            ProjectionError::UnsupportedNode { node } => {
                write!(f, "node {node} is not a sublayer output")
            }
            ProjectionError::DictionaryNodeMismatch { expected, got } => {
                write!(f, "dictionary fitted for {got}, asked to reconstruct {expected}")
            }
            ProjectionError::Dictionary(e) => write!(f, "dictionary error: {e}"),
            ProjectionError::Linalg(e) => write!(f, "linear algebra error: {e}"),
        }
    }
}

impl From<DictionaryError> for ProjectionError {
    fn from(e: DictionaryError) -> Self {
        ProjectionError::Dictionary(e)
    }
}

impl From<LinalgError> for ProjectionError {
    fn from(e: LinalgError) -> Self {
        ProjectionError::Linalg(e)
    }
}

/// How the alignment filter picks the selected feature set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectionThreshold {
    /// Keep features whose alignment is at least the signed mean alignment.
    MeanAlignment,
    /// Keep features whose alignment is at least the given value.
    Fixed(f64),
}

/// Outcome of reconstructing one sublayer activation from residual features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    /// Latents active at the residual stream (codes strictly positive).
    pub active: Vec<usize>,
    /// Alignment `h . f_i` per active latent, same order as `active`.
    pub alignments: Vec<f64>,
    /// Selected latent subset, in `active` order.
    pub selected: Vec<usize>,
    /// Least-squares coefficients, aligned with `selected`.
    pub coefficients: Vec<f64>,
    pub reconstruction: Vector,
    /// No latent fired at the residual stream; the reconstruction is zero.
    pub empty_active_set: bool,
}

impl ProjectionResult {
    /// (feature direction, coefficient) pairs of the selected set; the edit
    /// machinery consumes these.
    pub fn weighted_features(&self, sae: &SparseAutoencoder) -> Vec<(Vector, f64)> {
        self.selected
            .iter()
            .zip(&self.coefficients)
            .map(|(&i, &c)| (sae.feature(i), c))
            .collect()
    }
}

/// Plain residual-stream reconstruction: codes and decoded activation.
pub fn sae_reconstruct_residual(sae: &SparseAutoencoder, x: &Vector) -> (Vector, Vector) {
    let codes = sae.encode(x);
    let recon = sae.decode(&codes);
    (codes, recon)
}

/// Reconstructs a sublayer activation `h` from the features active at the
/// residual stream `x_resid` of the same prompt and position.
pub fn project_sublayer(
    sae: &SparseAutoencoder,
    x_resid: &Vector,
    h: &Vector,
) -> Result<ProjectionResult, ProjectionError> {
    project_sublayer_with_threshold(sae, x_resid, h, SelectionThreshold::MeanAlignment)
}

pub fn project_sublayer_with_threshold(
    sae: &SparseAutoencoder,
    x_resid: &Vector,
    h: &Vector,
    threshold: SelectionThreshold,
) -> Result<ProjectionResult, ProjectionError> {
    let d = sae.input_dim();
    if x_resid.dim() != d {
        return Err(ProjectionError::DimensionMismatch {
            expected: d,
            got: x_resid.dim(),
        });
    }
    if h.dim() != d {
        return Err(ProjectionError::DimensionMismatch {
            expected: d,
            got: h.dim(),
        });
    }
    let codes = sae.encode(x_resid);
    let active: Vec<usize> = codes
        .0
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| (c > 0.0).then_some(i))
        .collect();
    if active.is_empty() {
        return Ok(ProjectionResult {
            active,
            alignments: Vec::new(),
            selected: Vec::new(),
            coefficients: Vec::new(),
            reconstruction: Vector::zeros(d),
            empty_active_set: true,
        });
    }
    let alignments: Vec<f64> = active.iter().map(|&i| h.dot(&sae.feature(i))).collect();
    let cut = match threshold {
        SelectionThreshold::MeanAlignment => {
            alignments.iter().sum::<f64>() / alignments.len() as f64
        }
        SelectionThreshold::Fixed(v) => v,
    };
    let selected: Vec<usize> = active
        .iter()
        .zip(&alignments)
        .filter_map(|(&i, &a)| (a >= cut).then_some(i))
        .collect();
    if selected.is_empty() {
        // Only reachable with a fixed threshold above every alignment.
        return Ok(ProjectionResult {
            active,
            alignments,
            selected,
            coefficients: Vec::new(),
            reconstruction: Vector::zeros(d),
            empty_active_set: false,
        });
    }
    let design = Matrix::from_fn(d, selected.len(), |r, c| sae.feature(selected[c]).0[r]);
    let coefficients = solve_least_squares(&design, h)?;
    let reconstruction = design.matvec(&coefficients);
    Ok(ProjectionResult {
        active,
        alignments,
        selected,
        coefficients: coefficients.0,
        reconstruction,
        empty_active_set: false,
    })
}

/// Which reconstruction backs a cross-section replacement.
#[derive(Clone, Copy)]
pub enum CrossSectionSource<'a> {
    /// Residual-stream autoencoder trained at `layer`.
    Sae {
        sae: &'a SparseAutoencoder,
        layer: usize,
    },
    /// Supervised feature dictionary fitted at this node.
    Dictionary {
        dict: &'a SupervisedFeatureDictionary,
        weighted: bool,
    },
}

/// Reconstructs the activation of a cross-section upstream node from the
/// given source, reading what it needs out of a forward cache.
pub fn reconstruct_cross_section(
    source: CrossSectionSource<'_>,
    cache: &ActivationCache,
    node: &NodeId,
    assignment: &BTreeMap<String, String>,
) -> Result<Vector, ProjectionError> {
    let activation = cache
        .get(node)
        .ok_or(ProjectionError::NodeNotCached { node: *node })?;
    match source {
        CrossSectionSource::Sae { sae, layer } => {
            match node.kind {
                NodeKind::ResidPost { .. } => {
                    // The stream itself: plain encode/decode.
                    Ok(sae_reconstruct_residual(sae, activation).1)
                }
                NodeKind::AttnHeadOut { layer: node_layer, .. }
                | NodeKind::MlpOut { layer: node_layer } => {
                    if layer < node_layer {
                        return Err(ProjectionError::SaeLayerBeforeNode {
                            node_layer,
                            sae_layer: layer,
                        });
                    }
                    let resid_node = NodeId::new(NodeKind::ResidPost { layer }, node.position);
                    let x_resid = cache
                        .get(&resid_node)
                        .ok_or(ProjectionError::NodeNotCached { node: resid_node })?;
                    Ok(project_sublayer(sae, x_resid, activation)?.reconstruction)
                }
                _ => Err(ProjectionError::UnsupportedNode { node: *node }),
            }
        }
        CrossSectionSource::Dictionary { dict, weighted } => {
            if dict.node != *node {
                return Err(ProjectionError::DictionaryNodeMismatch {
                    expected: *node,
                    got: dict.node,
                });
            }
            if weighted {
                Ok(reconstruct_weighted(dict, assignment, activation, WeightedMode::Centered)?.1)
            } else {
                Ok(reconstruct_unweighted(dict, assignment)?)
            }
        }
    }
}

/// Projection diagnostics surfaced in evaluation reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDiagnostics {
    pub selected_count: usize,
    pub active_count: usize,
    pub residual_norm: f64,
    pub empty_active_set: bool,
}

impl ProjectionDiagnostics {
    pub fn of(result: &ProjectionResult, h: &Vector) -> ProjectionDiagnostics {
        ProjectionDiagnostics {
            selected_count: result.selected.len(),
            active_count: result.active.len(),
            residual_norm: h.sub(&result.reconstruction).norm(),
            empty_active_set: result.empty_active_set,
        }
    }
}

pub fn source_label(source: &CrossSectionSource<'_>) -> String {
    match source {
        CrossSectionSource::Sae { layer, .. } => alloc::format!("sae-l{layer}"),
        CrossSectionSource::Dictionary { weighted, .. } => {
            if *weighted {
                String::from("supervised-weighted")
            } else {
                String::from("supervised")
            }
        }
    }
}
