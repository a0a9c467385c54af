//! Supervised MSE feature dictionaries at cross-section upstream nodes.
//!
//! A dictionary holds one mean activation plus one feature vector per
//! (attribute, value) pair, fitted by least squares against an indicator
//! design matrix over centered activations. The indicator matrix is rank
//! deficient by construction (per-attribute columns sum to the all-ones
//! vector), so the fit goes through the pseudoinverse of its Gram matrix and
//! individual feature vectors are only identified up to per-attribute shifts;
//! reconstructions are the well-defined object.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{pseudo_inverse, solve_least_squares, LinalgError, Matrix, Vector};
use crate::model::NodeId;
use crate::task::AttributeSchema;

#[derive(Clone, Debug, PartialEq)]
pub enum DictionaryError {
    AssignmentCountMismatch { rows: usize, assignments: usize },
    TooFewSamples { needed: usize, got: usize },
    UnobservedValue { attribute: String, value: String },
    MissingAttribute { attribute: String },
    UnknownValue { attribute: String, value: String },
    NonFiniteActivations,
    Linalg(LinalgError),
}

impl fmt::Display for DictionaryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DictionaryError::AssignmentCountMismatch { rows, assignments } => {
                write!(f, "{rows} activation rows but {assignments} assignments")
            }
            DictionaryError::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            DictionaryError::UnobservedValue { attribute, value } => {
                write!(f, "value {value:?} of attribute {attribute:?} never observed")
            }
            DictionaryError::MissingAttribute { attribute } => {
                write!(f, "assignment missing attribute {attribute:?}")
            }
            DictionaryError::UnknownValue { attribute, value } => {
                write!(f, "attribute {attribute:?} has no value {value:?}")
            }
            DictionaryError::NonFiniteActivations => write!(f, "activations contain non-finite values"),
            DictionaryError::Linalg(e) => write!(f, "linear algebra error: {e}"),
        }
    }
}

impl From<LinalgError> for DictionaryError {
    fn from(e: LinalgError) -> Self {
        DictionaryError::Linalg(e)
    }
}

/// Per-node mean activation plus one feature vector per attribute-value pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedFeatureDictionary {
    pub node: NodeId,
    pub mean: Vector,
    /// Attribute names in schema order; fixes the column order of weighted
    /// reconstruction.
    pub attribute_order: Vec<String>,
    pub features: BTreeMap<(String, String), Vector>,
    /// Mean squared residual of the fit over the training activations.
    pub residual_mse: f64,
}

impl SupervisedFeatureDictionary {
    pub fn feature(&self, attribute: &str, value: &str) -> Result<&Vector, DictionaryError> {
        self.features
            .get(&(String::from(attribute), String::from(value)))
            .ok_or_else(|| DictionaryError::UnknownValue {
                attribute: String::from(attribute),
                value: String::from(value),
            })
    }

    fn assignment_features<'a>(
        &'a self,
        assignment: &BTreeMap<String, String>,
    ) -> Result<Vec<&'a Vector>, DictionaryError> {
        self.attribute_order
            .iter()
            .map(|attr| {
                let value = assignment
                    .get(attr)
                    .ok_or_else(|| DictionaryError::MissingAttribute {
                        attribute: attr.clone(),
                    })?;
                self.feature(attr, value)
            })
            .collect()
    }
}

/// Fits the dictionary: center activations, build the indicator matrix, and
/// solve the least-squares problem through the Gram pseudoinverse.
pub fn fit_supervised(
    activations: &Matrix,
    assignments: &[BTreeMap<String, String>],
    schema: &AttributeSchema,
    node: NodeId,
) -> Result<SupervisedFeatureDictionary, DictionaryError> {
    let n = activations.rows();
    let d = activations.cols();
    if assignments.len() != n {
        return Err(DictionaryError::AssignmentCountMismatch {
            rows: n,
            assignments: assignments.len(),
        });
    }
    let total_values = schema.total_values();
    if n < total_values {
        return Err(DictionaryError::TooFewSamples {
            needed: total_values,
            got: n,
        });
    }
    if !activations.is_finite() {
        return Err(DictionaryError::NonFiniteActivations);
    }

    // Column layout: attributes in schema order, values in declared order.
    let mut column_of: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut keys: Vec<(String, String)> = Vec::with_capacity(total_values);
    for attr in &schema.attributes {
        for value in &attr.values {
            column_of.insert((attr.name.clone(), value.clone()), keys.len());
            keys.push((attr.name.clone(), value.clone()));
        }
    }

    let mut indicator = Matrix::zeros(n, total_values);
    let mut observed = alloc::vec![false; total_values];
    for (row, assignment) in assignments.iter().enumerate() {
        for attr in &schema.attributes {
            let value =
                assignment
                    .get(&attr.name)
                    .ok_or_else(|| DictionaryError::MissingAttribute {
                        attribute: attr.name.clone(),
                    })?;
            let col = *column_of
                .get(&(attr.name.clone(), value.clone()))
                .ok_or_else(|| DictionaryError::UnknownValue {
                    attribute: attr.name.clone(),
                    value: value.clone(),
                })?;
            indicator.set(row, col, 1.0);
            observed[col] = true;
        }
    }
    if let Some(missing) = observed.iter().position(|&o| !o) {
        let (attribute, value) = keys[missing].clone();
        return Err(DictionaryError::UnobservedValue { attribute, value });
    }

    let mut mean = Vector::zeros(d);
    for r in 0..n {
        for (m, v) in mean.0.iter_mut().zip(activations.row(r)) {
            *m += v;
        }
    }
    let mean = mean.scale(1.0 / n as f64);
    let centered = Matrix::from_fn(n, d, |r, c| activations.get(r, c) - mean.0[c]);

    // U* = (C^T C)^+ C^T A~, row u_{a=v} per indicator column.
    let gram = indicator.gram();
    let gram_pinv = pseudo_inverse(&gram);
    let cta = indicator.transpose().matmul(&centered);
    let features_matrix = gram_pinv.matmul(&cta);

    let fitted = indicator.matmul(&features_matrix);
    let mut residual = 0.0;
    for r in 0..n {
        for c in 0..d {
            let e = centered.get(r, c) - fitted.get(r, c);
            residual += e * e;
        }
    }
    let residual_mse = residual / n as f64;

    let features = keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| (key, Vector(features_matrix.row(i).to_vec())))
        .collect();
    Ok(SupervisedFeatureDictionary {
        node,
        mean,
        attribute_order: schema.attributes.iter().map(|a| a.name.clone()).collect(),
        features,
        residual_mse,
    })
}

/// `mean + sum_i u_{a_i = v_i}` for the given assignment.
pub fn reconstruct_unweighted(
    dict: &SupervisedFeatureDictionary,
    assignment: &BTreeMap<String, String>,
) -> Result<Vector, DictionaryError> {
    let mut out = dict.mean.clone();
    for feature in dict.assignment_features(assignment)? {
        out.axpy(1.0, feature);
    }
    Ok(out)
}

/// Whether the weighted fit solves against the centered activation (the form
/// that actually minimises the weighted objective) or the raw activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightedMode {
    Centered,
    Raw,
}

/// Least-squares coefficients over the assignment's feature vectors plus the
/// resulting reconstruction `mean + V lambda`.
pub fn reconstruct_weighted(
    dict: &SupervisedFeatureDictionary,
    assignment: &BTreeMap<String, String>,
    activation: &Vector,
    mode: WeightedMode,
) -> Result<(Vector, Vector), DictionaryError> {
    let features = dict.assignment_features(assignment)?;
    let d = dict.mean.dim();
    let design = Matrix::from_fn(d, features.len(), |r, c| features[c].0[r]);
    let target = match mode {
        WeightedMode::Centered => activation.sub(&dict.mean),
        WeightedMode::Raw => activation.clone(),
    };
    let lambda = solve_least_squares(&design, &target)?;
    let mut recon = dict.mean.clone();
    for (feature, &weight) in features.iter().zip(&lambda.0) {
        recon.axpy(weight, feature);
    }
    Ok((lambda, recon))
}
