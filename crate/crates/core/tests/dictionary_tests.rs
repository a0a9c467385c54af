//! Supervised dictionary fitting against synthetic generators with known
//! ground truth.

use std::collections::BTreeMap;

use saeval_core::dictionary::{
    fit_supervised, reconstruct_unweighted, reconstruct_weighted, DictionaryError, WeightedMode,
};
use saeval_core::linalg::{Matrix, Vector};
use saeval_core::model::{NodeId, NodeKind};
use saeval_core::rng::{normal_f64, rng_from_seed, uniform_usize, Rng};
use saeval_core::task::{Attribute, AttributeSchema};

fn node() -> NodeId {
    NodeId::new(NodeKind::AttnHeadOut { layer: 0, head: 0 }, 3)
}

struct Synthetic {
    schema: AttributeSchema,
    mean: Vector,
    features: BTreeMap<(String, String), Vector>,
}

impl Synthetic {
    fn new(d: usize, attr_values: &[(&str, usize)], rng: &mut Rng) -> Synthetic {
        let schema = AttributeSchema {
            attributes: attr_values
                .iter()
                .map(|(name, k)| Attribute {
                    name: name.to_string(),
                    values: (0..*k).map(|i| format!("{name}{i}")).collect(),
                })
                .collect(),
        };
        let mean = Vector::from_fn(d, |_| normal_f64(rng));
        let mut features = BTreeMap::new();
        for attr in &schema.attributes {
            // Zero-sum features per attribute keep the generator identifiable
            // up to the same shifts the indicator matrix allows.
            let mut raw: Vec<Vector> = attr
                .values
                .iter()
                .map(|_| Vector::from_fn(d, |_| normal_f64(rng)))
                .collect();
            let mut avg = Vector::zeros(d);
            for v in &raw {
                avg.axpy(1.0 / raw.len() as f64, v);
            }
            for v in &mut raw {
                *v = v.sub(&avg);
            }
            for (value, vec) in attr.values.iter().zip(raw) {
                features.insert((attr.name.clone(), value.clone()), vec);
            }
        }
        Synthetic {
            schema,
            mean,
            features,
        }
    }

    fn sample_assignment(&self, rng: &mut Rng) -> BTreeMap<String, String> {
        self.schema
            .attributes
            .iter()
            .map(|a| {
                let v = a.values[uniform_usize(rng, a.values.len())].clone();
                (a.name.clone(), v)
            })
            .collect()
    }

    fn activation(&self, assignment: &BTreeMap<String, String>) -> Vector {
        let mut out = self.mean.clone();
        for (attr, value) in assignment {
            out.axpy(1.0, &self.features[&(attr.clone(), value.clone())]);
        }
        out
    }

    fn dataset(&self, n: usize, noise: f64, rng: &mut Rng) -> (Matrix, Vec<BTreeMap<String, String>>) {
        let mut rows = Vec::with_capacity(n);
        let mut assignments = Vec::with_capacity(n);
        for _ in 0..n {
            let a = self.sample_assignment(rng);
            let mut x = self.activation(&a);
            if noise > 0.0 {
                for v in &mut x.0 {
                    *v += noise * normal_f64(rng);
                }
            }
            rows.push(x);
            assignments.push(a);
        }
        (Matrix::from_rows(&rows), assignments)
    }
}

#[test]
fn exact_synthetic_data_is_recovered_to_machine_precision() {
    let mut rng = rng_from_seed(100);
    let synth = Synthetic::new(12, &[("io", 4), ("subject", 4), ("order", 2)], &mut rng);
    let (acts, assignments) = synth.dataset(400, 0.0, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();
    assert!(dict.residual_mse < 1e-16, "residual {}", dict.residual_mse);
    for (i, assignment) in assignments.iter().take(50).enumerate() {
        let recon = reconstruct_unweighted(&dict, assignment).unwrap();
        let truth = Vector(acts.row(i).to_vec());
        assert!(recon.sub(&truth).norm() < 1e-8);
    }
}

#[test]
fn single_attribute_single_value_feature_vanishes() {
    let schema = AttributeSchema {
        attributes: vec![Attribute {
            name: "only".to_string(),
            values: vec!["v".to_string()],
        }],
    };
    let mut rng = rng_from_seed(101);
    let rows: Vec<Vector> = (0..8).map(|_| Vector::from_fn(5, |_| normal_f64(&mut rng))).collect();
    let acts = Matrix::from_rows(&rows);
    let assignments: Vec<_> = (0..8)
        .map(|_| {
            let mut m = BTreeMap::new();
            m.insert("only".to_string(), "v".to_string());
            m
        })
        .collect();
    let dict = fit_supervised(&acts, &assignments, &schema, node()).unwrap();
    // Centering absorbs a constant attribute entirely.
    assert!(dict.feature("only", "v").unwrap().norm() < 1e-10);
}

#[test]
fn noise_floor_matches_sigma_squared_times_dim() {
    let mut rng = rng_from_seed(102);
    let d = 8;
    let sigma = 0.3;
    let synth = Synthetic::new(d, &[("a", 3), ("b", 4)], &mut rng);
    let (acts, assignments) = synth.dataset(10_000, sigma, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();
    let expected = sigma * sigma * d as f64;
    assert!(
        (dict.residual_mse - expected).abs() < 0.1 * expected,
        "residual {} vs sigma^2 d = {expected}",
        dict.residual_mse
    );
}

#[test]
fn unobserved_value_is_rejected_by_name() {
    let mut rng = rng_from_seed(103);
    let synth = Synthetic::new(6, &[("a", 3)], &mut rng);
    // Only ever assign a0, leaving a1/a2 unobserved.
    let assignments: Vec<_> = (0..10)
        .map(|_| {
            let mut m = BTreeMap::new();
            m.insert("a".to_string(), "a0".to_string());
            m
        })
        .collect();
    let rows: Vec<Vector> = (0..10).map(|_| Vector::zeros(6)).collect();
    let acts = Matrix::from_rows(&rows);
    match fit_supervised(&acts, &assignments, &synth.schema, node()) {
        Err(DictionaryError::UnobservedValue { attribute, value }) => {
            assert_eq!(attribute, "a");
            assert_eq!(value, "a1");
        }
        other => panic!("expected UnobservedValue, got {other:?}"),
    }
}

#[test]
fn unweighted_reconstruction_is_additive_in_single_attribute_changes() {
    let mut rng = rng_from_seed(104);
    let synth = Synthetic::new(10, &[("a", 4), ("b", 3)], &mut rng);
    let (acts, assignments) = synth.dataset(600, 0.0, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();
    let mut assignment = assignments[0].clone();
    let base = reconstruct_unweighted(&dict, &assignment).unwrap();
    let old = assignment.insert("a".to_string(), "a2".to_string()).unwrap();
    let changed = reconstruct_unweighted(&dict, &assignment).unwrap();
    let expected_delta = dict
        .feature("a", "a2")
        .unwrap()
        .sub(dict.feature("a", &old).unwrap());
    assert!(changed.sub(&base).sub(&expected_delta).norm() < 1e-10);
}

#[test]
fn weighted_reconstruction_recovers_scaling_and_dominates_unweighted() {
    let mut rng = rng_from_seed(105);
    let synth = Synthetic::new(9, &[("a", 3), ("b", 3)], &mut rng);
    let (acts, assignments) = synth.dataset(500, 0.0, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();

    // An activation built from doubled features yields lambda near (2, 2).
    let assignment = assignments[0].clone();
    let unweighted = reconstruct_unweighted(&dict, &assignment).unwrap();
    let doubled = dict
        .mean
        .add(&unweighted.sub(&dict.mean).scale(2.0));
    let (lambda, recon) = reconstruct_weighted(&dict, &assignment, &doubled, WeightedMode::Centered).unwrap();
    for &l in &lambda.0 {
        assert!((l - 2.0).abs() < 1e-6, "lambda {l}");
    }
    assert!(recon.sub(&doubled).norm() < 1e-6);

    // Feeding the unweighted reconstruction back gives all-ones weights.
    let (lambda, _) =
        reconstruct_weighted(&dict, &assignment, &unweighted, WeightedMode::Centered).unwrap();
    for &l in &lambda.0 {
        assert!((l - 1.0).abs() < 1e-6);
    }

    // Weighted dominance on noisy inputs.
    for i in 0..40 {
        let mut noisy = Vector(acts.row(i).to_vec());
        for v in &mut noisy.0 {
            *v += 0.2 * normal_f64(&mut rng);
        }
        let (_, weighted) =
            reconstruct_weighted(&dict, &assignments[i], &noisy, WeightedMode::Centered).unwrap();
        let unweighted = reconstruct_unweighted(&dict, &assignments[i]).unwrap();
        assert!(
            noisy.sub(&weighted).norm() <= noisy.sub(&unweighted).norm() + 1e-10,
            "weighted residual must not exceed unweighted"
        );
    }
}

#[test]
fn fitted_features_are_a_least_squares_optimum() {
    let mut rng = rng_from_seed(106);
    let synth = Synthetic::new(7, &[("a", 3), ("b", 2)], &mut rng);
    let (acts, assignments) = synth.dataset(300, 0.15, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();

    let objective = |features: &BTreeMap<(String, String), Vector>| -> f64 {
        let mut total = 0.0;
        for (i, assignment) in assignments.iter().enumerate() {
            let mut recon = dict.mean.clone();
            for (attr, value) in assignment {
                recon.axpy(1.0, &features[&(attr.clone(), value.clone())]);
            }
            let truth = Vector(acts.row(i).to_vec());
            let err = truth.sub(&recon);
            total += err.dot(&err);
        }
        total / assignments.len() as f64
    };
    let base = objective(&dict.features);
    assert!((base - dict.residual_mse).abs() < 1e-9);
    for trial in 0..30 {
        let mut perturbed = dict.features.clone();
        let keys: Vec<_> = perturbed.keys().cloned().collect();
        let key = keys[trial % keys.len()].clone();
        let dim = dict.mean.dim();
        let mut delta = Vector::from_fn(dim, |_| normal_f64(&mut rng));
        delta = delta.scale(1e-3 / delta.norm());
        perturbed.get_mut(&key).unwrap().axpy(1.0, &delta);
        assert!(
            objective(&perturbed) >= base - 1e-12,
            "perturbing {key:?} decreased the objective"
        );
    }
}

#[test]
fn centering_is_exact() {
    let mut rng = rng_from_seed(107);
    let synth = Synthetic::new(6, &[("a", 2)], &mut rng);
    let (acts, assignments) = synth.dataset(64, 0.5, &mut rng);
    let dict = fit_supervised(&acts, &assignments, &synth.schema, node()).unwrap();
    for c in 0..acts.cols() {
        let mut col_mean = 0.0;
        for r in 0..acts.rows() {
            col_mean += acts.get(r, c) - dict.mean.0[c];
        }
        col_mean /= acts.rows() as f64;
        assert!(col_mean.abs() < 1e-10);
    }
}
