//! Alignment filtering and closed-form sublayer reconstruction.

use saeval_core::linalg::{Matrix, Vector};
use saeval_core::projection::{
    project_sublayer, project_sublayer_with_threshold, sae_reconstruct_residual,
    SelectionThreshold,
};
use saeval_core::rng::{normal_f64, rng_from_seed};
use saeval_core::sae::SparseAutoencoder;

/// SAE with orthonormal basis-vector features and a pass-through encoder:
/// codes equal the (rectified) coordinates of the input. Latents beyond `d`
/// carry negated duplicates, so they stay silent on positive coordinates.
fn basis_sae(d: usize, m: usize) -> SparseAutoencoder {
    let w_d = Matrix::from_fn(d, m, |r, c| {
        if r == c % d {
            if c < d {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    });
    SparseAutoencoder {
        w_e: w_d.transpose(),
        b_e: Vector::zeros(m),
        w_d,
        b_d: Vector::zeros(d),
    }
}

fn unit(d: usize, i: usize) -> Vector {
    Vector::from_fn(d, |j| if j == i { 1.0 } else { 0.0 })
}

#[test]
fn residual_reconstruction_matches_hand_arithmetic() {
    // 3-dim toy: one active feature, explicit matrices.
    let sae = SparseAutoencoder {
        w_e: Matrix::from_fn(2, 3, |r, c| ((r + 1) * (c + 1)) as f64 * 0.1),
        b_e: Vector(vec![-0.1, 0.2]),
        w_d: Matrix::from_fn(3, 2, |r, c| if c == 0 { 0.5 + r as f64 } else { 1.0 }),
        b_d: Vector(vec![0.05, -0.05, 0.0]),
    };
    let x = Vector(vec![1.0, -1.0, 0.5]);
    let (codes, recon) = sae_reconstruct_residual(&sae, &x);
    // pre_0 = 0.1*1 - 0.2*1 + 0.3*0.5 - 0.1 = -0.05 -> rectified to 0
    // pre_1 = 0.2*1 - 0.4*1 + 0.6*0.5 + 0.2 = 0.3
    assert!((codes.0[0] - 0.0).abs() < 1e-12);
    assert!((codes.0[1] - 0.3).abs() < 1e-12);
    let expect = vec![0.3 + 0.05, 0.3 - 0.05, 0.3];
    for (a, b) in recon.0.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(codes.0.iter().all(|&c| c >= 0.0));
}

#[test]
fn bias_is_fixed_point_of_zero_codes() {
    let mut sae = basis_sae(4, 6);
    sae.b_e = Vector(vec![-10.0; 6]);
    sae.b_d = Vector(vec![0.3, -0.2, 0.1, 0.9]);
    let (codes, recon) = sae_reconstruct_residual(&sae, &Vector::zeros(4));
    assert!(codes.0.iter().all(|&c| c == 0.0));
    assert_eq!(recon.0, sae.b_d.0);
}

#[test]
fn aligned_single_feature_is_recovered_exactly() {
    let d = 6;
    let sae = basis_sae(d, 8);
    // Activate features 0, 1, 2 at the residual stream.
    let x_resid = unit(d, 0).add(&unit(d, 1)).add(&unit(d, 2));
    let h = unit(d, 0);
    let result = project_sublayer(&sae, &x_resid, &h).unwrap();
    assert_eq!(result.active, vec![0, 1, 2]);
    // Alignments (1, 0, 0); mean 1/3; only feature 0 selected.
    assert_eq!(result.selected, vec![0]);
    assert!((result.coefficients[0] - 1.0).abs() < 1e-10);
    assert!(result.reconstruction.sub(&h).norm() < 1e-8);
}

#[test]
fn orthogonal_head_output_reconstructs_to_zero() {
    let d = 6;
    let sae = basis_sae(d, 8);
    let x_resid = unit(d, 0).add(&unit(d, 1)).add(&unit(d, 2));
    let h = unit(d, 4);
    let result = project_sublayer(&sae, &x_resid, &h).unwrap();
    // All alignments zero: the mean is zero and every active feature
    // qualifies, but the fit has nothing to explain.
    assert_eq!(result.selected, result.active);
    assert!(result.reconstruction.norm() <= 1e-8);
    assert!(!result.empty_active_set);
}

#[test]
fn two_aligned_features_reconstruct_their_combination() {
    let d = 6;
    let sae = basis_sae(d, 8);
    let x_resid = unit(d, 0)
        .add(&unit(d, 1))
        .add(&unit(d, 2))
        .add(&unit(d, 3));
    let h = unit(d, 0).scale(2.0).add(&unit(d, 1).scale(3.0));
    let result = project_sublayer(&sae, &x_resid, &h).unwrap();
    // Alignments (2, 3, 0, 0), mean 1.25: features 0 and 1 selected.
    assert_eq!(result.selected, vec![0, 1]);
    assert!(result.reconstruction.sub(&h).norm() < 1e-8);
}

#[test]
fn empty_active_set_is_flagged_with_zero_reconstruction() {
    let d = 4;
    let mut sae = basis_sae(d, 6);
    // Encoder bias pushed below any attainable pre-activation.
    sae.b_e = Vector(vec![-100.0; 6]);
    let x_resid = Vector(vec![-1.0, -2.0, -0.5, -3.0]);
    let h = unit(d, 1);
    let result = project_sublayer(&sae, &x_resid, &h).unwrap();
    assert!(result.empty_active_set);
    assert!(result.selected.is_empty());
    assert_eq!(result.reconstruction.0, vec![0.0; d]);
}

#[test]
fn selected_is_subset_of_active_and_dominates_best_single_feature() {
    let mut rng = rng_from_seed(55);
    for trial in 0..50 {
        let d = 8;
        let m = 16;
        let mut w_d = Matrix::from_fn(d, m, |_, _| normal_f64(&mut rng));
        for j in 0..m {
            let norm = (0..d).map(|i| w_d.get(i, j) * w_d.get(i, j)).sum::<f64>().sqrt();
            for i in 0..d {
                let v = w_d.get(i, j);
                w_d.set(i, j, v / norm);
            }
        }
        let sae = SparseAutoencoder {
            w_e: w_d.transpose(),
            b_e: Vector::zeros(m),
            w_d,
            b_d: Vector::zeros(d),
        };
        let x_resid = Vector::from_fn(d, |_| normal_f64(&mut rng));
        let h = Vector::from_fn(d, |_| normal_f64(&mut rng));
        let result = project_sublayer(&sae, &x_resid, &h).unwrap();
        for s in &result.selected {
            assert!(result.active.contains(s), "trial {trial}: T not within actives");
        }
        if result.active.is_empty() {
            continue;
        }
        // Residual over the selected set never exceeds the best single
        // aligned feature's residual.
        let best = result
            .active
            .iter()
            .zip(&result.alignments)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(&i, _)| i)
            .unwrap();
        let f = sae.feature(best);
        let coef = h.dot(&f) / f.dot(&f);
        let single_residual = h.sub(&f.scale(coef)).norm();
        let selected_residual = h.sub(&result.reconstruction).norm();
        assert!(
            selected_residual <= single_residual + 1e-9,
            "trial {trial}: {selected_residual} > {single_residual}"
        );
        // Determinism of the threshold under identical inputs.
        let again = project_sublayer(&sae, &x_resid, &h).unwrap();
        assert_eq!(again.selected, result.selected);
    }
}

#[test]
fn fixed_threshold_variant_narrows_selection() {
    let d = 6;
    let sae = basis_sae(d, 8);
    let x_resid = unit(d, 0).add(&unit(d, 1)).add(&unit(d, 2));
    let h = unit(d, 0).scale(2.0).add(&unit(d, 1).scale(0.5));
    let mean_based = project_sublayer(&sae, &x_resid, &h).unwrap();
    let strict = project_sublayer_with_threshold(&sae, &x_resid, &h, SelectionThreshold::Fixed(1.0))
        .unwrap();
    assert!(strict.selected.len() <= mean_based.selected.len());
    assert_eq!(strict.selected, vec![0]);
    // A threshold above every alignment empties the selection but is not an
    // empty-active-set condition.
    let none = project_sublayer_with_threshold(&sae, &x_resid, &h, SelectionThreshold::Fixed(99.0))
        .unwrap();
    assert!(none.selected.is_empty());
    assert!(!none.empty_active_set);
    assert_eq!(none.reconstruction.0, vec![0.0; d]);
}
