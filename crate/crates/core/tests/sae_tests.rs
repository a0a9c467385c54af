//! SAE training oracles: analytic gradients against finite differences,
//! reconstruction capacity on low-rank data, and the sparsity sweep.

use saeval_core::linalg::{Matrix, Vector};
use saeval_core::rng::{normal_f64, rng_from_seed, uniform_f64};
use saeval_core::sae::{train_sae, SaeTrainParams, SparseAutoencoder};

/// Eq.-style loss evaluated directly: reconstruction error plus L1 penalty.
fn sae_loss(sae: &SparseAutoencoder, x: &Vector, alpha: f64) -> f64 {
    let codes = sae.encode(x);
    let err = sae.decode(&codes).sub(x);
    err.dot(&err) + alpha * codes.0.iter().sum::<f64>()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(61);
    let d = 5;
    let m = 9;
    let alpha = 0.02;
    // A random SAE away from relu kinks with overwhelming probability.
    let sae = SparseAutoencoder {
        w_e: Matrix::from_fn(m, d, |_, _| 0.7 * normal_f64(&mut rng)),
        b_e: Vector::from_fn(m, |_| 0.3 * normal_f64(&mut rng)),
        w_d: Matrix::from_fn(d, m, |_, _| 0.7 * normal_f64(&mut rng)),
        b_d: Vector::from_fn(d, |_| 0.3 * normal_f64(&mut rng)),
    };
    let x = Vector::from_fn(d, |_| normal_f64(&mut rng));

    // Analytic gradients, mirrored from the training rule.
    let pre = sae.w_e.matvec(&x).add(&sae.b_e);
    let codes = Vector(pre.0.iter().map(|&v| v.max(0.0)).collect());
    let recon = sae.decode(&codes);
    let g_recon = recon.sub(&x).scale(2.0);
    let mut g_wd = Matrix::zeros(d, m);
    g_wd.add_outer(1.0, g_recon.as_slice(), codes.as_slice());
    let g_bd = g_recon.clone();
    let mut g_codes = sae.w_d.matvec_transposed(&g_recon);
    for (g, c) in g_codes.0.iter_mut().zip(&codes.0) {
        if *c > 0.0 {
            *g += alpha;
        }
    }
    let g_pre = Vector(
        g_codes
            .0
            .iter()
            .zip(&pre.0)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    );
    let mut g_we = Matrix::zeros(m, d);
    g_we.add_outer(1.0, g_pre.as_slice(), x.as_slice());
    let g_be = g_pre.clone();

    let h = 1e-6;
    let check = |idx: usize, analytic: f64, bump: &dyn Fn(&mut SparseAutoencoder, f64)| {
        let mut plus = sae.clone();
        bump(&mut plus, h);
        let mut minus = sae.clone();
        bump(&mut minus, -h);
        let fd = (sae_loss(&plus, &x, alpha) - sae_loss(&minus, &x, alpha)) / (2.0 * h);
        let denom = analytic.abs().max(1e-6);
        assert!(
            (fd - analytic).abs() / denom < 1e-4,
            "param {idx}: fd {fd} vs analytic {analytic}"
        );
    };
    for i in 0..m {
        for j in 0..d {
            let a = g_we.get(i, j);
            check(i * d + j, a, &|s, eps| {
                let v = s.w_e.get(i, j);
                s.w_e.set(i, j, v + eps);
            });
        }
        check(1000 + i, g_be.0[i], &|s, eps| s.b_e.0[i] += eps);
    }
    for i in 0..d {
        for j in 0..m {
            let a = g_wd.get(i, j);
            check(2000 + i * m + j, a, &|s, eps| {
                let v = s.w_d.get(i, j);
                s.w_d.set(i, j, v + eps);
            });
        }
        check(3000 + i, g_bd.0[i], &|s, eps| s.b_d.0[i] += eps);
    }
}

#[test]
fn alpha_zero_overcapacity_reconstructs_low_rank_data() {
    // Rank-2 data in 6 dims; with no sparsity pressure and plenty of latents
    // the reconstruction error should sink below 1% of data variance.
    let mut rng = rng_from_seed(62);
    let u = Vector::from_fn(6, |_| normal_f64(&mut rng));
    let v = Vector::from_fn(6, |_| normal_f64(&mut rng));
    let rows: Vec<Vector> = (0..512)
        .map(|_| {
            let a = normal_f64(&mut rng).abs();
            let b = normal_f64(&mut rng).abs();
            u.scale(a).add(&v.scale(b))
        })
        .collect();
    let data = Matrix::from_rows(&rows);
    let variance: f64 = {
        let mut mean = Vector::zeros(6);
        for r in &rows {
            mean.axpy(1.0 / rows.len() as f64, r);
        }
        rows.iter().map(|r| {
            let d = r.sub(&mean);
            d.dot(&d)
        }).sum::<f64>() / rows.len() as f64
    };
    let params = SaeTrainParams {
        latent_dim: 24,
        alpha: 0.0,
        epochs: 60,
        batch_size: 32,
        learning_rate: 3e-3,
        ..SaeTrainParams::default()
    };
    let (_, report) = train_sae(&data, &params, &mut rng).unwrap();
    assert!(
        report.final_mse < 0.01 * variance,
        "mse {} vs variance {variance}",
        report.final_mse
    );
}

#[test]
fn stronger_sparsity_penalty_weakly_reduces_l0() {
    let mut rng = rng_from_seed(63);
    // Sparse mixture of a handful of directions.
    let dirs: Vec<Vector> = (0..6)
        .map(|_| {
            let v = Vector::from_fn(8, |_| normal_f64(&mut rng));
            v.scale(1.0 / v.norm())
        })
        .collect();
    let rows: Vec<Vector> = (0..512)
        .map(|_| {
            let mut x = Vector::zeros(8);
            for dir in &dirs {
                if uniform_f64(&mut rng) < 0.3 {
                    x.axpy(normal_f64(&mut rng).abs() + 0.5, dir);
                }
            }
            x
        })
        .collect();
    let data = Matrix::from_rows(&rows);
    let mut l0s = Vec::new();
    for alpha in [0.0, 0.05, 0.5] {
        let params = SaeTrainParams {
            latent_dim: 16,
            alpha,
            epochs: 40,
            batch_size: 32,
            learning_rate: 3e-3,
            ..SaeTrainParams::default()
        };
        let mut rng = rng_from_seed(64);
        let (_, report) = train_sae(&data, &params, &mut rng).unwrap();
        l0s.push(report.mean_l0);
    }
    assert!(
        l0s[2] <= l0s[0] + 1e-9,
        "l0 under strong penalty {l0s:?} must not exceed the unpenalised run"
    );
    assert!(l0s[1] <= l0s[0] + 0.5, "mild penalty should not grow l0: {l0s:?}");
}

#[test]
fn epoch_losses_trend_downward() {
    let mut rng = rng_from_seed(65);
    let rows: Vec<Vector> = (0..256)
        .map(|_| Vector::from_fn(6, |_| normal_f64(&mut rng)))
        .collect();
    let data = Matrix::from_rows(&rows);
    let params = SaeTrainParams {
        latent_dim: 12,
        alpha: 1e-3,
        epochs: 10,
        batch_size: 32,
        learning_rate: 1e-3,
        ..SaeTrainParams::default()
    };
    let (_, report) = train_sae(&data, &params, &mut rng).unwrap();
    let first = report.epoch_losses.first().unwrap();
    let last = report.epoch_losses.last().unwrap();
    assert!(last < first);
    // Epoch averages may wiggle slightly; they must not climb materially.
    for w in report.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "epoch losses {:?}", report.epoch_losses);
    }
}
