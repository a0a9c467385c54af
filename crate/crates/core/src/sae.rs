//! Sparse autoencoder over residual-stream activations.
//!
//! Rectifier encoder, linear decoder, and the usual L2-reconstruction plus
//! L1-sparsity objective. Decoder columns are renormalized to unit norm after
//! every update with the scale folded into the encoder, so feature directions
//! and coefficient magnitudes stay well-defined.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};
use crate::rng::{normal_f64, shuffle, Rng};
use crate::train::AdamState;

#[derive(Clone, Debug)]
pub enum SaeError {
    LatentNotOvercomplete { latent: usize, input: usize },
    EmptyData,
    Diverged { epoch: usize },
    DimensionMismatch { expected: usize, got: usize },
}

impl fmt::Display for SaeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SaeError::LatentNotOvercomplete { latent, input } => write!(
                f,
                "latent dimension {latent} must exceed input dimension {input}"
            ),
            SaeError::EmptyData => write!(f, "no activation rows to train on"),
            SaeError::Diverged { epoch } => write!(f, "loss became non-finite in epoch {epoch}"),
            SaeError::DimensionMismatch { expected, got } => {
                write!(f, "input has dim {got}, expected {expected}")
            }
        }
    }
}

/// Encoder/decoder weights over a `d`-dimensional stream with `m > d`
/// latents.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder {
    /// m x d encoder weights.
    pub w_e: Matrix,
    /// m-dimensional encoder bias.
    pub b_e: Vector,
    /// d x m decoder weights; columns are feature directions.
    pub w_d: Matrix,
    /// d-dimensional decoder bias.
    pub b_d: Vector,
}

impl SparseAutoencoder {
    pub fn input_dim(&self) -> usize {
        self.w_d.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_d.cols()
    }

    /// Rectified codes `relu(W_e x + b_e)`.
    pub fn encode(&self, x: &Vector) -> Vector {
        let mut c = self.w_e.matvec(x);
        for (ci, bi) in c.0.iter_mut().zip(&self.b_e.0) {
            *ci = (*ci + bi).max(0.0);
        }
        c
    }

    /// Reconstruction `W_d c + b_d`.
    pub fn decode(&self, codes: &Vector) -> Vector {
        self.w_d.matvec(codes).add(&self.b_d)
    }

    pub fn feature(&self, index: usize) -> Vector {
        self.w_d.column(index)
    }

    /// Renormalizes decoder columns to unit norm, folding the scale into the
    /// encoder so the autoencoder function is unchanged.
    pub fn normalize_decoder(&mut self) {
        let (d, m) = (self.input_dim(), self.latent_dim());
        for j in 0..m {
            let mut norm_sq = 0.0;
            for i in 0..d {
                let v = self.w_d.get(i, j);
                norm_sq += v * v;
            }
            let norm = libm::sqrt(norm_sq);
            if norm <= 1e-12 {
                continue;
            }
            for i in 0..d {
                let v = self.w_d.get(i, j);
                self.w_d.set(i, j, v / norm);
            }
            for v in self.w_e.row_mut(j) {
                *v *= norm;
            }
            self.b_e.0[j] *= norm;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainParams {
    pub latent_dim: usize,
    /// L1 sparsity coefficient.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for SaeTrainParams {
    fn default() -> Self {
        SaeTrainParams {
            latent_dim: 256,
            alpha: 3e-3,
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of latents that never fire on the training data.
    pub dead_fraction: f64,
    /// Mean number of active latents per example.
    pub mean_l0: f64,
    /// Mean squared reconstruction error on the training data.
    pub final_mse: f64,
}

/// Loss and parameter gradients of one example under the combined objective.
fn accumulate_grads(
    sae: &SparseAutoencoder,
    x: &Vector,
    alpha: f64,
    scale: f64,
    g_we: &mut Matrix,
    g_be: &mut Vector,
    g_wd: &mut Matrix,
    g_bd: &mut Vector,
) -> f64 {
    let pre = sae.w_e.matvec(x).add(&sae.b_e);
    let codes = Vector(pre.0.iter().map(|&v| v.max(0.0)).collect());
    let recon = sae.decode(&codes);
    let err = recon.sub(x);
    let loss = err.dot(&err) + alpha * codes.0.iter().sum::<f64>();

    let g_recon = err.scale(2.0 * scale);
    g_wd.add_outer(1.0, g_recon.as_slice(), codes.as_slice());
    g_bd.axpy(1.0, &g_recon);
    let mut g_codes = sae.w_d.matvec_transposed(&g_recon);
    for (g, c) in g_codes.0.iter_mut().zip(&codes.0) {
        if *c > 0.0 {
            *g += alpha * scale;
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
    g_we.add_outer(1.0, g_pre.as_slice(), x.as_slice());
    g_be.axpy(1.0, &g_pre);
    loss
}

/// Trains a sparse autoencoder on activation rows. Decoder bias starts at the
/// data mean; decoder columns are unit-normalized after each step.
pub fn train_sae(
    data: &Matrix,
    params: &SaeTrainParams,
    rng: &mut Rng,
) -> Result<(SparseAutoencoder, SaeReport), SaeError> {
    let d = data.cols();
    let m = params.latent_dim;
    let n = data.rows();
    if n == 0 {
        return Err(SaeError::EmptyData);
    }
    if m <= d {
        return Err(SaeError::LatentNotOvercomplete {
            latent: m,
            input: d,
        });
    }

    let mut mean = Vector::zeros(d);
    for r in 0..n {
        for (s, v) in mean.0.iter_mut().zip(data.row(r)) {
            *s += v;
        }
    }
    let mean = mean.scale(1.0 / n as f64);

    let mut w_d = Matrix::from_fn(d, m, |_, _| normal_f64(rng));
    for j in 0..m {
        let norm = libm::sqrt((0..d).map(|i| w_d.get(i, j) * w_d.get(i, j)).sum());
        for i in 0..d {
            let v = w_d.get(i, j);
            w_d.set(i, j, v / norm);
        }
    }
    let mut sae = SparseAutoencoder {
        w_e: w_d.transpose(),
        b_e: Vector::zeros(m),
        w_d,
        b_d: mean,
    };

    let mut adam = AdamState::new(&[m * d, m, d * m, d]);
    let mut g_we = Matrix::zeros(m, d);
    let mut g_be = Vector::zeros(m);
    let mut g_wd = Matrix::zeros(d, m);
    let mut g_bd = Vector::zeros(d);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        shuffle(rng, &mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            g_we.data_mut().fill(0.0);
            g_be.0.fill(0.0);
            g_wd.data_mut().fill(0.0);
            g_bd.0.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let x = Vector(data.row(idx).to_vec());
                epoch_loss += accumulate_grads(
                    &sae, &x, params.alpha, scale, &mut g_we, &mut g_be, &mut g_wd, &mut g_bd,
                );
            }
            adam.step(
                &mut [
                    sae.w_e.data_mut(),
                    sae.b_e.0.as_mut_slice(),
                    sae.w_d.data_mut(),
                    sae.b_d.0.as_mut_slice(),
                ],
                &[g_we.data(), g_be.as_slice(), g_wd.data(), g_bd.as_slice()],
                params.learning_rate,
                params.beta1,
                params.beta2,
                params.eps,
            );
            sae.normalize_decoder();
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() {
            return Err(SaeError::Diverged { epoch });
        }
        epoch_losses.push(mean_loss);
    }

    // Post-training diagnostics over the training data.
    let mut fired = vec![false; m];
    let mut l0_total = 0usize;
    let mut mse_total = 0.0;
    for r in 0..n {
        let x = Vector(data.row(r).to_vec());
        let codes = sae.encode(&x);
        for (f, &c) in fired.iter_mut().zip(&codes.0) {
            if c > 0.0 {
                *f = true;
            }
        }
        l0_total += codes.0.iter().filter(|&&c| c > 0.0).count();
        let err = sae.decode(&codes).sub(&x);
        mse_total += err.dot(&err);
    }
    let report = SaeReport {
        epoch_losses,
        dead_fraction: fired.iter().filter(|&&f| !f).count() as f64 / m as f64,
        mean_l0: l0_total as f64 / n as f64,
        final_mse: mse_total / n as f64,
    };
    Ok((sae, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_data_trains_to_zero_loss() {
        let data = Matrix::zeros(64, 4);
        let params = SaeTrainParams {
            latent_dim: 8,
            alpha: 1e-3,
            epochs: 3,
            batch_size: 16,
            ..SaeTrainParams::default()
        };
        let mut rng = rng_from_seed(2);
        let (sae, report) = train_sae(&data, &params, &mut rng).unwrap();
        // Mean initialisation of the decoder bias is already optimal here.
        assert!(report.final_mse < 1e-12);
        assert!(sae.b_d.norm() < 1e-6);
        let codes = sae.encode(&Vector::zeros(4));
        let recon = sae.decode(&codes);
        assert!(recon.norm() < 1e-6);
    }

    #[test]
    fn encoder_output_is_nonnegative_and_decoder_columns_unit() {
        let mut rng = rng_from_seed(3);
        let data = Matrix::from_fn(128, 6, |_, _| normal_f64(&mut rng));
        let params = SaeTrainParams {
            latent_dim: 12,
            alpha: 1e-3,
            epochs: 2,
            batch_size: 16,
            ..SaeTrainParams::default()
        };
        let (sae, _) = train_sae(&data, &params, &mut rng).unwrap();
        for r in 0..data.rows() {
            let codes = sae.encode(&Vector(data.row(r).to_vec()));
            assert!(codes.0.iter().all(|&c| c >= 0.0));
        }
        for j in 0..sae.latent_dim() {
            let norm = sae.feature(j).norm();
            assert!((norm - 1.0).abs() < 1e-6, "column {j} norm {norm}");
        }
    }

    #[test]
    fn latent_must_exceed_input() {
        let data = Matrix::zeros(4, 8);
        let params = SaeTrainParams {
            latent_dim: 8,
            ..SaeTrainParams::default()
        };
        let mut rng = rng_from_seed(4);
        assert!(matches!(
            train_sae(&data, &params, &mut rng),
            Err(SaeError::LatentNotOvercomplete { .. })
        ));
    }
}
