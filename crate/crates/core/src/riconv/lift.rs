//! Single-layer lift (dense, batch-norm, ReLU) evaluated on demand.
//!
//! The lift input is a handful of raw descriptors per neighbor slot, so the
//! batch mean and variance of each lifted channel follow from the mean and
//! covariance of the descriptors. Batch-norm then folds into the dense
//! weights and a slot's lifted row costs `dim` multiply-adds per channel.
//! The pooling loop computes rows as it goes and the lifted `[slots, c]`
//! matrix is never stored. The backward pass only touches pooled winners
//! plus those same moments.

use crate::autodiff::ops::reduce_rows;
use crate::autodiff::{LayerParams, Mode};

#[derive(Debug)]
struct Moments {
    rows: usize,
    /// Column sums of the descriptors.
    sum: Vec<f64>,
    /// `Σ (x - x̄)(x - x̄)ᵀ`, `[dim, dim]`.
    scatter: Vec<f64>,
    /// Biased variance of each pre-normalization channel.
    var: Vec<f64>,
}

#[derive(Debug)]
pub(super) struct FoldedLift {
    dim: usize,
    channels: usize,
    /// Dense weights `[dim, channels]` and biases before normalization.
    weights: Vec<f64>,
    biases: Vec<f64>,
    gamma: Vec<f64>,
    /// Mean and inverse std used for normalization.
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Normalization folded in: `y = relu(x · folded_w + folded_b)`.
    folded_w: Vec<f64>,
    folded_b: Vec<f64>,
    batch: Option<Moments>,
}

impl FoldedLift {
    /// `layer` must have batch-norm and ReLU; `raw` is `[rows, dim]`.
    pub(super) fn new(layer: &LayerParams, raw: &[f64], dim: usize, mode: Mode) -> Self {
        let bn = layer.bn.as_ref().expect("folded lift needs batch-norm");
        let channels = layer.c_out();
        let weights = layer.weights.data().to_vec();
        let biases = layer.biases.data().to_vec();
        let (mean, var, batch) = match mode {
            Mode::Training => {
                let rows = raw.len() / dim;
                let sum = reduce_rows(rows, dim, |s, e, acc| {
                    for x in raw[s * dim..e * dim].chunks_exact(dim) {
                        for (a, v) in acc.iter_mut().zip(x) {
                            *a += v;
                        }
                    }
                });
                let xbar: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
                let scatter = reduce_rows(rows, dim * dim, |s, e, acc| {
                    let mut d = vec![0.0; dim];
                    for x in raw[s * dim..e * dim].chunks_exact(dim) {
                        for ((d, v), m) in d.iter_mut().zip(x).zip(&xbar) {
                            *d = v - m;
                        }
                        for i in 0..dim {
                            for j in 0..dim {
                                acc[i * dim + j] += d[i] * d[j];
                            }
                        }
                    }
                });
                let mut mean = biases.clone();
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    for i in 0..dim {
                        let wi = weights[i * channels + c];
                        mean[c] += xbar[i] * wi;
                        for j in 0..dim {
                            var[c] += wi * scatter[i * dim + j] * weights[j * channels + c];
                        }
                    }
                    var[c] /= rows as f64;
                }
                let moments = Moments {
                    rows,
                    sum,
                    scatter,
                    var: var.clone(),
                };
                (mean, var, Some(moments))
            }
            Mode::Inference => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let gamma = bn.gamma.data().to_vec();
        let scale: Vec<f64> = gamma.iter().zip(&inv_std).map(|(g, s)| g * s).collect();
        let folded_w = weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * scale[i % channels])
            .collect();
        let folded_b = (0..channels)
            .map(|c| bn.beta.data()[c] + scale[c] * (biases[c] - mean[c]))
            .collect();
        Self {
            dim,
            channels,
            weights,
            biases,
            gamma,
            mean,
            inv_std,
            folded_w,
            folded_b,
            batch,
        }
    }

    pub(super) fn channels(&self) -> usize {
        self.channels
    }

    /// Lifted row of one slot's descriptors `x`.
    pub(super) fn row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.folded_b);
        for (j, &xj) in x.iter().enumerate() {
            let w = &self.folded_w[j * self.channels..(j + 1) * self.channels];
            for (o, wc) in out.iter_mut().zip(w) {
                *o += xj * wc;
            }
        }
        for o in out.iter_mut() {
            *o = o.max(0.0);
        }
    }

    /// Same value as `row(x)[c]`, bit for bit.
    fn value(&self, x: &[f64], c: usize) -> f64 {
        let mut v = self.folded_b[c];
        for (j, &xj) in x.iter().enumerate() {
            v += xj * self.folded_w[j * self.channels + c];
        }
        v.max(0.0)
    }

    /// Batch mean and biased variance of the pre-normalization channels.
    pub(super) fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.batch.as_ref().map(|m| (&self.mean[..], &m.var[..]))
    }

    /// Width of the accumulator used by [`FoldedLift::accumulate`].
    pub(super) fn acc_width(&self) -> usize {
        (2 + self.dim) * self.channels
    }

    /// Adds the contribution of gradient `dy` reaching channel `c` of the
    /// slot with descriptors `x`.
    pub(super) fn accumulate(&self, x: &[f64], c: usize, dy: f64, acc: &mut [f64]) {
        if self.value(x, c) <= 0.0 {
            return;
        }
        let cl = self.channels;
        let mut z = self.biases[c];
        for (j, &xj) in x.iter().enumerate() {
            z += xj * self.weights[j * cl + c];
        }
        let xhat = (z - self.mean[c]) * self.inv_std[c];
        acc[c] += dy;
        acc[cl + c] += dy * xhat;
        for (j, &xj) in x.iter().enumerate() {
            acc[2 * cl + j * cl + c] += xj * dy;
        }
    }

    /// Turns the summed accumulator into parameter gradients of `layer`.
    pub(super) fn apply_grads(&self, layer: &mut LayerParams, acc: &[f64]) {
        let (cl, dim) = (self.channels, self.dim);
        let (dbeta, rest) = acc.split_at(cl);
        let (dgamma, p) = rest.split_at(cl);
        let a: Vec<f64> = self.gamma.iter().zip(&self.inv_std).map(|(g, s)| g * s).collect();
        let mut dw: Vec<f64> = p.iter().enumerate().map(|(i, v)| a[i % cl] * v).collect();
        let db = match &self.batch {
            Some(m) => {
                // dz_i = a (dy_i - mean(dy) - xhat_i mean(dy xhat)), with the
                // sums over every slot rewritten through the moments
                let n = m.rows as f64;
                for j in 0..dim {
                    for c in 0..cl {
                        let mut sx = 0.0;
                        for l in 0..dim {
                            sx += m.scatter[j * dim + l] * self.weights[l * cl + c];
                        }
                        dw[j * cl + c] -=
                            a[c] * (dbeta[c] * m.sum[j] + dgamma[c] * self.inv_std[c] * sx) / n;
                    }
                }
                // Σ_i xhat_i = 0, so the bias gradient cancels exactly
                vec![0.0; cl]
            }
            None => a.iter().zip(dbeta).map(|(a, s)| a * s).collect(),
        };
        layer.weights.accumulate_grad(&dw);
        layer.biases.accumulate_grad(&db);
        let bn = layer.bn.as_mut().expect("folded lift needs batch-norm");
        bn.gamma.accumulate_grad(dgamma);
        bn.beta.accumulate_grad(dbeta);
    }
}
