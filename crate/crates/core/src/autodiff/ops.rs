//! Forward and backward kernels. Matrices are row-major; every reduction over
//! rows is split into fixed chunks whose partial results are combined in
//! chunk order, which keeps results identical with and without threads.

use crate::error::{Error, Result};
use crate::par;
use crate::rif::BinAssignment;

use super::Tensor;

/// Rows per partial sum in weight-gradient and statistics reductions.
const REDUCE_CHUNK: usize = 1024;

/// `c = a · b (+ c when accumulate)`, with `a` given by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds cover every element addressed through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sums per-chunk partial vectors of length `width` computed by `f(start, end, acc)`
/// over row ranges, in chunk order.
pub(crate) fn reduce_rows<F>(rows: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize, &mut [f64]) + Sync + Send,
{
    let n_chunks = rows.div_ceil(REDUCE_CHUNK);
    let partials = par::map_range(n_chunks, |c| {
        let mut acc = vec![0.0; width];
        let start = c * REDUCE_CHUNK;
        f(start, (start + REDUCE_CHUNK).min(rows), &mut acc);
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `y = x · w + b` over row-major `x` of shape `rows x c_in`.
pub(crate) fn affine(x: &[f64], rows: usize, c_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let c_out = b.len();
    let mut y = vec![0.0; rows * c_out];
    par::for_each_chunk_mut(&mut y, par::ROW_CHUNK * c_out.max(1), |ci, out| {
        let r0 = ci * par::ROW_CHUNK;
        let m = out.len() / c_out.max(1);
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(b);
        }
        gemm(m, c_in, c_out, &x[r0 * c_in..], c_in, 1, w, c_out, 1, out, true);
    });
    y
}

/// `dx = dy · wᵀ`.
pub(crate) fn affine_backward_input(dy: &[f64], rows: usize, c_out: usize, w: &[f64], c_in: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * c_in];
    par::for_each_chunk_mut(&mut dx, par::ROW_CHUNK * c_in.max(1), |ci, out| {
        let r0 = ci * par::ROW_CHUNK;
        let m = out.len() / c_in.max(1);
        gemm(m, c_out, c_in, &dy[r0 * c_out..], c_out, 1, w, 1, c_out, out, false);
    });
    dx
}

/// `(dw, db) = (xᵀ · dy, Σ_rows dy)`.
pub(crate) fn affine_backward_params(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    c_in: usize,
    c_out: usize,
) -> (Vec<f64>, Vec<f64>) {
    let width = c_in * c_out + c_out;
    let mut both = reduce_rows(rows, width, |s, e, acc| {
        let (dw, db) = acc.split_at_mut(c_in * c_out);
        gemm(c_in, e - s, c_out, &x[s * c_in..], 1, c_in, &dy[s * c_out..], c_out, 1, dw, true);
        for r in s..e {
            for (a, v) in db.iter_mut().zip(&dy[r * c_out..(r + 1) * c_out]) {
                *a += v;
            }
        }
    });
    let db = both.split_off(c_in * c_out);
    (both, db)
}

fn check_dense(x: &Tensor, w: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
        return Err(Error::shape(
            op,
            format!("weights {:?} / biases {:?}", w.shape(), b.shape()),
        ));
    }
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    if x.shape().is_empty() || x.cols() != c_in {
        return Err(Error::shape(
            op,
            format!("input {:?} against {c_in} input channels", x.shape()),
        ));
    }
    Ok((c_in, c_out))
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-scalar") = last;
    s
}

/// Affine map along the last axis, shared over all leading axes.
/// `weights` is `[c_in, c_out]`, `biases` is `[c_out]`.
pub fn dense(x: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor> {
    let (c_in, c_out) = check_dense(x, weights, biases, "dense")?;
    let y = affine(x.data(), x.rows(), c_in, weights.data(), biases.data());
    Tensor::from_vec(&with_last(x.shape(), c_out), y)
}

pub struct DenseGrads {
    pub input: Option<Tensor>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub fn dense_backward(x: &Tensor, weights: &Tensor, dy: &Tensor, need_input: bool) -> Result<DenseGrads> {
    let (c_in, c_out) = (weights.shape()[0], weights.shape()[1]);
    if dy.rows() != x.rows() || dy.cols() != c_out || x.cols() != c_in {
        return Err(Error::shape(
            "dense_backward",
            format!("x {:?}, dy {:?}, w {:?}", x.shape(), dy.shape(), weights.shape()),
        ));
    }
    let rows = x.rows();
    let (dw, db) = affine_backward_params(x.data(), dy.data(), rows, c_in, c_out);
    let input = if need_input {
        let dx = affine_backward_input(dy.data(), rows, c_out, weights.data(), c_in);
        Some(Tensor::from_vec(x.shape(), dx)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input,
        weights: dw,
        biases: db,
    })
}

/// 1D convolution whose kernel spans every bin (no padding, one output
/// position). `x` is `[..., n_bins, c_in]`, `weights` is `[n_bins * c_in, c_out]`.
pub fn conv1d(x: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("conv1d", format!("input {s:?} lacks a bin axis")));
    }
    let lead = &s[..s.len() - 2];
    let flat = s[s.len() - 2] * s[s.len() - 1];
    let mut flat_shape = lead.to_vec();
    flat_shape.push(flat);
    let flat_x = x.clone().reshape(&flat_shape)?;
    let y = dense(&flat_x, weights, biases)?;
    if lead.is_empty() {
        y.reshape(&[1, biases.len()])
    } else {
        Ok(y)
    }
}

pub fn conv1d_backward(x: &Tensor, weights: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("conv1d_backward", format!("input {s:?} lacks a bin axis")));
    }
    let flat = s[s.len() - 2] * s[s.len() - 1];
    let flat_x = x.clone().reshape(&[x.len() / flat.max(1), flat])?;
    let flat_dy = dy.clone().reshape(&[flat_x.rows(), weights.shape()[1]])?;
    let mut g = dense_backward(&flat_x, weights, &flat_dy, true)?;
    g.input = g.input.map(|t| t.reshape(s)).transpose()?;
    Ok(g)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of relu given its output `y`: passes where `y > 0`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Saved state of a batch normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch statistics; `None` when running statistics were used.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-channel mean and biased variance over all rows.
pub(crate) fn channel_moments(x: &[f64], rows: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let sums = reduce_rows(rows, c, |s, e, acc| {
        for r in s..e {
            for (a, v) in acc.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                *a += v;
            }
        }
    });
    let n = rows.max(1) as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let sq = reduce_rows(rows, c, |s, e, acc| {
        for r in s..e {
            for ((a, v), m) in acc.iter_mut().zip(&x[r * c..(r + 1) * c]).zip(&mean) {
                let d = v - m;
                *a += d * d;
            }
        }
    });
    (mean, sq.iter().map(|s| s / n).collect())
}

fn normalize(
    x: &[f64],
    c: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = x.to_vec();
    let mut y = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut xhat, par::ROW_CHUNK * c, |_, chunk| {
        for row in chunk.chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(inv_std) {
                *v = (*v - m) * s;
            }
        }
    });
    par::for_each_chunk_mut(&mut y, par::ROW_CHUNK * c, |ci, chunk| {
        let off = ci * par::ROW_CHUNK * c;
        for (j, row) in chunk.chunks_mut(c).enumerate() {
            let xr = &xhat[off + j * c..off + (j + 1) * c];
            for (((v, xv), g), b) in row.iter_mut().zip(xr).zip(gamma).zip(beta) {
                *v = xv * g + b;
            }
        }
    });
    (y, xhat)
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, op: &'static str) -> Result<usize> {
    let c = gamma.len();
    if x.cols() != c || beta.len() != c || x.shape().is_empty() {
        return Err(Error::shape(
            op,
            format!("input {:?} with {c} gamma / {} beta entries", x.shape(), beta.len()),
        ));
    }
    Ok(c)
}

/// Batch normalization with statistics of the current batch (all rows).
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BatchNormCache)> {
    let c = check_bn(x, gamma, beta, "batchnorm")?;
    let (mean, var) = channel_moments(x.data(), x.rows(), c);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x.data(), c, &mean, &inv_std, gamma.data(), beta.data());
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: Some((mean, var)),
        },
    ))
}

/// Batch normalization with fixed (running) statistics: an affine map.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = check_bn(x, gamma, beta, "batchnorm")?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batchnorm", "running statistics width"));
    }
    let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x.data(), c, mean.data(), &inv_std, gamma.data(), beta.data());
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: None,
        },
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &Tensor, dy: &Tensor) -> Result<BatchNormGrads> {
    let c = gamma.len();
    if dy.cols() != c || dy.len() != cache.xhat.len() {
        return Err(Error::shape("batchnorm_backward", format!("dy {:?}", dy.shape())));
    }
    let rows = dy.rows();
    let g = dy.data();
    let xhat = &cache.xhat;
    let both = reduce_rows(rows, 2 * c, |s, e, acc| {
        let (dg, db) = acc.split_at_mut(c);
        for r in s..e {
            let gr = &g[r * c..(r + 1) * c];
            let xr = &xhat[r * c..(r + 1) * c];
            for j in 0..c {
                dg[j] += gr[j] * xr[j];
                db[j] += gr[j];
            }
        }
    });
    let (dgamma, dbeta) = both.split_at(c);
    let n = rows.max(1) as f64;
    let scale: Vec<f64> = gamma.data().iter().zip(&cache.inv_std).map(|(g, s)| g * s).collect();
    // training: dx = scale * (dy - dbeta / n - xhat * dgamma / n)
    let (shift, slope): (Vec<f64>, Vec<f64>) = if cache.batch_stats.is_some() {
        (0..c)
            .map(|j| (scale[j] * dbeta[j] / n, scale[j] * dgamma[j] / n))
            .unzip()
    } else {
        (vec![0.0; c], vec![0.0; c])
    };
    let mut dx = vec![0.0; dy.len()];
    par::for_each_chunk_mut(&mut dx, par::ROW_CHUNK * c, |ci, chunk| {
        let off = ci * par::ROW_CHUNK * c;
        for (j, row) in chunk.chunks_mut(c).enumerate() {
            let base = off + j * c;
            let gr = &g[base..base + c];
            let xr = &xhat[base..base + c];
            for ch in 0..c {
                row[ch] = scale[ch] * gr[ch] - shift[ch] - xr[ch] * slope[ch];
            }
        }
    });
    Ok(BatchNormGrads {
        input: Tensor::from_vec(dy.shape(), dx)?,
        gamma: dgamma.to_vec(),
        beta: dbeta.to_vec(),
    })
}

/// Max over the rows of each group. `x` is `[k, c]`; the result is
/// `[n_groups, c]`, with zero rows for empty groups. The second value holds,
/// per output element, the winning input row (lowest row on ties).
pub fn maxpool_groups(x: &Tensor, groups: &BinAssignment) -> Result<(Tensor, Vec<Option<usize>>)> {
    if x.shape().len() != 2 || x.rows() != groups.bin_of.len() {
        return Err(Error::shape(
            "maxpool_groups",
            format!("input {:?} with {} group labels", x.shape(), groups.bin_of.len()),
        ));
    }
    let c = x.cols();
    let mut y = vec![0.0; groups.n_bins * c];
    let mut arg: Vec<Option<usize>> = vec![None; groups.n_bins * c];
    for (r, &g) in groups.bin_of.iter().enumerate() {
        for ch in 0..c {
            let v = x.data()[r * c + ch];
            let slot = g * c + ch;
            if arg[slot].is_none() || v > y[slot] {
                y[slot] = v;
                arg[slot] = Some(r);
            }
        }
    }
    Ok((Tensor::from_vec(&[groups.n_bins, c], y)?, arg))
}

pub fn maxpool_groups_backward(argmax: &[Option<usize>], input_rows: usize, dy: &Tensor) -> Result<Tensor> {
    let c = dy.cols();
    if dy.len() != argmax.len() {
        return Err(Error::shape("maxpool_groups_backward", format!("dy {:?}", dy.shape())));
    }
    let mut dx = vec![0.0; input_rows * c];
    for (slot, a) in argmax.iter().enumerate() {
        if let Some(r) = a {
            dx[r * c + slot % c] += dy.data()[slot];
        }
    }
    Tensor::from_vec(&[input_rows, c], dx)
}

/// Mean softmax cross entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || logits.shape().is_empty() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {c} classes")));
    }
    let mut grad = vec![0.0; n * c];
    let mut per_row = vec![0.0; n];
    par::for_each_chunk_mut(&mut grad, par::ROW_CHUNK * c, |ci, chunk| {
        let r0 = ci * par::ROW_CHUNK;
        for (j, g) in chunk.chunks_mut(c).enumerate() {
            let z = logits.row(r0 + j);
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (gi, &zi) in g.iter_mut().zip(z) {
                *gi = (zi - zmax).exp();
                sum += *gi;
            }
            for gi in g.iter_mut() {
                *gi /= sum * n as f64;
            }
            g[labels[r0 + j]] -= 1.0 / n as f64;
        }
    });
    for (r, l) in per_row.iter_mut().enumerate() {
        let z = logits.row(r);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        *l = lse - z[labels[r]];
    }
    let loss = per_row.iter().sum::<f64>() / n.max(1) as f64;
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn dense_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5, 3]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);

        let y = dense(
            &Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(),
            &Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(),
            &Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn dense_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // spans several row chunks
        let x = random(&mut rng, &[3, 401, 7]);
        let w = random(&mut rng, &[7, 5]);
        let b = random(&mut rng, &[5]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[3, 401, 5]);
        for r in 0..x.rows() {
            for o in 0..5 {
                let want: f64 = b.data()[o] + (0..7).map(|i| x.row(r)[i] * w.data()[i * 5 + o]).sum::<f64>();
                assert!((y.row(r)[o] - want).abs() < 1e-12);
            }
        }
        let dy = random(&mut rng, &[3, 401, 5]);
        let g = dense_backward(&x, &w, &dy, true).unwrap();
        let dx = g.input.unwrap();
        for r in [0, 17, 1202] {
            for i in 0..7 {
                let want: f64 = (0..5).map(|o| dy.row(r)[o] * w.data()[i * 5 + o]).sum();
                assert!((dx.row(r)[i] - want).abs() < 1e-12);
            }
        }
        for i in 0..7 {
            for o in 0..5 {
                let want: f64 = (0..x.rows()).map(|r| x.row(r)[i] * dy.row(r)[o]).sum();
                assert!((g.weights[i * 5 + o] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(dense(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(dense(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn maxpool_example_and_empty_group() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let g = BinAssignment::new(vec![0, 0], 2).unwrap();
        let (y, arg) = maxpool_groups(&x, &g).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 0.0, 0.0]);
        assert_eq!(arg, vec![Some(1), Some(0), None, None]);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_row() {
        let x = Tensor::from_vec(&[3, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let g = BinAssignment::new(vec![0, 0, 0], 1).unwrap();
        let (_, arg) = maxpool_groups(&x, &g).unwrap();
        assert_eq!(arg, vec![Some(0)]);
        let dx = maxpool_groups_backward(&arg, 3, &Tensor::from_vec(&[1, 1], vec![1.5]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[1.5, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random(&mut rng, &[2500, 4]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = *v * (1.0 + (i % 4) as f64) + 3.0 * (i % 4) as f64;
        }
        let (y, _) = batchnorm_train(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        let (mean, var) = channel_moments(y.data(), 2500, 4);
        for c in 0..4 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_infer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[10, 3]);
        let gamma = random(&mut rng, &[3]);
        let beta = random(&mut rng, &[3]);
        let mean = random(&mut rng, &[3]);
        let var = Tensor::from_vec(&[3], vec![0.5, 1.5, 2.0]).unwrap();
        let (y, _) = batchnorm_infer(&x, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        for r in 0..10 {
            for c in 0..3 {
                let want = (x.row(r)[c] - mean.data()[c]) / (var.data()[c] + 1e-5).sqrt() * gamma.data()[c]
                    + beta.data()[c];
                assert!((y.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, g) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn conv1d_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[12, 6]);
        let b = random(&mut rng, &[6]);
        assert_eq!(conv1d(&x, &w, &b).unwrap().shape(), &[1, 6]);
        let xb = random(&mut rng, &[7, 4, 3]);
        assert_eq!(conv1d(&xb, &w, &b).unwrap().shape(), &[7, 6]);
    }
}
