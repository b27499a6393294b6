use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::ops::{self, BatchNormCache};
use super::Tensor;

/// Batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Training,
    /// Running statistics; batch-norm is a fixed affine map.
    Inference,
}

/// Something that owns named tensors: learnable weights plus non-trainable
/// buffers such as batch-norm running statistics.
pub trait Parameters {
    /// Visits every tensor in a fixed order. The flag is `true` for
    /// trainable tensors.
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool));
}

pub fn zero_grads<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_tensors("", &mut |_, t, _| t.zero_grad());
}

pub fn count_trainable<P: Parameters + ?Sized>(p: &mut P) -> usize {
    let mut n = 0;
    p.visit_tensors("", &mut |_, t, trainable| {
        if trainable {
            n += t.len();
        }
    });
    n
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Moves the running statistics toward a batch's mean and biased variance.
    pub fn fold_batch_stats(&mut self, mean: &[f64], var: &[f64]) {
        let mom = self.momentum;
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = mom * *r + (1.0 - mom) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = mom * *r + (1.0 - mom) * v;
        }
    }
}

/// One shared fully connected layer, optionally followed by batch
/// normalization and a ReLU.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// `[c_in, c_out]`
    pub weights: Tensor,
    /// `[c_out]`
    pub biases: Tensor,
    pub bn: Option<BatchNormParams>,
    pub relu: bool,
}

/// What a [`LayerParams`] forward pass keeps for its backward pass.
#[derive(Debug)]
pub struct LayerCache {
    input: Tensor,
    bn: Option<BatchNormCache>,
    active: Option<Vec<bool>>,
}

impl LayerCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

impl LayerParams {
    /// He-normal weights (unit-gain normal when no ReLU follows), zero biases.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, batchnorm: bool, relu: bool, rng: &mut R) -> Self {
        let gain = if relu { 2.0 } else { 1.0 };
        let normal = Normal::new(0.0, (gain / c_in.max(1) as f64).sqrt()).expect("positive std");
        let w = (0..c_in * c_out).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(c_in, c_out, w),
            biases: Tensor::zeros(&[c_out]),
            bn: batchnorm.then(|| BatchNormParams::new(c_out)),
            relu,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        let mut y = ops::dense(&x, &self.weights, &self.biases)?;
        let mut bn_cache = None;
        if let Some(bn) = &self.bn {
            let (z, cache) = match mode {
                Mode::Training => ops::batchnorm_train(&y, &bn.gamma, &bn.beta, bn.eps)?,
                Mode::Inference => {
                    ops::batchnorm_infer(&y, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, bn.eps)?
                }
            };
            y = z;
            bn_cache = Some(cache);
        }
        let mut active = None;
        if self.relu {
            let mut mask = Vec::with_capacity(y.len());
            for v in y.data_mut() {
                mask.push(*v > 0.0);
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            active = Some(mask);
        }
        Ok((
            y,
            LayerCache {
                input: x,
                bn: bn_cache,
                active,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &LayerCache) {
        if let (Some(bn), Some(BatchNormCache { batch_stats: Some((mean, var)), .. })) =
            (self.bn.as_mut(), cache.bn.as_ref())
        {
            bn.fold_batch_stats(mean, var);
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(&mut self, cache: LayerCache, mut dy: Tensor, need_input: bool) -> Result<Option<Tensor>> {
        if let Some(mask) = &cache.active {
            for (g, &on) in dy.data_mut().iter_mut().zip(mask) {
                if !on {
                    *g = 0.0;
                }
            }
        }
        if let (Some(bn), Some(bc)) = (self.bn.as_mut(), cache.bn.as_ref()) {
            let g = ops::batchnorm_backward(bc, &bn.gamma, &dy)?;
            bn.gamma.accumulate_grad(&g.gamma);
            bn.beta.accumulate_grad(&g.beta);
            dy = g.input;
        }
        let g = ops::dense_backward(&cache.input, &self.weights, &dy, need_input)?;
        self.weights.accumulate_grad(&g.weights);
        self.biases.accumulate_grad(&g.biases);
        Ok(g.input)
    }
}

impl Parameters for LayerParams {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        f(&join(prefix, "weights"), &mut self.weights, true);
        f(&join(prefix, "biases"), &mut self.biases, true);
        if let Some(bn) = &mut self.bn {
            f(&join(prefix, "bn_gamma"), &mut bn.gamma, true);
            f(&join(prefix, "bn_beta"), &mut bn.beta, true);
            f(&join(prefix, "bn_running_mean"), &mut bn.running_mean, false);
            f(&join(prefix, "bn_running_var"), &mut bn.running_var, false);
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_tensors(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Runs `x` through a stack of layers, keeping every cache.
pub fn forward_stack(layers: &[LayerParams], mut x: Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, c) = layer.forward(x, mode)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

pub fn update_stack_running_stats(layers: &mut [LayerParams], caches: &[LayerCache]) {
    for (l, c) in layers.iter_mut().zip(caches) {
        l.update_running_stats(c);
    }
}

/// Backward through a stack built by [`forward_stack`]; the first layer's
/// input gradient is produced only when `need_input` is set.
pub fn backward_stack(
    layers: &mut [LayerParams],
    caches: Vec<LayerCache>,
    mut dy: Tensor,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let n = layers.len();
    for (i, (layer, cache)) in layers.iter_mut().zip(caches).enumerate().rev() {
        let want = i > 0 || need_input;
        match layer.backward(cache, dy, want)? {
            Some(dx) => dy = dx,
            None => return Ok(None),
        }
    }
    Ok(if n == 0 || need_input { Some(dy) } else { None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = LayerParams::new(2, 2, true, false, &mut rng);
        layer.weights = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap();
        let (_, cache) = layer.forward(x, Mode::Training).unwrap();
        layer.update_running_stats(&cache);
        let bn = layer.bn.as_ref().unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_mean.data()[1] - 1.0).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
        assert!((bn.running_var.data()[1] - 0.9).abs() < 1e-12);
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn visit_order_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stack = vec![
            LayerParams::new(3, 4, true, true, &mut rng),
            LayerParams::new(4, 2, false, false, &mut rng),
        ];
        let mut names = Vec::new();
        stack.visit_tensors("head", &mut |n, _, t| names.push((n.to_string(), t)));
        assert_eq!(names[0], ("head.0.weights".to_string(), true));
        assert_eq!(names[4], ("head.0.bn_running_mean".to_string(), false));
        assert_eq!(names.last().unwrap().0, "head.1.biases");
        assert_eq!(count_trainable(&mut stack), 3 * 4 + 4 + 8 + 4 * 2 + 2);
    }
}
