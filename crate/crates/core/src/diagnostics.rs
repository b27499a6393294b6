//! Finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::FD_STEP;
use crate::autodiff::{grad_check, ops, GradCase, GradCheckReport, Mode, Parameters, Tensor, BN_EPSILON};
use crate::error::Result;
use crate::geom::Point3;
use crate::rif::BinAssignment;
use crate::riconv::{DeconvConfig, DeconvGeometry, Geometry, RIConvConfig, RIConvLayer, RIDeconvLayer};

/// Largest accepted relative error for a single primitive.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Largest accepted relative error for a composed block.
pub const BLOCK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, normal_vec(rng, n)).expect("shape matches")
}

/// Values in `±[0.5, 1.5]`, safely away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape matches")
}

fn weighted_sum(y: &Tensor, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// A loss `Σ r ⊙ f(inputs)` over plain tensors with a hand-supplied
/// gradient routine.
struct Primitive<F, G> {
    inputs: Vec<(String, Tensor)>,
    forward: F,
    backward: G,
}

impl<F, G> GradCase for Primitive<F, G>
where
    F: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    fn loss(&mut self) -> Result<f64> {
        let t: Vec<Tensor> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        (self.forward)(&t)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let t: Vec<Tensor> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let grads = (self.backward)(&t)?;
        for ((_, t), g) in self.inputs.iter_mut().zip(grads) {
            t.accumulate_grad(&g);
        }
        (self.forward)(&t)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.inputs {
            f(n, t);
        }
    }
}

fn check_primitive<F, G>(name: &str, inputs: Vec<(&str, Tensor)>, forward: F, backward: G) -> Result<GradCheckEntry>
where
    F: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    let mut case = Primitive {
        inputs: inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        forward,
        backward,
    };
    Ok(GradCheckEntry {
        report: grad_check(name, &mut case, FD_STEP)?,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

fn dense_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let r = normal_vec(rng, 8 * 6);
    let r2 = r.clone();
    check_primitive(
        "dense",
        vec![("x", tensor(rng, &[8, 4])), ("w", tensor(rng, &[4, 6])), ("b", tensor(rng, &[6]))],
        move |t| Ok(weighted_sum(&ops::dense(&t[0], &t[1], &t[2])?, &r)),
        move |t| {
            let dy = Tensor::from_vec(&[8, 6], r2.clone())?;
            let g = ops::dense_backward(&t[0], &t[1], &dy, true)?;
            Ok(vec![g.input.expect("requested").into_data(), g.weights, g.biases])
        },
    )
}

fn conv1d_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let (lead, bins, c_in, c_out) = (4, 3, 2, 5);
    let r = normal_vec(rng, lead * c_out);
    let r2 = r.clone();
    check_primitive(
        "conv1d",
        vec![
            ("x", tensor(rng, &[lead, bins, c_in])),
            ("w", tensor(rng, &[bins * c_in, c_out])),
            ("b", tensor(rng, &[c_out])),
        ],
        move |t| Ok(weighted_sum(&ops::conv1d(&t[0], &t[1], &t[2])?, &r)),
        move |t| {
            let dy = Tensor::from_vec(&[lead, c_out], r2.clone())?;
            let g = ops::conv1d_backward(&t[0], &t[1], &dy)?;
            Ok(vec![g.input.expect("requested").into_data(), g.weights, g.biases])
        },
    )
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let r = normal_vec(rng, 6 * 5);
    let r2 = r.clone();
    check_primitive(
        "relu",
        vec![("x", off_kink(rng, &[6, 5]))],
        move |t| Ok(weighted_sum(&ops::relu(&t[0]), &r)),
        move |t| {
            let y = ops::relu(&t[0]);
            let dy = Tensor::from_vec(&[6, 5], r2.clone())?;
            Ok(vec![ops::relu_backward(&y, &dy).into_data()])
        },
    )
}

fn batchnorm_case(rng: &mut ChaCha8Rng, training: bool) -> Result<GradCheckEntry> {
    let (rows, c) = (8, 4);
    let r = normal_vec(rng, rows * c);
    let r2 = r.clone();
    let mean = tensor(rng, &[c]);
    let var = Tensor::from_vec(&[c], (0..c).map(|_| rng.random_range(0.5..2.0)).collect())?;
    let (mean2, var2) = (mean.clone(), var.clone());
    let run = move |t: &[Tensor], m: &Tensor, v: &Tensor| {
        if training {
            ops::batchnorm_train(&t[0], &t[1], &t[2], BN_EPSILON)
        } else {
            ops::batchnorm_infer(&t[0], &t[1], &t[2], m, v, BN_EPSILON)
        }
    };
    check_primitive(
        if training { "batchnorm_train" } else { "batchnorm_infer" },
        vec![("x", tensor(rng, &[rows, c])), ("gamma", tensor(rng, &[c])), ("beta", tensor(rng, &[c]))],
        move |t| Ok(weighted_sum(&run(t, &mean, &var)?.0, &r)),
        move |t| {
            let (_, cache) = run(t, &mean2, &var2)?;
            let dy = Tensor::from_vec(&[rows, c], r2.clone())?;
            let g = ops::batchnorm_backward(&cache, &t[1], &dy)?;
            Ok(vec![g.input.into_data(), g.gamma, g.beta])
        },
    )
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let (k, c, n_bins) = (9, 3, 4);
    // distinct values on a coarse grid keep every max far from a tie
    let mut values: Vec<f64> = (0..k * c).map(|i| i as f64 * 0.1).collect();
    for i in (1..values.len()).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[k, c], values)?;
    let bins = BinAssignment::new(vec![0, 0, 1, 1, 1, 3, 0, 3, 1], n_bins)?;
    let bins2 = bins.clone();
    let r = normal_vec(rng, n_bins * c);
    let r2 = r.clone();
    check_primitive(
        "maxpool",
        vec![("x", x)],
        move |t| Ok(weighted_sum(&ops::maxpool_groups(&t[0], &bins)?.0, &r)),
        move |t| {
            let (_, argmax) = ops::maxpool_groups(&t[0], &bins2)?;
            let dy = Tensor::from_vec(&[n_bins, c], r2.clone())?;
            Ok(vec![ops::maxpool_groups_backward(&argmax, k, &dy)?.into_data()])
        },
    )
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let labels = vec![0, 3, 4, 1];
    let labels2 = labels.clone();
    check_primitive(
        "softmax_cross_entropy",
        vec![("logits", tensor(rng, &[4, 5]))],
        move |t| Ok(ops::softmax_cross_entropy(&t[0], &labels)?.0),
        move |t| Ok(vec![ops::softmax_cross_entropy(&t[0], &labels2)?.1.into_data()]),
    )
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)))
        .collect()
}

struct ConvBlock {
    layer: RIConvLayer,
    geoms: Vec<Geometry>,
    input: Tensor,
    r: Vec<f64>,
}

impl GradCase for ConvBlock {
    fn loss(&mut self) -> Result<f64> {
        let refs: Vec<&Geometry> = self.geoms.iter().collect();
        let (y, _) = self.layer.forward(&refs, Some(&self.input), Mode::Training)?;
        Ok(weighted_sum(&y, &self.r))
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let refs: Vec<&Geometry> = self.geoms.iter().collect();
        let (y, cache) = self.layer.forward(&refs, Some(&self.input), Mode::Training)?;
        let dy = Tensor::from_vec(y.shape(), self.r.clone())?;
        let d = self.layer.backward(cache, dy)?.expect("layer has inputs");
        self.input.accumulate_grad(d.data());
        Ok(weighted_sum(&y, &self.r))
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("input", &mut self.input);
        self.layer.visit_tensors("", &mut |n, t, trainable| {
            if trainable {
                f(n, t)
            }
        });
    }
}

fn riconv_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let (n, c_prev) = (20, 3);
    let cfg = RIConvConfig {
        lift_mlp_widths: vec![6],
        ..RIConvConfig::new(6, 8, 2, 5)
    };
    let layer = RIConvLayer::new(cfg, c_prev, rng)?;
    let geoms = (0..2)
        .map(|_| layer.geometry(&random_points(rng, n)))
        .collect::<Result<Vec<_>>>()?;
    let input = tensor(rng, &[2 * n, c_prev]);
    let r = normal_vec(rng, 2 * 6 * 5);
    let mut case = ConvBlock { layer, geoms, input, r };
    Ok(GradCheckEntry {
        report: grad_check("riconv_block", &mut case, FD_STEP)?,
        tolerance: BLOCK_TOLERANCE,
    })
}

struct DeconvBlock {
    layer: RIDeconvLayer,
    geoms: Vec<DeconvGeometry>,
    coarse: Tensor,
    skip: Tensor,
    r: Vec<f64>,
}

impl GradCase for DeconvBlock {
    fn loss(&mut self) -> Result<f64> {
        let refs: Vec<&DeconvGeometry> = self.geoms.iter().collect();
        let (y, _) = self.layer.forward(&refs, &self.coarse, Some(&self.skip), Mode::Training)?;
        Ok(weighted_sum(&y, &self.r))
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let refs: Vec<&DeconvGeometry> = self.geoms.iter().collect();
        let (y, cache) = self.layer.forward(&refs, &self.coarse, Some(&self.skip), Mode::Training)?;
        let dy = Tensor::from_vec(y.shape(), self.r.clone())?;
        let (dc, ds) = self.layer.backward(cache, dy)?;
        self.coarse.accumulate_grad(dc.data());
        self.skip.accumulate_grad(ds.expect("skip present").data());
        Ok(weighted_sum(&y, &self.r))
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("coarse", &mut self.coarse);
        f("skip", &mut self.skip);
        self.layer.visit_tensors("", &mut |n, t, trainable| {
            if trainable {
                f(n, t)
            }
        });
    }
}

fn rideconv_case(rng: &mut ChaCha8Rng) -> Result<GradCheckEntry> {
    let (n_coarse, n_fine, c_coarse, c_skip) = (6, 14, 4, 3);
    let cfg = DeconvConfig {
        interp_neighbors: 3,
        mlp_out: 5,
        conv: RIConvConfig {
            lift_mlp_widths: vec![4],
            ..RIConvConfig::new(n_fine, 6, 2, 4)
        },
    };
    let layer = RIDeconvLayer::new(cfg, c_coarse, c_skip, rng)?;
    let geoms = (0..2)
        .map(|_| {
            let fine = random_points(rng, n_fine);
            layer.geometry(&fine[..n_coarse], &fine)
        })
        .collect::<Result<Vec<_>>>()?;
    let coarse = tensor(rng, &[2 * n_coarse, c_coarse]);
    let skip = tensor(rng, &[2 * n_fine, c_skip]);
    let r = normal_vec(rng, 2 * n_fine * 4);
    let mut case = DeconvBlock {
        layer,
        geoms,
        coarse,
        skip,
        r,
    };
    Ok(GradCheckEntry {
        report: grad_check("rideconv_block", &mut case, FD_STEP)?,
        tolerance: BLOCK_TOLERANCE,
    })
}

/// Runs every check with inputs drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        dense_case(&mut rng)?,
        conv1d_case(&mut rng)?,
        relu_case(&mut rng)?,
        batchnorm_case(&mut rng, true)?,
        batchnorm_case(&mut rng, false)?,
        maxpool_case(&mut rng)?,
        softmax_case(&mut rng)?,
        riconv_case(&mut rng)?,
        rideconv_case(&mut rng)?,
    ])
}
