//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};

use super::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of the relative error, as a fraction of the largest
/// analytic gradient component in the case. Components far below that
/// scale (e.g. the exactly-zero gradient of a bias feeding batch
/// normalization) are compared absolutely instead of against rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// A scalar function of a fixed set of tensors.
pub trait GradCase {
    /// Loss only. Must not mutate any state that changes later results.
    fn loss(&mut self) -> Result<f64>;

    /// Loss, with analytic gradients accumulated into the grad buffers of
    /// the checked tensors (zeroed by the harness beforehand).
    fn loss_and_grad(&mut self) -> Result<f64>;

    /// Every checked tensor, in a fixed order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_relative_error: f64,
    /// Tensor and flat index of the worst element.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn perturb(case: &mut dyn GradCase, target: usize, index: usize, value: f64) {
    let mut t = 0;
    case.visit(&mut |_, tensor| {
        if t == target {
            tensor.data_mut()[index] = value;
        }
        t += 1;
    });
}

/// Compares analytic gradients with central differences over every element
/// of every checked tensor and returns the worst relative error.
pub fn grad_check(name: &str, case: &mut dyn GradCase, h: f64) -> Result<GradCheckReport> {
    case.visit(&mut |_, t| {
        t.grad_mut();
        t.zero_grad();
    });
    case.loss_and_grad()?;
    let mut analytic: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    case.visit(&mut |n, t| {
        analytic.push((
            n.to_string(),
            t.data().to_vec(),
            t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]),
        ))
    });

    let scale = analytic
        .iter()
        .flat_map(|(_, _, g)| g.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (ti, (tname, values, grads)) in analytic.iter().enumerate() {
        for (i, (&x, &g)) in values.iter().zip(grads).enumerate() {
            perturb(case, ti, i, x + h);
            let up = case.loss()?;
            perturb(case, ti, i, x - h);
            let down = case.loss()?;
            perturb(case, ti, i, x);
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("gradient check of {name}: {tname}[{i}]"),
                });
            }
            let e = relative_error(g, numeric, floor);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("{tname}[{i}]"));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_relative_error: worst.0,
        worst: worst.1,
        checked,
    })
}
