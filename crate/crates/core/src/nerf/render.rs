//! Emission-absorption compositing along one ray and its adjoint.
//!
//! For samples with density `sigma_i` and spacing `delta_i`:
//! `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
//! `w_i = T_i alpha_i`, color = `sum_i w_i c_i`. Samples with `valid = false`
//! contribute zero density. Transmittance is accumulated in f64 regardless of `T`.

use crate::error::{Error, Result};
use crate::scalar::{f, s, Scalar};

/// Upper clamp on `sigma * delta`; beyond it `exp` underflows to zero anyway.
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub color: [T; 3],
    pub weights: Vec<T>,
    pub transmittance: Vec<T>,
    /// Sum of weights, `1 - prod(1 - alpha)`.
    pub acc_alpha: T,
    /// Transmittance past the last sample.
    pub residual: T,
}

impl<T: Scalar> RenderOutput<T> {
    /// Expected termination distance `sum w_i t_i`.
    pub fn depth(&self, t: &[f64]) -> f64 {
        self.weights.iter().zip(t).map(|(&w, &t)| f(w) * t).sum()
    }
}

#[inline]
fn optical_depth(sigma: f64, delta: f64, valid: bool) -> f64 {
    if valid {
        (sigma * delta).min(MAX_OPTICAL_DEPTH)
    } else {
        0.0
    }
}

fn check_inputs<T: Scalar>(sigma: &[T], rgb: &[[T; 3]], delta: &[T], valid: &[bool]) -> Result<()> {
    let n = sigma.len();
    if rgb.len() != n || delta.len() != n || valid.len() != n {
        return Err(Error::Validation(format!(
            "render inputs disagree in length: sigma {n}, rgb {}, delta {}, valid {}",
            rgb.len(),
            delta.len(),
            valid.len()
        )));
    }
    if let Some(v) = sigma.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Validation(format!("density {v} is negative or NaN")));
    }
    if let Some(v) = delta.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Validation(format!("spacing {v} is negative or NaN")));
    }
    Ok(())
}

pub fn volume_render<T: Scalar>(sigma: &[T], rgb: &[[T; 3]], delta: &[T], valid: &[bool]) -> Result<RenderOutput<T>> {
    check_inputs(sigma, rgb, delta, valid)?;
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut color = [0.0f64; 3];
    let mut trans = 1.0f64;
    let mut acc = 0.0f64;
    for i in 0..n {
        let step = (-optical_depth(f(sigma[i]), f(delta[i]), valid[i])).exp();
        let alpha = 1.0 - step;
        let w = trans * alpha;
        transmittance.push(s(trans));
        weights.push(s(w));
        for k in 0..3 {
            color[k] += w * f(rgb[i][k]);
        }
        acc += w;
        trans *= step;
    }
    Ok(RenderOutput { color: color.map(s), weights, transmittance, acc_alpha: s(acc), residual: s(trans) })
}

/// `color + (1 - acc_alpha) * background`.
pub fn composite_background<T: Scalar>(out: &RenderOutput<T>, background: [T; 3]) -> [T; 3] {
    let rest = T::one() - out.acc_alpha;
    std::array::from_fn(|k| out.color[k] + rest * background[k])
}

/// Gradients of a scalar loss with respect to `sigma` and `rgb`, given the
/// gradient `d_color` on the background-composited color.
///
/// The background term uses the residual transmittance, so it is exact even
/// where `1 - acc_alpha` would round.
pub fn render_backward<T: Scalar>(
    sigma: &[T],
    rgb: &[[T; 3]],
    delta: &[T],
    valid: &[bool],
    d_color: [f64; 3],
    background: [f64; 3],
) -> (Vec<T>, Vec<[T; 3]>) {
    let n = sigma.len();
    // Forward quantities in f64.
    let mut trans = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut t = 1.0f64;
    for i in 0..n {
        trans.push(t);
        let step = (-optical_depth(f(sigma[i]), f(delta[i]), valid[i])).exp();
        weights.push(t * (1.0 - step));
        t *= step;
    }
    trans.push(t);

    let dot = |c: [f64; 3]| c[0] * d_color[0] + c[1] * d_color[1] + c[2] * d_color[2];
    let mut d_sigma = vec![T::zero(); n];
    let mut d_rgb = vec![[T::zero(); 3]; n];
    // suffix = sum_{i>k} w_i c_i + T_N bg, projected on d_color.
    let mut suffix = t * dot(background);
    for k in (0..n).rev() {
        let ck = rgb[k].map(f);
        let gk = dot(ck);
        d_rgb[k] = d_color.map(|d| s(d * weights[k]));
        let unclamped = f(sigma[k]) * f(delta[k]) < MAX_OPTICAL_DEPTH;
        if valid[k] && unclamped {
            d_sigma[k] = s(f(delta[k]) * (trans[k + 1] * gk - suffix));
        }
        suffix += weights[k] * gk;
    }
    (d_sigma, d_rgb)
}

/// Mean over rays of the squared L2 color error.
pub fn rgb_loss<T: Scalar>(predicted: &[[T; 3]], target: &[[T; 3]]) -> T {
    assert_eq!(predicted.len(), target.len(), "prediction and target batches differ in size");
    let total: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, q)| (0..3).map(|k| (f(p[k]) - f(q[k])).powi(2)).sum::<f64>())
        .sum();
    s(total / predicted.len().max(1) as f64)
}

/// Gradient of [`rgb_loss`] with respect to one prediction in a batch of `batch`.
pub fn rgb_loss_grad<T: Scalar>(predicted: [T; 3], target: [T; 3], batch: usize) -> [f64; 3] {
    std::array::from_fn(|k| 2.0 * (f(predicted[k]) - f(target[k])) / batch as f64)
}
