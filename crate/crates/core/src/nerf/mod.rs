//! Differentiable radiance-field core: encoding, MLP, compositor, loss, optimizer.

mod adam;
mod encoding;
mod mlp;
mod render;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use encoding::{encode_batch, encoded_len, positional_encoding};
pub use mlp::{mlp_forward, Dense, DensityActivation, ForwardCache, MlpConfig, MlpParams};
pub use render::{
    composite_background, render_backward, rgb_loss, rgb_loss_grad, volume_render, RenderOutput, MAX_OPTICAL_DEPTH,
};

use crate::scalar::Scalar;

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
