//! Differentiable building blocks.
//!
//! Every layer owns its parameters, its gradient buffers, and whatever it
//! cached during the last forward pass. `forward` caches, `backward`
//! consumes the cache, accumulates parameter gradients, and returns the
//! input gradient. All math is f64 so finite-difference checks resolve
//! cleanly.

pub mod act;
pub mod adamw;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod upsample;

pub use act::{gelu, gelu_backward, sigmoid};
pub use adamw::AdamW;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};

/// Uniform access to a module's trainable parameters and persistent
/// buffers, used by the optimizer and the checkpoint writer. Tensors are
/// exposed as flat slices; names are dotted paths rooted at the module.
pub trait Params {
    /// Visit every trainable parameter as (name, value, gradient).
    #[allow(clippy::type_complexity)]
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64]));

    /// Visit every non-trainable buffer (e.g. normalization running stats).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut [f64])) {}

    fn zero_grad(&mut self) {
        self.visit(&mut |_, _, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v, _| n += v.len());
        n
    }
}

/// Wrap a visitor closure so children report under `prefix.child-name`.
#[allow(clippy::type_complexity)]
pub fn scoped<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut [f64], &mut [f64]),
) -> impl FnMut(&str, &mut [f64], &mut [f64]) + 'a {
    move |name, v, g| f(&format!("{prefix}.{name}"), v, g)
}

/// Buffer-visitor counterpart of [`scoped`].
pub fn scoped_buf<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut [f64]),
) -> impl FnMut(&str, &mut [f64]) + 'a {
    move |name, v| f(&format!("{prefix}.{name}"), v)
}
