//! Minimal f64 layer library with explicit backward passes.
//!
//! Every layer exposes a `forward_t` that returns its output together with a
//! cache, and a `backward` that consumes the cache, accumulates parameter
//! gradients into [`Param::grad`] and returns the gradient with respect to the
//! layer input. Everything runs single-threaded and in a fixed order, so two
//! runs from the same seed produce bitwise-identical results.

mod act;
mod conv;
mod linear;
mod norm;
mod optim;
mod param;
pub mod pool;

pub use act::{leaky_relu, leaky_relu_backward};
pub use conv::{col2im, im2col, nchw_to_rows, rows_to_nchw, Conv2d, Conv2dCache, ConvGeom, ConvTranspose2d, ConvTranspose2dCache};
pub use linear::{Linear, Mlp, MlpCache};
pub use norm::{BatchNorm2d, BnCache};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use param::{Module, Param, Visitor};

/// Train/eval switch for layers whose behavior differs between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
