use ndarray::{Array, Dimension, Zip};

pub fn leaky_relu<D: Dimension>(x: Array<f64, D>, slope: f64) -> Array<f64, D> {
    let mut x = x;
    x.mapv_inplace(|v| if v > 0.0 { v } else { v * slope });
    x
}

/// Backward through a leaky ReLU given its *output*; with a positive slope the
/// output has the same sign as the input.
pub fn leaky_relu_backward<D: Dimension>(out: &Array<f64, D>, grad: Array<f64, D>, slope: f64) -> Array<f64, D> {
    let mut grad = grad;
    Zip::from(&mut grad).and(out).for_each(|g, &y| {
        if y <= 0.0 {
            *g *= slope;
        }
    });
    grad
}
