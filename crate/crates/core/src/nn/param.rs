use ndarray::ArrayD;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn has_nonzero_grad(&self) -> bool {
        self.grad.iter().any(|g| *g != 0.0)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Walks the named tensors of a module in a fixed order.
pub trait Visitor {
    fn param(&mut self, name: &str, param: &mut Param);

    /// Non-trainable state such as batch-norm running statistics.
    fn buffer(&mut self, _name: &str, _buffer: &mut ArrayD<f64>) {}
}

pub trait Module {
    fn visit(&mut self, prefix: &str, visitor: &mut dyn Visitor);

    fn zero_grad(&mut self) {
        struct Zero;
        impl Visitor for Zero {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.zero_grad();
            }
        }
        self.visit("", &mut Zero);
    }

    fn num_params(&mut self) -> usize {
        struct Count(usize);
        impl Visitor for Count {
            fn param(&mut self, _: &str, p: &mut Param) {
                self.0 += p.len();
            }
        }
        let mut c = Count(0);
        self.visit("", &mut c);
        c.0
    }
}
