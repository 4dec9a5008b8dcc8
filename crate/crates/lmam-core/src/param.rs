//! Trainable parameter: a value matrix paired with an owned gradient buffer.
//! Backward passes accumulate into `grad`; `zero_grad` resets it.

use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }

    pub fn len(&self) -> usize {
        self.value.rows() * self.value.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulates `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Matrix) {
        self.grad
            .add_assign(g)
            .expect("gradient shape must match parameter shape");
    }
}

/// Read-only visitor over named parameters.
pub type ParamVisitor<'a> = &'a mut dyn FnMut(&str, &Param);

/// Mutable visitor over named parameters (optimizer steps, checkpoint load).
pub type ParamVisitorMut<'a> = &'a mut dyn FnMut(&str, &mut Param);
