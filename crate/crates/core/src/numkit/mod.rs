//! Minimal dense-tensor engine: row-major tensors, a single-use
//! reverse-mode tape, and the Adam optimizer.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var, PROB_FLOOR};
pub use optim::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Named forward kernels, for callers that compose kernels dynamically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    MatMul,
    MatMulNT,
    Add,
    Mul,
    ConcatCols,
    SoftmaxRows,
    /// Layer normalization, inputs `(x, gain, bias)`.
    LayerNorm,
    Relu,
    Scale(i32),
    Sum,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::MatMul => "matmul",
            Kernel::MatMulNT => "matmul_nt",
            Kernel::Add => "add",
            Kernel::Mul => "mul",
            Kernel::ConcatCols => "concat_cols",
            Kernel::SoftmaxRows => "softmax",
            Kernel::LayerNorm => "layer_norm",
            Kernel::Relu => "relu",
            Kernel::Scale(_) => "scale",
            Kernel::Sum => "sum",
        }
    }

    fn arity(self) -> Option<usize> {
        match self {
            Kernel::MatMul | Kernel::MatMulNT | Kernel::Add | Kernel::Mul => Some(2),
            Kernel::LayerNorm => Some(3),
            Kernel::ConcatCols => None,
            _ => Some(1),
        }
    }
}

impl<R: Real> Graph<R> {
    /// Applies `kernel` to `inputs`. `Scale(k)` multiplies by `k / 4`.
    pub fn apply(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kernel.arity() {
            if inputs.len() != n {
                return Err(Error::dim(
                    kernel.name(),
                    format!("expects {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kernel {
            Kernel::MatMul => self.matmul(inputs[0], inputs[1]),
            Kernel::MatMulNT => self.matmul_nt(inputs[0], inputs[1]),
            Kernel::Add => self.add(inputs[0], inputs[1]),
            Kernel::Mul => self.mul(inputs[0], inputs[1]),
            Kernel::ConcatCols => self.concat_cols(inputs),
            Kernel::SoftmaxRows => self.softmax_rows(inputs[0]),
            Kernel::LayerNorm => self.layer_norm(inputs[0], inputs[1], inputs[2]),
            Kernel::Relu => Ok(self.relu(inputs[0])),
            Kernel::Scale(k) => Ok(self.scale(inputs[0], k as f64 / 4.0)),
            Kernel::Sum => Ok(self.sum(inputs[0])),
        }
    }
}

/// Row softmax of a plain tensor.
pub fn softmax<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (m, n) = x.dims2();
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        kernels::softmax_row(x.row(i), &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Row layer normalization without the affine part.
pub fn normalize_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (m, n) = x.dims2();
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        kernels::normalize_row(x.row(i), &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
