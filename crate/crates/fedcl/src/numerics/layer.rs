//! Affine layer and ReLU activation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// A dense affine transform `y = W x + b`.
///
/// `W` is row-major with shape `[out, in]`, `b` has shape `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    w: Tensor,
    b: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl AffineLayer {
    /// Glorot-uniform weights in `(-sqrt(6/(in+out)), +sqrt(6/(in+out)))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        Ok(AffineLayer {
            w: Tensor::new(vec![out_dim, in_dim], data)?,
            b: Tensor::zeros(vec![out_dim]),
            in_dim,
            out_dim,
        })
    }

    /// Builds a layer from explicit weight and bias tensors.
    pub fn from_parts(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::shape_mismatch("AffineLayer weights", "[out, in]", w.shape()));
        }
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        if b.shape() != [out_dim] {
            return Err(Error::shape_mismatch("AffineLayer bias", [out_dim], b.shape()));
        }
        Ok(AffineLayer { w, b, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    /// `W x + b`. Errors when `x` does not match the layer input dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.in_dim {
            return Err(Error::shape_mismatch("affine forward", [self.in_dim], x.shape()));
        }
        let w = self.w.data();
        let mut out = self.b.data().to_vec();
        for (o, sum) in out.iter_mut().enumerate() {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            for (wi, xi) in row.iter().zip(x.data()) {
                *sum += wi * xi;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Gradients of a scalar loss through this layer.
    ///
    /// `x` is the input the forward pass saw, `d_out` is dL/dy. Returns
    /// `(dW, db, dx)`.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if x.len() != self.in_dim {
            return Err(Error::shape_mismatch("affine backward x", [self.in_dim], x.shape()));
        }
        if d_out.len() != self.out_dim {
            return Err(Error::shape_mismatch(
                "affine backward d_out",
                [self.out_dim],
                d_out.shape(),
            ));
        }
        let mut dw = vec![0.0; self.in_dim * self.out_dim];
        let mut dx = vec![0.0; self.in_dim];
        let w = self.w.data();
        for o in 0..self.out_dim {
            let g = d_out.data()[o];
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                dw[row + i] = g * x.data()[i];
                dx[i] += w[row + i] * g;
            }
        }
        Ok((
            Tensor::new(vec![self.out_dim, self.in_dim], dw)?,
            d_out.clone(),
            Tensor::vector(dx),
        ))
    }

    /// In-place SGD update `W -= lr dW`, `b -= lr db`.
    pub fn sgd_step(&mut self, dw: &Tensor, db: &Tensor, lr: f64) -> Result<()> {
        self.w.add_scaled(dw, -lr)?;
        self.b.add_scaled(db, -lr)
    }

    pub(crate) fn params(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Element-wise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape")
}

/// Gates an upstream gradient by the ReLU activation pattern.
///
/// `activated` is the forward output of `relu`; entries that were clamped to
/// zero (including inputs exactly at zero) pass no gradient.
pub fn relu_backward(activated: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if !activated.same_shape(upstream) {
        return Err(Error::shape_mismatch(
            "relu backward",
            activated.shape(),
            upstream.shape(),
        ));
    }
    let data = activated
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(activated.shape().to_vec(), data)
}
