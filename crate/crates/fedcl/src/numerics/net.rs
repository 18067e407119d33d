//! Multi-layer perceptron built from affine layers with ReLU between them.
//!
//! Backprop is hand-wired for this fixed architecture: affine layers with
//! ReLU after every layer except the last (linear output). A zero-layer
//! network is the identity, which the degenerate architecture tests rely on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layer::{relu, relu_backward, AffineLayer};
use crate::numerics::tensor::Tensor;

/// Feed-forward network: `affine -> relu -> ... -> affine`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<AffineLayer>,
    input_dim: usize,
    output_dim: usize,
}

/// Activations recorded by a forward pass, consumed by `backward`.
///
/// `activations[0]` is the input; `activations[i+1]` is the post-activation
/// output of layer `i` (post-ReLU for hidden layers, raw affine for the last).
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Tensor>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache has at least the input")
    }
}

/// One gradient tensor per trainable tensor, in parameter order
/// `[W0, b0, W1, b1, ...]`, shape-matched to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    grads: Vec<Tensor>,
}

impl GradBundle {
    /// Zero gradients shaped like the network's parameters.
    pub fn zeros_like(net: &Mlp) -> Self {
        let grads = net.params().into_iter().map(Tensor::zeros_like).collect();
        GradBundle { grads }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        GradBundle { grads }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    /// `self += scale * other`. Errors if the bundles are not shape-matched.
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::shape_mismatch(
                "GradBundle::add_scaled",
                self.grads.len(),
                other.grads.len(),
            ));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum()
    }
}

impl Mlp {
    /// Builds a network from a chain of dimensions `[d0, d1, ..., dn]`
    /// (one affine layer per consecutive pair), Glorot-initialized.
    ///
    /// A single-element chain builds the zero-layer identity network.
    pub fn from_dims<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("empty dimension chain".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| AffineLayer::glorot(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp {
            layers,
            input_dim: dims[0],
            output_dim: *dims.last().unwrap(),
        })
    }

    /// The zero-layer identity network on `dim` inputs.
    pub fn identity(dim: usize) -> Self {
        Mlp { layers: Vec::new(), input_dim: dim, output_dim: dim }
    }

    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "from_layers needs at least one layer; use Mlp::identity".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape_mismatch(
                    "Mlp::from_layers",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        let input_dim = layers[0].in_dim();
        let output_dim = layers.last().unwrap().out_dim();
        Ok(Mlp { layers, input_dim, output_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(AffineLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(AffineLayer::params_mut).collect()
    }

    /// Forward pass caching every activation for a later backward pass.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.len() != self.input_dim {
            return Err(Error::shape_mismatch("mlp forward", [self.input_dim], x.shape()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(activations.last().unwrap())?;
            let a = if i < last { relu(&z) } else { z };
            activations.push(a);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, MlpCache { activations }))
    }

    /// Forward pass without keeping the cache.
    pub fn output(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Backward pass from an upstream gradient at the output.
    ///
    /// Returns the parameter gradients and the gradient at the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &Tensor) -> Result<(GradBundle, Tensor)> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::State(
                "forward cache does not match network depth".into(),
            ));
        }
        if d_out.len() != self.output_dim {
            return Err(Error::shape_mismatch(
                "mlp backward",
                [self.output_dim],
                d_out.shape(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len() * 2);
        let mut upstream = d_out.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // Hidden layers pass through a ReLU whose output is cached.
            let d_post = if i < last {
                relu_backward(&cache.activations[i + 1], &upstream)?
            } else {
                upstream.clone()
            };
            let (dw, db, dx) = layer.backward(&cache.activations[i], &d_post)?;
            grads.push(db);
            grads.push(dw);
            upstream = dx;
        }
        grads.reverse();
        Ok((GradBundle { grads }, upstream))
    }

    /// In-place SGD step `p <- p - lr * g` over every parameter tensor.
    pub fn sgd_step(&mut self, grads: &GradBundle, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        sgd_step(&mut self.params_mut(), grads, lr)
    }
}

/// SGD update over an ordered list of parameter tensors.
///
/// Each parameter is updated in place; nothing else is touched.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &GradBundle, lr: f64) -> Result<()> {
    if params.len() != grads.grads.len() {
        return Err(Error::shape_mismatch("sgd_step", params.len(), grads.grads.len()));
    }
    for (p, g) in params.iter_mut().zip(&grads.grads) {
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}
