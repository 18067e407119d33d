//! Shared helpers for the integration and acceptance suites.
//!
//! `CentralizedTrainer` is an independent reference implementation of plain
//! minibatch SGD on the composed encoder+decoder network. It drives the
//! affine layers directly with its own hand-written backprop loop and its
//! own re-implementation of the pinned batch-sampling rule, so it shares no
//! code with the split-protocol path it is used to check.

use fedcl::cli::config::ExperimentConfig;
use fedcl::data::Dataset;
use fedcl::numerics::{relu, relu_backward, softmax_cross_entropy, AffineLayer, Mlp, Tensor};
use fedcl::rng::{self, salt};
use rand::seq::SliceRandom;

/// Reference model: the encoder and decoder layer stacks concatenated, with
/// ReLU after every hidden layer boundary exactly as the split network has
/// them (linear at the encoder output and at the logits).
pub struct CentralizedTrainer {
    layers: Vec<AffineLayer>,
    /// Whether a ReLU follows layer `i`.
    relu_after: Vec<bool>,
    /// Learning rate per layer (encoder layers take the client lr, decoder
    /// layers the server lr).
    lr: Vec<f64>,
}

impl CentralizedTrainer {
    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn from_split(encoder: &Mlp, decoder: &Mlp, client_lr: f64, server_lr: f64) -> Self {
        let mut layers = Vec::new();
        let mut relu_after = Vec::new();
        let mut lr = Vec::new();
        let enc_n = encoder.layers().len();
        for (i, layer) in encoder.layers().iter().enumerate() {
            layers.push(layer.clone());
            relu_after.push(i + 1 < enc_n); // linear encoder output
            lr.push(client_lr);
        }
        let dec_n = decoder.layers().len();
        for (i, layer) in decoder.layers().iter().enumerate() {
            layers.push(layer.clone());
            relu_after.push(i + 1 < dec_n); // linear logits
            lr.push(server_lr);
        }
        CentralizedTrainer { layers, relu_after, lr }
    }

    fn forward(&self, x: &Tensor) -> (Vec<Tensor>, Tensor) {
        let mut acts = vec![x.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(acts.last().unwrap()).unwrap();
            let a = if self.relu_after[i] { relu(&z) } else { z };
            acts.push(a);
        }
        let out = acts.last().unwrap().clone();
        (acts, out)
    }

    /// One SGD step on a minibatch; returns the pre-update mean loss.
    pub fn step(&mut self, batch: &[(Tensor, usize)]) -> f64 {
        let n = batch.len() as f64;
        let mut total_loss = 0.0;
        let mut grads: Vec<(Tensor, Tensor)> = self
            .layers
            .iter()
            .map(|l| (Tensor::zeros_like(l.weights()), Tensor::zeros_like(l.bias())))
            .collect();
        for (x, y) in batch {
            let (acts, logits) = self.forward(x);
            let (loss, d_logits) = softmax_cross_entropy(&logits, *y).unwrap();
            total_loss += loss;
            let mut upstream = d_logits;
            upstream.scale(1.0 / n);
            for i in (0..self.layers.len()).rev() {
                let d_post = if self.relu_after[i] {
                    relu_backward(&acts[i + 1], &upstream).unwrap()
                } else {
                    upstream.clone()
                };
                let (dw, db, dx) = self.layers[i].backward(&acts[i], &d_post).unwrap();
                grads[i].0.add_scaled(&dw, 1.0).unwrap();
                grads[i].1.add_scaled(&db, 1.0).unwrap();
                upstream = dx;
            }
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.sgd_step(&grads[i].0, &grads[i].1, self.lr[i]).unwrap();
        }
        total_loss / n
    }
}

/// The pinned batch-sampling rule, re-implemented from its documentation:
/// full Fisher-Yates shuffle of `0..len`, truncated to the batch size.
pub fn reference_batch(
    len: usize,
    batch: usize,
    seed: u64,
    client: usize,
    round: usize,
) -> Vec<usize> {
    let mut stream = rng::stream(seed, &[salt::BATCH, client as u64, round as u64]);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream);
    order.truncate(batch.min(len));
    order
}

/// The shard the partitioner hands client 0 under a given config, in the
/// exact order the protocol stores it.
pub fn client_shard(cfg: &ExperimentConfig, dataset: &Dataset) -> Vec<(Tensor, usize)> {
    let shards = fedcl::data::partition_mwayqshot(
        dataset,
        &fedcl::data::PartitionSpec { clients: cfg.clients, m: cfg.m, q: cfg.q, seed: cfg.seed },
    )
    .unwrap();
    shards[0].iter().map(|&i| dataset.samples[i].clone()).collect()
}

/// Applies `key=value` pairs onto a default config.
pub fn config_from_pairs(pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in pairs {
        cfg.set(k, v).unwrap_or_else(|e| panic!("bad test config {k}={v}: {e}"));
    }
    cfg
}
