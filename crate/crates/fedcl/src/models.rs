//! The three networks of the system: personalized per-client encoders, the
//! server-side decoder instances, and the semantic centroid generator (SCG).
//!
//! Encoders map raw inputs to a shared feature dimension; clients may differ
//! in depth and width (only the feature dimension is a contract). Decoder
//! instances share one architecture so they can be weight-averaged. The SCG
//! is two affine layers with a ReLU in the middle; it maps `C` frozen random
//! seed vectors to the trainable global centroids.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{transmit_tensor, ChannelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AffineLayer, GradBundle, Mlp, MlpCache, Tensor};
use crate::rng;

/// Architecture of one client's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    /// Hidden widths; may differ per client.
    pub hidden_dims: Vec<usize>,
    /// Output width; identical for all clients (decoder input contract).
    pub feature_dim: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl EncoderSpec {
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    pub fn build(&self) -> Result<Mlp> {
        let mut stream = rng::stream(self.seed, &[rng::salt::ENCODER_INIT]);
        Mlp::from_dims(&self.dims(), &mut stream)
    }
}

/// Architecture of the shared decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSpec {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl DecoderSpec {
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.feature_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mlp> {
        Mlp::from_dims(&self.dims(), rng)
    }
}

/// Semantic centroid generator: frozen per-class seed vectors plus a
/// trainable two-layer network that maps them to the global centroids.
///
/// Only the network trains; the seeds never change after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScgState {
    seeds: Vec<Tensor>,
    pub net: Mlp,
}

impl ScgState {
    /// Seeds `z_c ~ N(0, I)` and a `feature_dim -> 2*feature_dim ->
    /// feature_dim` network initialized as a split-sign identity
    /// (`W1 = [I; -I]`, `W2 = [I, -I]`, zero biases), so the initial global
    /// centroids are exactly the random seed vectors and every direction
    /// stays trainable through the ReLU.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "SCG needs at least one class and a positive feature dim".into(),
            ));
        }
        let normal = StandardNormal;
        let seeds = (0..num_classes)
            .map(|_| {
                Tensor::vector(
                    (0..feature_dim)
                        .map(|_| Distribution::<f64>::sample(&normal, rng))
                        .collect(),
                )
            })
            .collect();
        let d = feature_dim;
        let mut w1 = Tensor::zeros(vec![2 * d, d]);
        let mut w2 = Tensor::zeros(vec![d, 2 * d]);
        for i in 0..d {
            w1.data_mut()[i * d + i] = 1.0;
            w1.data_mut()[(d + i) * d + i] = -1.0;
            w2.data_mut()[i * 2 * d + i] = 1.0;
            w2.data_mut()[i * 2 * d + d + i] = -1.0;
        }
        let net = Mlp::from_layers(vec![
            AffineLayer::from_parts(w1, Tensor::zeros(vec![2 * d]))?,
            AffineLayer::from_parts(w2, Tensor::zeros(vec![d]))?,
        ])?;
        Ok(ScgState { seeds, net })
    }

    pub fn from_parts(seeds: Vec<Tensor>, net: Mlp) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("SCG needs at least one seed".into()));
        }
        for z in &seeds {
            if z.len() != net.input_dim() {
                return Err(Error::shape_mismatch("ScgState seeds", [net.input_dim()], z.shape()));
            }
        }
        Ok(ScgState { seeds, net })
    }

    pub fn num_classes(&self) -> usize {
        self.seeds.len()
    }

    pub fn seeds(&self) -> &[Tensor] {
        &self.seeds
    }

    /// The global centroids `F̄^c = net(z_c)`, one per class.
    pub fn centroids(&self) -> Result<Vec<Tensor>> {
        self.seeds.iter().map(|z| self.net.output(z)).collect()
    }

    /// Forward pass for one class keeping the cache, for SCG training.
    pub fn forward_class(&self, class: usize) -> Result<(Tensor, MlpCache)> {
        let z = self.seeds.get(class).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "class {class} out of range for {} seeds",
                self.seeds.len()
            ))
        })?;
        self.net.forward(z)
    }
}

/// Everything the split backward pass produces for one batch: the decoder's
/// parameter gradients, the per-sample boundary gradients before and after
/// downlink corruption, and the encoder's parameter gradients.
#[derive(Debug, Clone)]
pub struct SplitGrads {
    pub decoder: GradBundle,
    pub boundary: Vec<Tensor>,
    pub noised_boundary: Vec<Tensor>,
    pub encoder: GradBundle,
}

/// Backpropagates a batch through the split encoder/channel/decoder graph.
///
/// Computes batch-mean gradients of
/// `L = (1/N) Σ_i [ L_T,i + λ‖f̂_i − anchor_i‖² ]`
/// given the raw per-sample task-loss gradients at the logits. The boundary
/// gradient at each received feature (including the regularizer term
/// `2λ(f̂ − anchor)`) is corrupted by the downlink channel before the encoder
/// consumes it; the uplink channel itself is treated as identity in the
/// graph, exact when `h = 1`.
#[allow(clippy::too_many_arguments)]
pub fn split_backward<R: Rng + ?Sized>(
    encoder: &Mlp,
    decoder: &Mlp,
    enc_caches: &[MlpCache],
    dec_caches: &[MlpCache],
    logit_grads: &[Tensor],
    features: &[Tensor],
    anchors: Option<&[Tensor]>,
    lambda: f64,
    downlink: &ChannelConfig,
    rng: &mut R,
) -> Result<SplitGrads> {
    let n = logit_grads.len();
    if n == 0 {
        return Err(Error::State("split_backward on an empty batch".into()));
    }
    if enc_caches.len() != n || dec_caches.len() != n || features.len() != n {
        return Err(Error::State(format!(
            "forward caches missing: {} logit grads vs {} encoder / {} decoder caches / {} features",
            n,
            enc_caches.len(),
            dec_caches.len(),
            features.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if let Some(anchors) = anchors {
        if anchors.len() != n {
            return Err(Error::State(format!(
                "{} anchors for {} samples",
                anchors.len(),
                n
            )));
        }
    }

    let scale = 1.0 / n as f64;
    let mut decoder_grads = GradBundle::zeros_like(decoder);
    let mut encoder_grads = GradBundle::zeros_like(encoder);
    let mut boundary = Vec::with_capacity(n);
    let mut noised_boundary = Vec::with_capacity(n);

    for i in 0..n {
        let mut d_logits = logit_grads[i].clone();
        d_logits.scale(scale);
        let (dec_bundle, mut d_feature) = decoder.backward(&dec_caches[i], &d_logits)?;
        decoder_grads.add_scaled(&dec_bundle, 1.0)?;

        if lambda > 0.0 {
            let anchors = anchors.ok_or_else(|| {
                Error::State("lambda > 0 requires per-sample centroid anchors".into())
            })?;
            let diff = features[i].sub(&anchors[i])?;
            d_feature.add_scaled(&diff, 2.0 * lambda * scale)?;
        }

        let noised = transmit_tensor(&d_feature, downlink, rng)?;
        let (enc_bundle, _) = encoder.backward(&enc_caches[i], &noised)?;
        encoder_grads.add_scaled(&enc_bundle, 1.0)?;

        boundary.push(d_feature);
        noised_boundary.push(noised);
    }

    Ok(SplitGrads { decoder: decoder_grads, boundary, noised_boundary, encoder: encoder_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{max_rel_error, softmax_cross_entropy};

    fn spec(seed: u64) -> (EncoderSpec, DecoderSpec) {
        (
            EncoderSpec { input_dim: 3, hidden_dims: vec![5], feature_dim: 4, seed },
            DecoderSpec { feature_dim: 4, hidden_dims: vec![6], num_classes: 2 },
        )
    }

    #[test]
    fn encoder_build_is_deterministic() {
        let (enc_spec, _) = spec(5);
        let a = enc_spec.build().unwrap();
        let b = enc_spec.build().unwrap();
        assert_eq!(a, b);
        let x = Tensor::vector(vec![0.1, -0.7, 0.4]);
        assert_eq!(a.output(&x).unwrap(), b.output(&x).unwrap());
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let net = Mlp::identity(4);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(net.output(&x).unwrap(), x);
    }

    #[test]
    fn hand_built_one_layer_encoder() {
        let w = Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, -1.0]).unwrap();
        let b = Tensor::vector(vec![0.5, 0.0]);
        let enc = Mlp::from_layers(vec![AffineLayer::from_parts(w, b).unwrap()]).unwrap();
        let f = enc.output(&Tensor::vector(vec![3.0, 1.0])).unwrap();
        assert_eq!(f.data(), &[6.5, 2.0]);
    }

    #[test]
    fn identity_decoder_passes_features() {
        let dec = Mlp::identity(3);
        let f = Tensor::vector(vec![0.2, -0.4, 0.9]);
        assert_eq!(dec.output(&f).unwrap(), f);
    }

    #[test]
    fn scg_identity_network_reproduces_seeds() {
        let eye = |d: usize| {
            let mut w = Tensor::zeros(vec![d, d]);
            for i in 0..d {
                w.data_mut()[i * d + i] = 1.0;
            }
            AffineLayer::from_parts(w, Tensor::zeros(vec![d])).unwrap()
        };
        let net = Mlp::from_layers(vec![eye(2), eye(2)]).unwrap();
        // Positive seeds pass the mid ReLU untouched.
        let seeds = vec![Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![0.5, 3.0])];
        let scg = ScgState::from_parts(seeds.clone(), net).unwrap();
        assert_eq!(scg.centroids().unwrap(), seeds);
    }

    #[test]
    fn scg_hand_computed_two_class_case() {
        // layer1 = [[1,0],[0,1]], b=[0,-1]; layer2 = [[1,1],[2,0]], b=[0.5,0]
        let l1 = AffineLayer::from_parts(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::vector(vec![0.0, -1.0]),
        )
        .unwrap();
        let l2 = AffineLayer::from_parts(
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap(),
            Tensor::vector(vec![0.5, 0.0]),
        )
        .unwrap();
        let net = Mlp::from_layers(vec![l1, l2]).unwrap();
        let seeds = vec![Tensor::vector(vec![2.0, 3.0]), Tensor::vector(vec![-1.0, 0.5])];
        let scg = ScgState::from_parts(seeds, net).unwrap();
        let cents = scg.centroids().unwrap();
        // z=[2,3]: relu([2,2])=[2,2] -> [2+2+0.5, 4] = [4.5, 4]
        assert_eq!(cents[0].data(), &[4.5, 4.0]);
        // z=[-1,0.5]: relu([-1,-0.5])=[0,0] -> [0.5, 0]
        assert_eq!(cents[1].data(), &[0.5, 0.0]);
    }

    #[test]
    fn scg_determinism_and_frozen_seeds() {
        let mut r1 = rng::stream(8, &[rng::salt::SCG_INIT]);
        let mut r2 = rng::stream(8, &[rng::salt::SCG_INIT]);
        let a = ScgState::init(3, 4, &mut r1).unwrap();
        let b = ScgState::init(3, 4, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.centroids().unwrap(), b.centroids().unwrap());
    }

    /// Runs a forward pass of the split network and returns everything the
    /// backward pass needs.
    fn forward_batch(
        enc: &Mlp,
        dec: &Mlp,
        xs: &[Tensor],
        labels: &[usize],
    ) -> (Vec<MlpCache>, Vec<MlpCache>, Vec<Tensor>, Vec<Tensor>) {
        let mut enc_caches = Vec::new();
        let mut dec_caches = Vec::new();
        let mut features = Vec::new();
        let mut grads = Vec::new();
        for (x, &y) in xs.iter().zip(labels) {
            let (f, ec) = enc.forward(x).unwrap();
            let (logits, dc) = dec.forward(&f).unwrap();
            let (_, g) = softmax_cross_entropy(&logits, y).unwrap();
            enc_caches.push(ec);
            dec_caches.push(dc);
            features.push(f);
            grads.push(g);
        }
        (enc_caches, dec_caches, features, grads)
    }

    #[test]
    fn noiseless_split_matches_composed_finite_differences() {
        let (enc_spec, dec_spec) = spec(31);
        let mut enc = enc_spec.build().unwrap();
        let mut dec = dec_spec
            .build(&mut rng::stream(31, &[rng::salt::DECODER_INIT]))
            .unwrap();
        let xs = vec![
            Tensor::vector(vec![0.3, -0.2, 0.8]),
            Tensor::vector(vec![-0.5, 0.1, 0.4]),
        ];
        let labels = vec![0usize, 1];
        let cfg = ChannelConfig::noiseless(0);
        let mut stream = rng::stream(0, &[rng::salt::DOWNLINK]);

        let (ec, dc, feats, grads) = forward_batch(&enc, &dec, &xs, &labels);
        let split = split_backward(
            &enc, &dec, &ec, &dc, &grads, &feats, None, 0.0, &cfg, &mut stream,
        )
        .unwrap();

        // Composed-network loss for finite differencing: mean CE of dec(enc(x)).
        let batch_loss = |enc: &Mlp, dec: &Mlp| -> f64 {
            xs.iter()
                .zip(&labels)
                .map(|(x, &y)| {
                    let f = enc.output(x).unwrap();
                    let logits = dec.output(&f).unwrap();
                    softmax_cross_entropy(&logits, y).unwrap().0
                })
                .sum::<f64>()
                / xs.len() as f64
        };

        let dec_snapshot = dec.clone();
        let numeric_enc = crate::numerics::numeric_grads(&mut enc, 1e-5, |e| {
            Ok(batch_loss(e, &dec_snapshot))
        })
        .unwrap();
        let enc_snapshot = enc.clone();
        let numeric_dec = crate::numerics::numeric_grads(&mut dec, 1e-5, |d| {
            Ok(batch_loss(&enc_snapshot, d))
        })
        .unwrap();

        let err_enc = max_rel_error(&split.encoder, &numeric_enc);
        let err_dec = max_rel_error(&split.decoder, &numeric_dec);
        assert!(err_enc < 1e-4, "encoder grads vs composed FD: {err_enc}");
        assert!(err_dec < 1e-4, "decoder grads vs composed FD: {err_dec}");
    }

    #[test]
    fn regularizer_vanishes_at_anchor() {
        let (enc_spec, dec_spec) = spec(32);
        let enc = enc_spec.build().unwrap();
        let dec = dec_spec
            .build(&mut rng::stream(32, &[rng::salt::DECODER_INIT]))
            .unwrap();
        let xs = vec![Tensor::vector(vec![0.2, 0.2, -0.1])];
        let labels = vec![1usize];
        let cfg = ChannelConfig::noiseless(0);
        let (ec, dc, feats, grads) = forward_batch(&enc, &dec, &xs, &labels);

        // Anchor equals the feature itself: regularizer gradient is zero, so
        // boundary grads match the lambda = 0 case exactly.
        let anchors = feats.clone();
        let mut s1 = rng::stream(0, &[rng::salt::DOWNLINK]);
        let with_reg = split_backward(
            &enc, &dec, &ec, &dc, &grads, &feats, Some(&anchors), 0.5, &cfg, &mut s1,
        )
        .unwrap();
        let mut s2 = rng::stream(0, &[rng::salt::DOWNLINK]);
        let without = split_backward(
            &enc, &dec, &ec, &dc, &grads, &feats, None, 0.0, &cfg, &mut s2,
        )
        .unwrap();
        assert_eq!(with_reg.boundary, without.boundary);
        assert_eq!(with_reg.encoder, without.encoder);
    }

    #[test]
    fn noiseless_downlink_passes_boundary_exactly() {
        let (enc_spec, dec_spec) = spec(33);
        let enc = enc_spec.build().unwrap();
        let dec = dec_spec
            .build(&mut rng::stream(33, &[rng::salt::DECODER_INIT]))
            .unwrap();
        let xs = vec![Tensor::vector(vec![0.4, -0.9, 0.2])];
        let labels = vec![0usize];
        let cfg = ChannelConfig::noiseless(0);
        let (ec, dc, feats, grads) = forward_batch(&enc, &dec, &xs, &labels);
        let mut s = rng::stream(0, &[rng::salt::DOWNLINK]);
        let out =
            split_backward(&enc, &dec, &ec, &dc, &grads, &feats, None, 0.0, &cfg, &mut s).unwrap();
        assert_eq!(out.boundary, out.noised_boundary);
    }

    #[test]
    fn missing_cache_is_a_state_error() {
        let (enc_spec, dec_spec) = spec(34);
        let enc = enc_spec.build().unwrap();
        let dec = dec_spec
            .build(&mut rng::stream(34, &[rng::salt::DECODER_INIT]))
            .unwrap();
        let cfg = ChannelConfig::noiseless(0);
        let mut s = rng::stream(0, &[rng::salt::DOWNLINK]);
        let grads = vec![Tensor::vector(vec![0.1, -0.1])];
        let err = split_backward(&enc, &dec, &[], &[], &grads, &[], None, 0.0, &cfg, &mut s)
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
