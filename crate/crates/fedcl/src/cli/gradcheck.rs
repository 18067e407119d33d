//! The `gradcheck` verification suite: every layer type, the composed split
//! network, the boundary regularizer, and the SCG contrastive loss, all
//! checked against central finite differences.
//!
//! Networks under check get a small constant bias offset so no pre-activation
//! sits exactly on the ReLU kink, where the loss is not differentiable and
//! central differences measure the two-sided average instead.

use rand::Rng;

use crate::channel::ChannelConfig;
use crate::error::Result;
use crate::models::{split_backward, ScgState};
use crate::numerics::{
    grad_check, max_rel_error, numeric_grads, softmax_cross_entropy, Mlp, Tensor,
};
use crate::protocol::{contrastive_loss, scg_grads, CentroidSet};
use crate::rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// One named check and its measured max relative error.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn offset_biases(net: &mut Mlp) {
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            for v in p.data_mut() {
                *v = 0.05;
            }
        }
    }
}

fn random_input<R: Rng>(dim: usize, r: &mut R) -> Tensor {
    Tensor::vector((0..dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
}

fn classifier_check(dims: &[usize], seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, &[0x6c]);
    let mut net = Mlp::from_dims(dims, &mut r)?;
    offset_biases(&mut net);
    let mut worst = 0.0f64;
    for label in 0..dims[dims.len() - 1] {
        let x = random_input(dims[0], &mut r);
        worst = worst.max(grad_check(&mut net, &x, label, 1e-5)?);
    }
    Ok(worst)
}

fn split_batch(
    enc: &Mlp,
    dec: &Mlp,
    xs: &[Tensor],
    labels: &[usize],
) -> Result<(Vec<crate::numerics::MlpCache>, Vec<crate::numerics::MlpCache>, Vec<Tensor>, Vec<Tensor>)>
{
    let mut enc_caches = Vec::new();
    let mut dec_caches = Vec::new();
    let mut features = Vec::new();
    let mut grads = Vec::new();
    for (x, &y) in xs.iter().zip(labels) {
        let (f, ec) = enc.forward(x)?;
        let (logits, dc) = dec.forward(&f)?;
        let (_, g) = softmax_cross_entropy(&logits, y)?;
        enc_caches.push(ec);
        dec_caches.push(dc);
        features.push(f);
        grads.push(g);
    }
    Ok((enc_caches, dec_caches, features, grads))
}

/// Split-network gradients (optionally with the centroid regularizer)
/// against finite differences of the composed batch loss.
fn split_check(lambda: f64, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, &[0x73]);
    let mut enc = Mlp::from_dims(&[5, 8, 6], &mut r)?;
    let mut dec = Mlp::from_dims(&[6, 7, 3], &mut r)?;
    offset_biases(&mut enc);
    offset_biases(&mut dec);
    let xs: Vec<Tensor> = (0..4).map(|_| random_input(5, &mut r)).collect();
    let labels = vec![0usize, 1, 2, 1];
    let anchors: Vec<Tensor> = (0..4).map(|_| random_input(6, &mut r)).collect();
    let noiseless = ChannelConfig::noiseless(0);
    let mut stream = rng::stream(0, &[rng::salt::DOWNLINK]);

    let (ec, dc, feats, grads) = split_batch(&enc, &dec, &xs, &labels)?;
    let split = split_backward(
        &enc,
        &dec,
        &ec,
        &dc,
        &grads,
        &feats,
        (lambda > 0.0).then_some(anchors.as_slice()),
        lambda,
        &noiseless,
        &mut stream,
    )?;

    let batch_loss = |enc: &Mlp, dec: &Mlp| -> Result<f64> {
        let mut total = 0.0;
        for (i, (x, &y)) in xs.iter().zip(&labels).enumerate() {
            let f = enc.output(x)?;
            let logits = dec.output(&f)?;
            total += softmax_cross_entropy(&logits, y)?.0;
            if lambda > 0.0 {
                total += lambda * f.sub(&anchors[i])?.sq_norm();
            }
        }
        Ok(total / xs.len() as f64)
    };

    let dec_fixed = dec.clone();
    let numeric_enc = numeric_grads(&mut enc, 1e-5, |e| batch_loss(e, &dec_fixed))?;
    let enc_fixed = enc.clone();
    let numeric_dec = numeric_grads(&mut dec, 1e-5, |d| batch_loss(&enc_fixed, d))?;

    Ok(max_rel_error(&split.encoder, &numeric_enc)
        .max(max_rel_error(&split.decoder, &numeric_dec)))
}

/// SCG parameter gradients of the contrastive loss against finite differences.
fn scg_check(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, &[0x5c]);
    let feature_dim = 5;
    let classes = 4;
    let mut scg = ScgState::init(classes, feature_dim, &mut r)?;
    offset_biases(&mut scg.net);
    // Two clients with partial class coverage.
    let local_sets = vec![
        CentroidSet::local(
            0,
            vec![
                Some(random_input(feature_dim, &mut r)),
                Some(random_input(feature_dim, &mut r)),
                None,
                Some(random_input(feature_dim, &mut r)),
            ],
        ),
        CentroidSet::local(
            1,
            vec![
                None,
                Some(random_input(feature_dim, &mut r)),
                Some(random_input(feature_dim, &mut r)),
                None,
            ],
        ),
    ];

    let analytic = scg_grads(&scg, &local_sets)?;
    let seeds: Vec<Tensor> = scg.seeds().to_vec();
    let numeric = numeric_grads(&mut scg.net, 1e-5, |net| {
        let centroids = seeds
            .iter()
            .map(|z| net.output(z))
            .collect::<Result<Vec<_>>>()?;
        contrastive_loss(&local_sets, &CentroidSet::global(centroids))
    })?;
    Ok(max_rel_error(&analytic, &numeric))
}

/// Runs the full verification suite. Layer types covered: affine, relu,
/// softmax cross-entropy, the L2 centroid regularizer, and the contrastive
/// log-sum-exp.
pub fn gradcheck_suite() -> Result<Vec<CheckLine>> {
    Ok(vec![
        CheckLine {
            name: "affine + softmax-ce [6 -> 4]",
            max_rel_error: classifier_check(&[6, 4], 101)?,
        },
        CheckLine {
            name: "affine/relu chain + softmax-ce [6 -> 8 -> 5 -> 4]",
            max_rel_error: classifier_check(&[6, 8, 5, 4], 102)?,
        },
        CheckLine {
            name: "deep encoder-width chain + softmax-ce [8 -> 16 -> 16 -> 6]",
            max_rel_error: classifier_check(&[8, 16, 16, 6], 103)?,
        },
        CheckLine {
            name: "composed split network, noiseless, lambda = 0",
            max_rel_error: split_check(0.0, 104)?,
        },
        CheckLine {
            name: "boundary regularizer, lambda = 0.5",
            max_rel_error: split_check(0.5, 105)?,
        },
        CheckLine { name: "scg contrastive loss", max_rel_error: scg_check(106)? },
    ])
}
