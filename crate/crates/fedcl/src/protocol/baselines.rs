//! Baseline schemes: FedProto-style centroid averaging and classic FedAvg.

use crate::channel::transmit_tensor;
use crate::data::sample_batch_indices;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, ClientRoundMetrics, RoundMetrics};
use crate::models::split_backward;
use crate::numerics::{softmax_cross_entropy, Mlp, Tensor};
use crate::rng::{self, salt};

use super::{
    assemble_metrics, parallel_map, CentroidSet, ClientState, RoundContext, ServerState,
};

/// Global centroids by plain averaging of the local ones: for each class,
/// the mean over the clients that possess it.
///
/// Errors when some class is owned by no client.
pub fn baseline_fedproto_centroids(
    local_sets: &[CentroidSet],
    num_classes: usize,
) -> Result<CentroidSet> {
    let mut vectors = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut acc: Option<(Tensor, usize)> = None;
        for set in local_sets {
            if let Some(v) = set.get(class) {
                match &mut acc {
                    Some((sum, count)) => {
                        sum.add_scaled(v, 1.0)?;
                        *count += 1;
                    }
                    slot @ None => *slot = Some((v.clone(), 1)),
                }
            }
        }
        let (mut sum, count) = acc.ok_or_else(|| {
            Error::InvalidArgument(format!("class {class} is owned by no client"))
        })?;
        sum.scale(1.0 / count as f64);
        vectors.push(sum);
    }
    Ok(CentroidSet::global(vectors))
}

/// Round-level FedProto update: classes seen this round get the averaged
/// centroid, classes absent from every client's batch keep their previous
/// global centroid.
pub(super) fn merge_fedproto_centroids(
    local_sets: &[CentroidSet],
    previous: &CentroidSet,
) -> Result<CentroidSet> {
    let num_classes = previous.num_classes();
    let mut vectors = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut acc: Option<(Tensor, usize)> = None;
        for set in local_sets {
            if let Some(v) = set.get(class) {
                match &mut acc {
                    Some((sum, count)) => {
                        sum.add_scaled(v, 1.0)?;
                        *count += 1;
                    }
                    slot @ None => *slot = Some((v.clone(), 1)),
                }
            }
        }
        match acc {
            Some((mut sum, count)) => {
                sum.scale(1.0 / count as f64);
                vectors.push(sum);
            }
            None => vectors.push(previous.require(class)?.clone()),
        }
    }
    Ok(CentroidSet::global(vectors))
}

struct FedavgClientOutput {
    encoder: Mlp,
    decoder: Mlp,
    features: Vec<(Tensor, usize)>,
    loss: f64,
    accuracy: f64,
    grad_norm: f64,
}

fn fedavg_client_phase(
    client: &ClientState,
    decoder: &Mlp,
    server_lr: f64,
    epochs: usize,
    ctx: &RoundContext,
) -> Result<FedavgClientOutput> {
    let k = client.id;
    let mut encoder = client.encoder.clone();
    let mut decoder = decoder.clone();
    let mut batch_stream = rng::stream(ctx.seed, &[salt::BATCH, k as u64, ctx.round as u64]);
    let mut up_stream =
        rng::stream(ctx.uplink.noise_seed, &[salt::UPLINK, k as u64, ctx.round as u64]);
    // Gradients never leave the client in FedAvg, so the boundary gradient
    // passes uncorrupted.
    let local_link = crate::channel::ChannelConfig::noiseless(ctx.downlink.noise_seed);
    let mut down_stream =
        rng::stream(ctx.downlink.noise_seed, &[salt::DOWNLINK, k as u64, ctx.round as u64]);

    let mut features_out: Vec<(Tensor, usize)> = Vec::new();
    let mut losses = Vec::new();
    let mut accs = Vec::new();
    let mut grad_norms = Vec::new();

    for _ in 0..epochs {
        // One epoch: the full shard in shuffled minibatches.
        let order = sample_batch_indices(client.shard.len(), client.shard.len(), &mut batch_stream);
        for chunk in order.chunks(ctx.batch_size.max(1)) {
            let mut enc_caches = Vec::with_capacity(chunk.len());
            let mut dec_caches = Vec::with_capacity(chunk.len());
            let mut features = Vec::with_capacity(chunk.len());
            let mut logits = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y) = &client.shard[i];
                let (f, enc_cache) = encoder.forward(x)?;
                let received = transmit_tensor(&f, &ctx.uplink, &mut up_stream)?;
                let (out, dec_cache) = decoder.forward(&received)?;
                enc_caches.push(enc_cache);
                dec_caches.push(dec_cache);
                features.push(received);
                logits.push(out);
                labels.push(*y);
            }
            let mut loss = 0.0;
            let mut logit_grads = Vec::with_capacity(chunk.len());
            for (l, &y) in logits.iter().zip(&labels) {
                let (task, grad) = softmax_cross_entropy(l, y)?;
                loss += task;
                logit_grads.push(grad);
            }
            loss /= chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fedavg client {k} round {}: loss diverged to {loss}",
                    ctx.round
                )));
            }
            let split = split_backward(
                &encoder,
                &decoder,
                &enc_caches,
                &dec_caches,
                &logit_grads,
                &features,
                None,
                0.0,
                &local_link,
                &mut down_stream,
            )?;
            let grad_norm = (split.decoder.sq_norm() + split.encoder.sq_norm()).sqrt();
            decoder.sgd_step(&split.decoder, server_lr)?;
            encoder.sgd_step(&split.encoder, client.lr)?;

            losses.push(loss);
            accs.push(accuracy(&logits, &labels)?);
            grad_norms.push(grad_norm);
            features_out.extend(features.into_iter().zip(labels));
        }
    }

    let n = losses.len() as f64;
    Ok(FedavgClientOutput {
        encoder,
        decoder,
        features: features_out,
        loss: losses.iter().sum::<f64>() / n,
        accuracy: accs.iter().sum::<f64>() / n,
        grad_norm: grad_norms.iter().sum::<f64>() / n,
    })
}

/// Classic FedAvg round: each client trains encoder + decoder locally for
/// `E` epochs on its shard (the channel still corrupts features so the task
/// stays comparable), then every parameter is weight-averaged by shard size.
pub fn baseline_fedavg_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    ctx: &RoundContext,
) -> Result<RoundMetrics> {
    let first_dims: Vec<(usize, usize)> = clients[0]
        .encoder
        .layers()
        .iter()
        .map(|l| (l.in_dim(), l.out_dim()))
        .collect();
    for c in clients.iter() {
        let dims: Vec<(usize, usize)> =
            c.encoder.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        if dims != first_dims {
            return Err(Error::Config(
                "fedavg requires homogeneous encoder architectures across clients".into(),
            ));
        }
    }

    let outputs: Vec<Result<FedavgClientOutput>> = {
        let server_ref = &*server;
        parallel_map(clients.len(), ctx.threads, |k| {
            fedavg_client_phase(
                &clients[k],
                &server_ref.decoders[k],
                server_ref.lr,
                server_ref.local_iters,
                ctx,
            )
        })
    };

    let mut per_client = Vec::with_capacity(clients.len());
    let mut round_features: Vec<(Tensor, usize)> = Vec::new();
    let mut encoders = Vec::with_capacity(clients.len());
    let mut decoders = Vec::with_capacity(clients.len());
    for (k, out) in outputs.into_iter().enumerate() {
        let out = out?;
        encoders.push(out.encoder);
        decoders.push(out.decoder);
        per_client.push(ClientRoundMetrics {
            client: k,
            loss: out.loss,
            accuracy: out.accuracy,
            grad_norm: out.grad_norm,
        });
        round_features.extend(out.features);
    }

    // Weight-average encoders and decoders alike.
    let shard_sizes: Vec<usize> = clients.iter().map(|c| c.shard.len()).collect();
    let agg_encoder = average_models(&encoders, &shard_sizes)?;
    let agg_decoder = average_models(&decoders, &shard_sizes)?;
    for client in clients.iter_mut() {
        client.encoder = agg_encoder.clone();
    }
    for dec in &mut server.decoders {
        *dec = agg_decoder.clone();
    }
    server.global_decoder = agg_decoder;

    Ok(assemble_metrics(ctx.round, per_client, f64::NAN, &round_features))
}

fn average_models(models: &[Mlp], weights: &[usize]) -> Result<Mlp> {
    super::decoder_aggregate(models, weights)
}
