//! The round state machine: client forward/uplink/decode/backward, centroid
//! aggregation, contrastive SCG training, decoder aggregation, and the
//! training driver.
//!
//! Each communication round runs every client's split-learning step (feature
//! uplink, decoder update, corrupted boundary-gradient downlink, encoder
//! update), aggregates per-class local centroids from the noised features,
//! trains the centroid generator against them, and weight-averages the
//! per-client decoder instances into the global decoder. The client phase is
//! embarrassingly parallel with keyed random streams, so results are
//! independent of execution schedule; the server phase is a sequential
//! barrier.

mod baselines;

pub use baselines::{baseline_fedavg_round, baseline_fedproto_centroids};

use std::collections::BTreeSet;

use crate::channel::{transmit_tensor, ChannelConfig};
use crate::cli::config::{DatasetSource, ExperimentConfig};
use crate::data::{gen_blobs, load_csv, partition_mwayqshot, sample_batch_indices, PartitionSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, separability, ClientRoundMetrics, FeatureRecord, RoundMetrics,
};
use crate::models::{split_backward, DecoderSpec, EncoderSpec, ScgState};
use crate::numerics::{softmax_cross_entropy, GradBundle, Mlp, Tensor};
use crate::rng::{self, salt};

/// Training scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Full protocol: SCG-generated centroids regularize the clients.
    Fedcl,
    /// Global centroids are plain averages of the local ones.
    Fedproto,
    /// `Fedcl` with the regularizer weight forced to zero.
    Vanilla,
    /// Whole-model local training with weight averaging.
    Fedavg,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Fedcl => "fedcl",
            Scheme::Fedproto => "fedproto",
            Scheme::Vanilla => "vanilla",
            Scheme::Fedavg => "fedavg",
        }
    }
}

/// Where a centroid set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidProvenance {
    Local { client: usize },
    Global,
}

/// Per-class centroid vectors. Local sets may omit classes absent from the
/// client's batch; the global set always holds exactly one vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    vectors: Vec<Option<Tensor>>,
    provenance: CentroidProvenance,
}

impl CentroidSet {
    pub fn global(vectors: Vec<Tensor>) -> Self {
        CentroidSet {
            vectors: vectors.into_iter().map(Some).collect(),
            provenance: CentroidProvenance::Global,
        }
    }

    pub fn local(client: usize, vectors: Vec<Option<Tensor>>) -> Self {
        CentroidSet { vectors, provenance: CentroidProvenance::Local { client } }
    }

    pub fn provenance(&self) -> CentroidProvenance {
        self.provenance
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, class: usize) -> Option<&Tensor> {
        self.vectors.get(class).and_then(Option::as_ref)
    }

    /// Classes that actually carry a centroid.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.vectors
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.as_ref().map(|_| c))
    }

    pub fn is_complete(&self) -> bool {
        self.vectors.iter().all(Option::is_some)
    }

    pub fn require(&self, class: usize) -> Result<&Tensor> {
        self.get(class).ok_or_else(|| {
            Error::State(format!("no centroid for class {class} in {:?}", self.provenance))
        })
    }
}

/// One client: its shard, personalized encoder, and local learning rate.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<(Tensor, usize)>,
    pub encoder: Mlp,
    pub lr: f64,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<(Tensor, usize)>, encoder: Mlp, lr: f64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::InvalidArgument(format!("client {id} has an empty shard")));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "client {id} learning rate must be positive, got {lr}"
            )));
        }
        Ok(ClientState { id, shard, encoder, lr })
    }
}

/// Server-side state: per-client decoder instances, the aggregated global
/// decoder, the SCG, and the current global centroids.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub decoders: Vec<Mlp>,
    pub global_decoder: Mlp,
    pub scg: ScgState,
    pub centroids: CentroidSet,
    /// Server learning rate for decoder updates.
    pub lr: f64,
    /// SCG learning rate. The contrastive objective is linear in the
    /// centroids (no normalization), so its minimizer runs to infinity;
    /// a conservative rate keeps the drift slow over a bounded run.
    pub scg_lr: f64,
    /// Regularization weight of the centroid term.
    pub lambda: f64,
    /// Local decoder/encoder iterations per round (E).
    pub local_iters: usize,
    /// SCG iterations per round (E').
    pub scg_iters: usize,
}

impl ServerState {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        num_clients: usize,
        decoder_spec: &DecoderSpec,
        seed: u64,
        lr: f64,
        scg_lr: f64,
        lambda: f64,
        local_iters: usize,
        scg_iters: usize,
    ) -> Result<Self> {
        let decoder = decoder_spec.build(&mut rng::stream(seed, &[salt::DECODER_INIT]))?;
        let scg = ScgState::init(
            decoder_spec.num_classes,
            decoder_spec.feature_dim,
            &mut rng::stream(seed, &[salt::SCG_INIT]),
        )?;
        let centroids = CentroidSet::global(scg.centroids()?);
        Ok(ServerState {
            decoders: vec![decoder.clone(); num_clients],
            global_decoder: decoder,
            scg,
            centroids,
            lr,
            scg_lr,
            lambda,
            local_iters,
            scg_iters,
        })
    }
}

/// Everything a round needs besides the mutable states.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub round: usize,
    /// Master experiment seed; batch streams derive from it.
    pub seed: u64,
    pub uplink: ChannelConfig,
    pub downlink: ChannelConfig,
    pub batch_size: usize,
    pub scheme: Scheme,
    /// Worker threads for the client phase; results are identical for any
    /// value.
    pub threads: usize,
}

/// Per-class mean of one client's noised features.
///
/// Classes absent from the batch are omitted from the set.
pub fn local_centroid_aggregate(
    client: usize,
    features: &[Tensor],
    labels: &[usize],
    num_classes: usize,
) -> Result<CentroidSet> {
    if features.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate centroids over an empty batch".into(),
        ));
    }
    if features.len() != labels.len() {
        return Err(Error::shape_mismatch(
            "local_centroid_aggregate",
            features.len(),
            labels.len(),
        ));
    }
    let mut sums: Vec<Option<(Tensor, usize)>> = (0..num_classes).map(|_| None).collect();
    for (f, &y) in features.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        match &mut sums[y] {
            Some((sum, count)) => {
                sum.add_scaled(f, 1.0)?;
                *count += 1;
            }
            slot @ None => *slot = Some((f.clone(), 1)),
        }
    }
    let vectors = sums
        .into_iter()
        .map(|entry| {
            entry.map(|(mut sum, count)| {
                sum.scale(1.0 / count as f64);
                sum
            })
        })
        .collect();
    Ok(CentroidSet::local(client, vectors))
}

/// Contrastive loss of all clients' local centroids against the global set:
/// for every local centroid, a log-sum-exp over the other classes' global
/// centroids (negatives) minus the dot with its own class (positive).
pub fn contrastive_loss(local_sets: &[CentroidSet], global: &CentroidSet) -> Result<f64> {
    let c = global.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs >= 2 classes (no negatives exist)".into(),
        ));
    }
    if !global.is_complete() {
        return Err(Error::State("global centroid set is incomplete".into()));
    }
    let mut total = 0.0;
    for set in local_sets {
        for class in set.classes() {
            let local = set.require(class)?;
            let mut dots = Vec::with_capacity(c - 1);
            for n in 0..c {
                if n != class {
                    dots.push(local.dot(global.require(n)?)?);
                }
            }
            let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + dots.iter().map(|d| (d - max).exp()).sum::<f64>().ln();
            total += lse - local.dot(global.require(class)?)?;
        }
    }
    Ok(total)
}

/// Gradient of [`contrastive_loss`] with respect to each global centroid.
///
/// Local centroids are constants; the SCG consumes these per-class gradients.
pub fn contrastive_centroid_grads(
    local_sets: &[CentroidSet],
    global: &CentroidSet,
) -> Result<Vec<Tensor>> {
    let c = global.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs >= 2 classes (no negatives exist)".into(),
        ));
    }
    let dim = global.require(0)?.len();
    let mut grads = vec![Tensor::zeros(vec![dim]); c];
    for set in local_sets {
        for class in set.classes() {
            let local = set.require(class)?;
            // Softmax weights of the negatives' dot products.
            let mut dots = Vec::with_capacity(c);
            for n in 0..c {
                dots.push(if n == class {
                    f64::NEG_INFINITY
                } else {
                    local.dot(global.require(n)?)?
                });
            }
            let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = dots.iter().map(|&d| (d - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for n in 0..c {
                if n == class {
                    grads[n].add_scaled(local, -1.0)?;
                } else {
                    grads[n].add_scaled(local, exps[n] / sum)?;
                }
            }
        }
    }
    Ok(grads)
}

/// Gradient of the contrastive loss with respect to the SCG's parameters:
/// the per-class centroid gradients backpropagated through the generator.
pub fn scg_grads(scg: &ScgState, local_sets: &[CentroidSet]) -> Result<GradBundle> {
    let global = CentroidSet::global(scg.centroids()?);
    let centroid_grads = contrastive_centroid_grads(local_sets, &global)?;
    let mut bundle = GradBundle::zeros_like(&scg.net);
    for (class, upstream) in centroid_grads.iter().enumerate() {
        let (_, cache) = scg.forward_class(class)?;
        let (grads, _) = scg.net.backward(&cache, upstream)?;
        bundle.add_scaled(&grads, 1.0)?;
    }
    Ok(bundle)
}

/// Runs `E'` SGD steps on the SCG network against the round's local
/// centroids and refreshes the global centroid set.
///
/// Returns the contrastive loss observed at entry (before any update).
pub fn scg_update(
    scg: &mut ScgState,
    local_sets: &[CentroidSet],
    lr: f64,
    iters: usize,
) -> Result<(f64, CentroidSet)> {
    if local_sets.iter().all(|s| s.classes().next().is_none()) {
        return Err(Error::State("scg_update without any local centroid".into()));
    }
    let entry_loss = contrastive_loss(local_sets, &CentroidSet::global(scg.centroids()?))?;
    for _ in 0..iters {
        let bundle = scg_grads(scg, local_sets)?;
        scg.net.sgd_step(&bundle, lr)?;
    }
    Ok((entry_loss, CentroidSet::global(scg.centroids()?)))
}

/// The regularized client loss: mean task loss plus `λ` times the squared
/// distance of each noised feature to its class's global centroid.
pub fn regularized_loss(
    logits: &[Tensor],
    labels: &[usize],
    features: &[Tensor],
    centroids: &CentroidSet,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if logits.len() != labels.len() || logits.len() != features.len() {
        return Err(Error::shape_mismatch(
            "regularized_loss",
            logits.len(),
            (labels.len(), features.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("regularized_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    for ((l, &y), f) in logits.iter().zip(labels).zip(features) {
        let (task, _) = softmax_cross_entropy(l, y)?;
        total += task;
        if lambda > 0.0 {
            total += lambda * f.sub(centroids.require(y)?)?.sq_norm();
        }
    }
    Ok(total / logits.len() as f64)
}

/// Weight-averages decoder instances by shard size: `φ = Σ (D_k/D) φ_k`.
pub fn decoder_aggregate(decoders: &[Mlp], shard_sizes: &[usize]) -> Result<Mlp> {
    if decoders.is_empty() || decoders.len() != shard_sizes.len() {
        return Err(Error::shape_mismatch(
            "decoder_aggregate",
            decoders.len(),
            shard_sizes.len(),
        ));
    }
    let total: usize = shard_sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("decoder_aggregate with zero total data".into()));
    }
    let mut agg = decoders[0].clone();
    for p in agg.params_mut() {
        p.scale(0.0);
    }
    for (dec, &weight) in decoders.iter().zip(shard_sizes) {
        let w = weight as f64 / total as f64;
        for (acc, src) in agg.params_mut().into_iter().zip(dec.params()) {
            acc.add_scaled(src, w)?;
        }
    }
    Ok(agg)
}

/// Striped fixed-order parallel map; the output order never depends on the
/// execution schedule.
pub(crate) fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Vec<(usize, T)> {
                    (w..n).step_by(workers).map(|i| (i, f(i))).collect()
                })
            })
            .collect();
        for handle in handles {
            for (i, v) in handle.join().expect("client worker panicked") {
                out[i] = Some(v);
            }
        }
    });
    out.into_iter().map(|o| o.expect("all indices filled")).collect()
}

/// What one client's local phase hands back to the server.
struct ClientPhaseOutput {
    encoder: Mlp,
    decoder: Mlp,
    centroids: CentroidSet,
    features: Vec<(Tensor, usize)>,
    loss: f64,
    accuracy: f64,
    grad_norm: f64,
}

fn client_phase(
    client: &ClientState,
    decoder: &Mlp,
    centroids: &CentroidSet,
    lambda: f64,
    server_lr: f64,
    local_iters: usize,
    ctx: &RoundContext,
    num_classes: usize,
) -> Result<ClientPhaseOutput> {
    let k = client.id;
    let mut encoder = client.encoder.clone();
    let mut decoder = decoder.clone();
    let mut batch_stream = rng::stream(ctx.seed, &[salt::BATCH, k as u64, ctx.round as u64]);
    let mut up_stream =
        rng::stream(ctx.uplink.noise_seed, &[salt::UPLINK, k as u64, ctx.round as u64]);
    let mut down_stream =
        rng::stream(ctx.downlink.noise_seed, &[salt::DOWNLINK, k as u64, ctx.round as u64]);

    let mut all_features: Vec<(Tensor, usize)> = Vec::new();
    let mut losses = Vec::with_capacity(local_iters);
    let mut accs = Vec::with_capacity(local_iters);
    let mut grad_norms = Vec::with_capacity(local_iters);

    for _ in 0..local_iters {
        let idxs = sample_batch_indices(client.shard.len(), ctx.batch_size, &mut batch_stream);
        let mut enc_caches = Vec::with_capacity(idxs.len());
        let mut dec_caches = Vec::with_capacity(idxs.len());
        let mut features = Vec::with_capacity(idxs.len());
        let mut logits = Vec::with_capacity(idxs.len());
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in &idxs {
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

        let loss = regularized_loss(&logits, &labels, &features, centroids, lambda)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "client {k} round {}: loss diverged to {loss}",
                ctx.round
            )));
        }
        let acc = accuracy(&logits, &labels)?;

        let mut logit_grads = Vec::with_capacity(idxs.len());
        for (l, &y) in logits.iter().zip(&labels) {
            logit_grads.push(softmax_cross_entropy(l, y)?.1);
        }
        let anchors = if lambda > 0.0 {
            Some(
                labels
                    .iter()
                    .map(|&y| centroids.require(y).cloned())
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let split = split_backward(
            &encoder,
            &decoder,
            &enc_caches,
            &dec_caches,
            &logit_grads,
            &features,
            anchors.as_deref(),
            lambda,
            &ctx.downlink,
            &mut down_stream,
        )?;
        let grad_norm = (split.decoder.sq_norm() + split.encoder.sq_norm()).sqrt();
        decoder.sgd_step(&split.decoder, server_lr)?;
        encoder.sgd_step(&split.encoder, client.lr)?;

        losses.push(loss);
        accs.push(acc);
        grad_norms.push(grad_norm);
        all_features.extend(features.into_iter().zip(labels));
    }

    let (feat_refs, label_vals): (Vec<Tensor>, Vec<usize>) =
        all_features.iter().cloned().unzip();
    let centroid_set = local_centroid_aggregate(k, &feat_refs, &label_vals, num_classes)?;
    let n = losses.len() as f64;
    Ok(ClientPhaseOutput {
        encoder,
        decoder,
        centroids: centroid_set,
        features: all_features,
        loss: losses.iter().sum::<f64>() / n,
        accuracy: accs.iter().sum::<f64>() / n,
        grad_norm: grad_norms.iter().sum::<f64>() / n,
    })
}

/// Runs one communication round, mutating the client and server states.
pub fn run_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    ctx: &RoundContext,
) -> Result<RoundMetrics> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("run_round without clients".into()));
    }
    if ctx.scheme == Scheme::Fedavg {
        return baseline_fedavg_round(clients, server, ctx);
    }
    let num_classes = server.scg.num_classes();
    let lambda = if ctx.scheme == Scheme::Vanilla { 0.0 } else { server.lambda };

    let outputs: Vec<Result<ClientPhaseOutput>> = {
        let server_ref = &*server;
        parallel_map(clients.len(), ctx.threads, |k| {
            client_phase(
                &clients[k],
                &server_ref.decoders[k],
                &server_ref.centroids,
                lambda,
                server_ref.lr,
                server_ref.local_iters,
                ctx,
                num_classes,
            )
        })
    };

    let mut per_client = Vec::with_capacity(clients.len());
    let mut local_sets = Vec::with_capacity(clients.len());
    let mut round_features: Vec<(Tensor, usize)> = Vec::new();
    for (k, out) in outputs.into_iter().enumerate() {
        let out = out?;
        clients[k].encoder = out.encoder;
        server.decoders[k] = out.decoder;
        per_client.push(ClientRoundMetrics {
            client: k,
            loss: out.loss,
            accuracy: out.accuracy,
            grad_norm: out.grad_norm,
        });
        local_sets.push(out.centroids);
        round_features.extend(out.features);
    }

    // Server phase: centroid machinery, then decoder aggregation.
    let contrastive = match ctx.scheme {
        Scheme::Fedcl | Scheme::Vanilla => {
            let (loss, new_global) =
                scg_update(&mut server.scg, &local_sets, server.scg_lr, server.scg_iters)?;
            server.centroids = new_global;
            loss
        }
        Scheme::Fedproto => {
            let loss = contrastive_loss(&local_sets, &server.centroids)?;
            server.centroids =
                baselines::merge_fedproto_centroids(&local_sets, &server.centroids)?;
            loss
        }
        Scheme::Fedavg => unreachable!("handled above"),
    };

    let shard_sizes: Vec<usize> = clients.iter().map(|c| c.shard.len()).collect();
    let aggregated = decoder_aggregate(&server.decoders, &shard_sizes)?;
    for dec in &mut server.decoders {
        *dec = aggregated.clone();
    }
    server.global_decoder = aggregated;

    Ok(assemble_metrics(ctx.round, per_client, contrastive, &round_features))
}

pub(crate) fn assemble_metrics(
    round: usize,
    per_client: Vec<ClientRoundMetrics>,
    contrastive: f64,
    features: &[(Tensor, usize)],
) -> RoundMetrics {
    let n = per_client.len() as f64;
    let mean_loss = per_client.iter().map(|c| c.loss).sum::<f64>() / n;
    let mean_accuracy = per_client.iter().map(|c| c.accuracy).sum::<f64>() / n;
    let mean_grad_norm = per_client.iter().map(|c| c.grad_norm).sum::<f64>() / n;
    let classes: BTreeSet<usize> = features.iter().map(|(_, y)| *y).collect();
    let sep = if classes.len() >= 2 {
        let feats: Vec<Tensor> = features.iter().map(|(f, _)| f.clone()).collect();
        let labels: Vec<usize> = features.iter().map(|(_, y)| *y).collect();
        separability(&feats, &labels).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    RoundMetrics {
        round,
        per_client,
        mean_loss,
        mean_accuracy,
        mean_grad_norm,
        contrastive_loss: contrastive,
        separability: sep,
    }
}

/// Post-training evaluation over every client's full shard through the
/// channel and the aggregated global decoder.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// NaN when fewer than two classes were evaluated.
    pub separability: f64,
    pub features: Vec<FeatureRecord>,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub rounds: Vec<RoundMetrics>,
    pub eval: EvalReport,
}

/// Evaluates the final models: every shard sample is encoded, transmitted at
/// the configured SNR on a dedicated evaluation stream, and decoded by the
/// global decoder.
pub fn evaluate(
    clients: &[ClientState],
    server: &ServerState,
    uplink: &ChannelConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut per_client_accuracy = Vec::with_capacity(clients.len());
    let mut features = Vec::new();
    let mut flat_feats = Vec::new();
    let mut flat_labels = Vec::new();
    for client in clients {
        let mut stream = rng::stream(uplink.noise_seed, &[salt::EVAL, client.id as u64, seed]);
        let mut logits = Vec::with_capacity(client.shard.len());
        let mut labels = Vec::with_capacity(client.shard.len());
        for (x, y) in &client.shard {
            let f = client.encoder.output(x)?;
            let received = transmit_tensor(&f, uplink, &mut stream)?;
            logits.push(server.global_decoder.output(&received)?);
            labels.push(*y);
            features.push(FeatureRecord {
                client: client.id,
                label: *y,
                feature: received.clone(),
            });
            flat_feats.push(received);
            flat_labels.push(*y);
        }
        per_client_accuracy.push(accuracy(&logits, &labels)?);
    }
    let mean_accuracy =
        per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len().max(1) as f64;
    let classes: BTreeSet<usize> = flat_labels.iter().copied().collect();
    let sep = if classes.len() >= 2 {
        separability(&flat_feats, &flat_labels)?
    } else {
        f64::NAN
    };
    Ok(EvalReport { per_client_accuracy, mean_accuracy, separability: sep, features })
}

/// Builds the dataset, partition, and all states from a config, then runs
/// `T` rounds and a final evaluation.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingResult> {
    cfg.validate()?;
    let dataset = match &cfg.dataset {
        DatasetSource::Blobs { dim, per_class, spread } => {
            gen_blobs(cfg.classes, *dim, *per_class, *spread, cfg.seed)?
        }
        DatasetSource::Csv(path) => {
            let ds = load_csv(path)?;
            if ds.num_classes != cfg.classes {
                return Err(Error::Config(format!(
                    "dataset {} has {} classes but config says {}",
                    path.display(),
                    ds.num_classes,
                    cfg.classes
                )));
            }
            ds
        }
    };
    let shards = partition_mwayqshot(
        &dataset,
        &PartitionSpec { clients: cfg.clients, m: cfg.m, q: cfg.q, seed: cfg.seed },
    )?;

    let mut clients = Vec::with_capacity(cfg.clients);
    for (k, shard_idx) in shards.iter().enumerate() {
        let spec = EncoderSpec {
            input_dim: dataset.dim,
            hidden_dims: cfg.encoder_hidden_for(k).to_vec(),
            feature_dim: cfg.feature_dim,
            seed: rng::mix(cfg.seed, &[salt::ENCODER_INIT, k as u64]),
        };
        let shard: Vec<(Tensor, usize)> =
            shard_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
        clients.push(ClientState::new(k, shard, spec.build()?, cfg.client_lr_for(k))?);
    }

    let decoder_spec = DecoderSpec {
        feature_dim: cfg.feature_dim,
        hidden_dims: cfg.decoder_hidden.clone(),
        num_classes: cfg.classes,
    };
    let mut server = ServerState::init(
        cfg.clients,
        &decoder_spec,
        cfg.seed,
        cfg.server_lr,
        cfg.scg_lr.unwrap_or(cfg.server_lr),
        if cfg.scheme == Scheme::Vanilla { 0.0 } else { cfg.lambda },
        cfg.local_iters,
        cfg.scg_iters,
    )?;

    if cfg.scheme == Scheme::Fedavg {
        let first = clients[0].encoder.layers().len();
        let homogeneous = clients.iter().all(|c| {
            c.encoder.layers().len() == first
                && c.encoder
                    .layers()
                    .iter()
                    .zip(clients[0].encoder.layers())
                    .all(|(a, b)| a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim())
        });
        if !homogeneous {
            return Err(Error::Config(
                "fedavg requires homogeneous encoder architectures across clients".into(),
            ));
        }
        // FedAvg averages encoders, so they must start identical too.
        let shared = clients[0].encoder.clone();
        for client in &mut clients[1..] {
            client.encoder = shared.clone();
        }
    }

    let uplink = ChannelConfig {
        snr_db: cfg.snr_db,
        fading: cfg.fading,
        equalize: cfg.equalize,
        noise_seed: cfg.seed,
    };
    let downlink = ChannelConfig {
        snr_db: cfg.downlink_snr_db.unwrap_or(cfg.snr_db),
        ..uplink
    };

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let ctx = RoundContext {
            round: t,
            seed: cfg.seed,
            uplink,
            downlink,
            batch_size: cfg.batch_size,
            scheme: cfg.scheme,
            threads: cfg.threads,
        };
        let metrics = run_round(&mut clients, &mut server, &ctx).map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("round {t} aborted: {msg}"))
            }
            other => other,
        })?;
        rounds.push(metrics);
    }

    let eval = evaluate(&clients, &server, &uplink, cfg.seed)?;
    Ok(TrainingResult { clients, server, rounds, eval })
}
