//! Integration tests of the round machinery and training driver.

mod common;

use common::{config_from_pairs, reference_batch, CentralizedTrainer};
use fedcl::channel::ChannelConfig;
use fedcl::metrics::render_metrics_csv;
use fedcl::models::ScgState;
use fedcl::numerics::Tensor;
use fedcl::protocol::{
    baseline_fedavg_round, run_round, run_training, ClientState, RoundContext, Scheme,
};
use fedcl::rng;

fn small_cfg(scheme: &str, seed: u64) -> fedcl::cli::config::ExperimentConfig {
    config_from_pairs(&[
        ("scheme", scheme),
        ("clients", "4"),
        ("rounds", "6"),
        ("classes", "3"),
        ("m", "2"),
        ("q", "10"),
        ("batch_size", "8"),
        ("lambda", if scheme == "vanilla" { "0" } else { "0.5" }),
        ("server_lr", "0.02"),
        ("client_lr", "0.02"),
        ("snr_db", "10"),
        ("feature_dim", "8"),
        ("encoder_hidden", "12"),
        ("decoder_hidden", "10"),
        ("blob_dim", "8"),
        ("blob_per_class", "60"),
        ("blob_spread", "1.0"),
        ("scg_lr", "0.002"),
        ("seed", &seed.to_string()),
    ])
}

#[test]
fn zero_rounds_returns_initial_models_and_empty_metrics() {
    let mut cfg = small_cfg("fedcl", 3);
    cfg.set("rounds", "0").unwrap();
    let a = run_training(&cfg).unwrap();
    let b = run_training(&cfg).unwrap();
    assert!(a.rounds.is_empty());
    assert_eq!(a.clients.len(), 4);
    for (ca, cb) in a.clients.iter().zip(&b.clients) {
        assert_eq!(ca.encoder, cb.encoder, "initial models are a pure function of the seed");
    }
    assert_eq!(a.server.global_decoder, b.server.global_decoder);
    for dec in &a.server.decoders {
        assert_eq!(*dec, a.server.global_decoder);
    }
}

#[test]
fn metrics_are_identical_across_thread_counts() {
    let mut cfg1 = small_cfg("fedcl", 7);
    cfg1.set("threads", "1").unwrap();
    let mut cfg4 = small_cfg("fedcl", 7);
    cfg4.set("threads", "4").unwrap();
    let r1 = run_training(&cfg1).unwrap();
    let r4 = run_training(&cfg4).unwrap();
    assert_eq!(render_metrics_csv(&r1.rounds), render_metrics_csv(&r4.rounds));
    assert_eq!(r1.eval.mean_accuracy, r4.eval.mean_accuracy);
    for (a, b) in r1.clients.iter().zip(&r4.clients) {
        assert_eq!(a.encoder, b.encoder);
    }
}

#[test]
fn vanilla_equals_fedcl_with_lambda_zero() {
    let mut fedcl_cfg = small_cfg("fedcl", 11);
    fedcl_cfg.set("lambda", "0").unwrap();
    let vanilla_cfg = small_cfg("vanilla", 11);
    let a = run_training(&fedcl_cfg).unwrap();
    let b = run_training(&vanilla_cfg).unwrap();
    assert_eq!(render_metrics_csv(&a.rounds), render_metrics_csv(&b.rounds));
    assert_eq!(a.eval.mean_accuracy, b.eval.mean_accuracy);
}

#[test]
fn scg_state_cannot_influence_training_at_lambda_zero() {
    let mut cfg = small_cfg("fedcl", 13);
    cfg.set("lambda", "0").unwrap();
    let init = {
        let mut c = cfg.clone();
        c.set("rounds", "0").unwrap();
        run_training(&c).unwrap()
    };

    // Two servers, same decoders, wildly different SCGs.
    let mut server_a = init.server.clone();
    let mut server_b = init.server.clone();
    let other_scg = ScgState::init(3, 8, &mut rng::stream(0xdead, &[1])).unwrap();
    server_b.centroids =
        fedcl::protocol::CentroidSet::global(other_scg.centroids().unwrap());
    server_b.scg = other_scg;
    assert_ne!(server_a.scg, server_b.scg);

    let mut clients_a = init.clients.clone();
    let mut clients_b = init.clients;
    let uplink = ChannelConfig::awgn(10.0, cfg.seed);
    for round in 0..5 {
        let ctx = RoundContext {
            round,
            seed: cfg.seed,
            uplink,
            downlink: uplink,
            batch_size: 8,
            scheme: Scheme::Fedcl,
            threads: 1,
        };
        run_round(&mut clients_a, &mut server_a, &ctx).unwrap();
        run_round(&mut clients_b, &mut server_b, &ctx).unwrap();
    }
    for (a, b) in clients_a.iter().zip(&clients_b) {
        assert_eq!(a.encoder, b.encoder, "encoder trajectory must ignore the SCG at lambda 0");
    }
    assert_eq!(server_a.global_decoder, server_b.global_decoder);
    assert_ne!(server_a.scg, server_b.scg, "the SCGs themselves keep training apart");
}

#[test]
fn heterogeneous_encoders_interoperate_and_keep_their_size() {
    let mut cfg = small_cfg("fedcl", 17);
    cfg.set("encoder_hidden", "24;16,8;32;none").unwrap();
    let init = {
        let mut c = cfg.clone();
        c.set("rounds", "0").unwrap();
        run_training(&c).unwrap()
    };
    let param_counts: Vec<usize> =
        init.clients.iter().map(|c| c.encoder.num_params()).collect();
    assert_eq!(param_counts.len(), 4);
    assert!(
        param_counts.windows(2).any(|w| w[0] != w[1]),
        "architectures should differ across clients: {param_counts:?}"
    );

    let result = run_training(&cfg).unwrap();
    let after: Vec<usize> = result.clients.iter().map(|c| c.encoder.num_params()).collect();
    assert_eq!(param_counts, after, "parameter counts never change during training");
    assert_eq!(result.rounds.len(), 6);
}

#[test]
fn fedavg_single_client_round_is_plain_local_training() {
    let mut cfg = small_cfg("fedavg", 19);
    cfg.set("clients", "1").unwrap();
    cfg.set("m", "3").unwrap();
    cfg.set("snr_db", "inf").unwrap();
    cfg.set("rounds", "0").unwrap();
    let init = run_training(&cfg).unwrap();
    let client = &init.clients[0];

    // Reference: one epoch of minibatch SGD over the composed network with
    // the same shuffle and chunking.
    let mut oracle = CentralizedTrainer::from_split(
        &client.encoder,
        &init.server.global_decoder,
        cfg.client_lr_for(0),
        cfg.server_lr,
    );
    let order = reference_batch(client.shard.len(), client.shard.len(), cfg.seed, 0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<(Tensor, usize)> =
            chunk.iter().map(|&i| client.shard[i].clone()).collect();
        oracle.step(&batch);
    }

    let mut clients = init.clients.clone();
    let mut server = init.server.clone();
    let noiseless = ChannelConfig::noiseless(cfg.seed);
    let ctx = RoundContext {
        round: 0,
        seed: cfg.seed,
        uplink: noiseless,
        downlink: noiseless,
        batch_size: cfg.batch_size,
        scheme: Scheme::Fedavg,
        threads: 1,
    };
    baseline_fedavg_round(&mut clients, &mut server, &ctx).unwrap();

    // K = 1 aggregation is the identity, so the round equals local training.
    let trained: Vec<&Tensor> = clients[0]
        .encoder
        .params()
        .into_iter()
        .chain(server.global_decoder.params())
        .collect();
    let mut oracle_params = Vec::new();
    for layer in oracle.layers() {
        oracle_params.push(layer.weights().clone());
        oracle_params.push(layer.bias().clone());
    }
    assert_eq!(trained.len(), oracle_params.len());
    for (a, b) in trained.iter().zip(&oracle_params) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "local-training equivalence violated: {x} vs {y}");
        }
    }
}

#[test]
fn fedavg_zero_lr_aggregation_is_identity() {
    let init = {
        let mut cfg = small_cfg("fedavg", 23);
        cfg.set("clients", "2").unwrap();
        cfg.set("encoder_hidden", "12").unwrap();
        cfg.set("rounds", "0").unwrap();
        run_training(&cfg).unwrap()
    };
    // Force zero learning rates and identical weights by hand.
    let mut clients: Vec<ClientState> = init.clients.clone();
    let shared = clients[0].encoder.clone();
    for c in &mut clients {
        c.encoder = shared.clone();
        c.lr = 0.0;
    }
    let mut server = init.server.clone();
    server.lr = 0.0;
    let noiseless = ChannelConfig::noiseless(0);
    let ctx = RoundContext {
        round: 0,
        seed: 23,
        uplink: noiseless,
        downlink: noiseless,
        batch_size: 8,
        scheme: Scheme::Fedavg,
        threads: 1,
    };
    baseline_fedavg_round(&mut clients, &mut server, &ctx).unwrap();
    for c in &clients {
        assert_eq!(c.encoder, shared);
    }
    assert_eq!(server.global_decoder, init.server.global_decoder);
}

#[test]
fn fedavg_rejects_heterogeneous_encoders() {
    let mut cfg = small_cfg("fedavg", 29);
    cfg.set("encoder_hidden", "24;16;32;none").unwrap();
    let err = run_training(&cfg).unwrap_err();
    assert!(err.to_string().contains("homogeneous"), "{err}");
}

#[test]
fn loss_trend_decreases_on_three_class_blobs() {
    for seed in 0..5u64 {
        let mut cfg = small_cfg("fedcl", seed);
        cfg.set("clients", "3").unwrap();
        cfg.set("rounds", "200").unwrap();
        cfg.set("q", "16").unwrap();
        cfg.set("snr_db", "5").unwrap();
        let result = run_training(&cfg).unwrap();
        let losses: Vec<f64> = result.rounds.iter().map(|r| r.mean_loss).collect();
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            last < first,
            "seed {seed}: mean loss of last 10 rounds ({last:.4}) must undercut first 10 ({first:.4})"
        );
    }
}

#[test]
fn longer_training_never_raises_final_smoothed_loss() {
    for seed in 0..5u64 {
        let smoothed = |rounds: usize| {
            let mut cfg = small_cfg("fedcl", seed);
            cfg.set("clients", "3").unwrap();
            cfg.set("q", "16").unwrap();
            cfg.set("rounds", &rounds.to_string()).unwrap();
            let result = run_training(&cfg).unwrap();
            let losses: Vec<f64> = result.rounds.iter().map(|r| r.mean_loss).collect();
            losses[losses.len() - 10..].iter().sum::<f64>() / 10.0
        };
        let short = smoothed(100);
        let long = smoothed(200);
        assert!(
            long <= short,
            "seed {seed}: doubling T raised smoothed loss {short:.5} -> {long:.5}"
        );
    }
}
