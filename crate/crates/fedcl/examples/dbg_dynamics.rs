use fedcl::channel::ChannelConfig;
use fedcl::cli::config::ExperimentConfig;
use fedcl::protocol::{run_round, run_training, RoundContext};

fn main() {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("scheme", "fedcl"),
        ("clients", "3"),
        ("rounds", "0"),
        ("classes", "3"),
        ("m", "2"),
        ("q", "16"),
        ("batch_size", "8"),
        ("lambda", "0.5"),
        ("server_lr", "0.02"),
        ("client_lr", "0.02"),
        ("scg_lr", "0.002"),
        ("snr_db", "5"),
        ("feature_dim", "8"),
        ("encoder_hidden", "12"),
        ("decoder_hidden", "10"),
        ("blob_dim", "8"),
        ("blob_per_class", "60"),
        ("blob_spread", "1.0"),
        ("seed", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let mut rounds = 200usize;
    let mut every = 10usize;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("args are key=value");
        match k {
            "trace_rounds" => rounds = v.parse().unwrap(),
            "every" => every = v.parse().unwrap(),
            _ => cfg.set(k, v).unwrap(),
        }
    }
    let scheme = cfg.scheme;
    let init = run_training(&cfg).unwrap();
    let mut clients = init.clients;
    let mut server = init.server;
    let uplink = ChannelConfig {
        snr_db: cfg.snr_db,
        fading: cfg.fading,
        equalize: cfg.equalize,
        noise_seed: cfg.seed,
    };
    for t in 0..rounds {
        let ctx = RoundContext {
            round: t,
            seed: cfg.seed,
            uplink,
            downlink: uplink,
            batch_size: cfg.batch_size,
            scheme,
            threads: 1,
        };
        match run_round(&mut clients, &mut server, &ctx) {
            Ok(m) => {
                if t % every == 0 || t + 1 == rounds {
                    let c = server.centroids.num_classes();
                    let anchor_norm: f64 = (0..c)
                        .map(|i| server.centroids.require(i).unwrap().norm())
                        .sum::<f64>()
                        / c as f64;
                    println!(
                        "t={t:3} loss={:.4} acc={:.3} Lf={:.3} |F|={anchor_norm:.3} gnorm={:.4} sep={:.3}",
                        m.mean_loss, m.mean_accuracy, m.contrastive_loss, m.mean_grad_norm,
                        m.separability
                    );
                }
            }
            Err(e) => {
                println!("t={t}: ERROR {e}");
                break;
            }
        }
    }
    match fedcl::protocol::evaluate(&clients, &server, &uplink, cfg.seed) {
        Ok(eval) => println!(
            "eval: mean_acc={:.4} sep={:.4}",
            eval.mean_accuracy, eval.separability
        ),
        Err(e) => println!("eval ERROR: {e}"),
    }

    // Global eval: every client transmits the whole class population.
    if let fedcl::cli::config::DatasetSource::Blobs { dim, per_class, spread } = cfg.dataset {
        let ds = fedcl::data::gen_blobs(cfg.classes, dim, per_class, spread, cfg.seed).unwrap();
        let mut accs = Vec::new();
        for client in &clients {
            let mut stream = fedcl::rng::stream(cfg.seed, &[0xff, client.id as u64]);
            let mut correct = 0usize;
            for (x, y) in &ds.samples {
                let f = client.encoder.output(x).unwrap();
                let recv = fedcl::channel::transmit_tensor(&f, &uplink, &mut stream).unwrap();
                let logits = server.global_decoder.output(&recv).unwrap();
                let pred = logits
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == *y {
                    correct += 1;
                }
            }
            accs.push(correct as f64 / ds.samples.len() as f64);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("global_eval: mean_acc={mean:.4}");
    }
}
