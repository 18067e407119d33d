//! Experiment configuration: a flat `key=value` text format plus programmatic
//! overrides. Unknown keys are rejected so typos never pass silently, and the
//! fully resolved config can be rendered back out for provenance.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::channel::Fading;
use crate::error::{Error, Result};
use crate::protocol::Scheme;

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs { dim: usize, per_class: usize, spread: f64 },
    Csv(PathBuf),
}

/// Fully resolved experiment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    /// Number of clients (K).
    pub clients: usize,
    /// Communication rounds (T).
    pub rounds: usize,
    /// Number of semantic classes (C).
    pub classes: usize,
    /// Classes per client shard.
    pub m: usize,
    /// Samples per owned class.
    pub q: usize,
    /// Minibatch size (B).
    pub batch_size: usize,
    /// Decoder/encoder iterations per round (E).
    pub local_iters: usize,
    /// SCG iterations per round (E').
    pub scg_iters: usize,
    /// Centroid regularization weight.
    pub lambda: f64,
    /// Server learning rate for decoder updates.
    pub server_lr: f64,
    /// SCG learning rate; defaults to `server_lr` when absent.
    pub scg_lr: Option<f64>,
    /// Client learning rates; length 1 (shared) or `clients`.
    pub client_lr: Vec<f64>,
    /// Uplink SNR in dB; `inf` for the noiseless channel.
    pub snr_db: f64,
    /// Downlink SNR override; the uplink value when absent.
    pub downlink_snr_db: Option<f64>,
    pub fading: Fading,
    pub equalize: bool,
    /// Encoder output width, shared by all clients.
    pub feature_dim: usize,
    /// Per-client encoder hidden widths; length 1 (shared) or `clients`.
    pub encoder_hidden: Vec<Vec<usize>>,
    pub decoder_hidden: Vec<usize>,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Client-phase worker threads; 0 picks the machine default. Results are
    /// identical for every value.
    pub threads: usize,
    /// Keys explicitly provided by file or flag, for constraint checks.
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scheme: Scheme::Fedcl,
            clients: 5,
            rounds: 200,
            classes: 10,
            m: 3,
            q: 30,
            batch_size: 32,
            local_iters: 1,
            scg_iters: 1,
            lambda: 1.0,
            server_lr: 0.001,
            scg_lr: None,
            client_lr: vec![0.001],
            snr_db: 10.0,
            downlink_snr_db: None,
            fading: Fading::None,
            equalize: false,
            feature_dim: 64,
            encoder_hidden: vec![vec![64]],
            decoder_hidden: vec![32],
            dataset: DatasetSource::Blobs { dim: 32, per_class: 200, spread: 1.0 },
            seed: 0,
            out_dir: PathBuf::from("fedcl_out"),
            threads: 0,
            explicit: BTreeSet::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file and applies it over the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(path, idx + 1, format!("expected key=value, got `{line}`"))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override. Unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scheme" => self.scheme = parse_scheme(value)?,
            "clients" => self.clients = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "q" => self.q = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "local_iters" => self.local_iters = parse_num(key, value)?,
            "scg_iters" => self.scg_iters = parse_num(key, value)?,
            "lambda" => self.lambda = parse_float(key, value)?,
            "server_lr" => self.server_lr = parse_float(key, value)?,
            "scg_lr" => self.scg_lr = Some(parse_float(key, value)?),
            "client_lr" => {
                self.client_lr = value
                    .split(',')
                    .map(|v| parse_float(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "snr_db" => self.snr_db = parse_float(key, value)?,
            "downlink_snr_db" => self.downlink_snr_db = Some(parse_float(key, value)?),
            "fading" => {
                self.fading = match value {
                    "none" => Fading::None,
                    "rayleigh" => Fading::Rayleigh,
                    other => {
                        return Err(Error::Config(format!(
                            "fading must be `none` or `rayleigh`, got `{other}`"
                        )))
                    }
                }
            }
            "equalize" => {
                self.equalize = value.parse().map_err(|_| {
                    Error::Config(format!("equalize must be true or false, got `{value}`"))
                })?
            }
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "encoder_hidden" => {
                self.encoder_hidden = value
                    .split(';')
                    .map(|per_client| parse_dims(key, per_client.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "decoder_hidden" => self.decoder_hidden = parse_dims(key, value)?,
            "dataset" => self.dataset = parse_dataset(value, &self.dataset)?,
            "blob_dim" => {
                let dim = parse_num(key, value)?;
                self.with_blobs(|b| b.0 = dim, key)?;
            }
            "blob_per_class" => {
                let n = parse_num(key, value)?;
                self.with_blobs(|b| b.1 = n, key)?;
            }
            "blob_spread" => {
                let s = parse_float(key, value)?;
                self.with_blobs(|b| b.2 = s, key)?;
            }
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed must be an integer, got `{value}`")))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "threads" => self.threads = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn with_blobs(
        &mut self,
        edit: impl FnOnce(&mut (usize, usize, f64)),
        key: &str,
    ) -> Result<()> {
        match &mut self.dataset {
            DatasetSource::Blobs { dim, per_class, spread } => {
                let mut tuple = (*dim, *per_class, *spread);
                edit(&mut tuple);
                *dim = tuple.0;
                *per_class = tuple.1;
                *spread = tuple.2;
                Ok(())
            }
            DatasetSource::Csv(_) => Err(Error::Config(format!(
                "`{key}` only applies to the blobs dataset"
            ))),
        }
    }

    /// Checks every documented constraint; called by `run_training`.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.m == 0 || self.m > self.classes {
            return Err(Error::Config(format!(
                "m ({}) must satisfy 1 <= m <= classes ({})",
                self.m, self.classes
            )));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.local_iters == 0 {
            return Err(Error::Config("local_iters must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.scheme == Scheme::Vanilla && self.explicit.contains("lambda") && self.lambda != 0.0
        {
            return Err(Error::Config(
                "scheme=vanilla runs with lambda = 0; drop the lambda key or use scheme=fedcl"
                    .into(),
            ));
        }
        if !(self.server_lr > 0.0) {
            return Err(Error::Config(format!(
                "server_lr must be > 0, got {}",
                self.server_lr
            )));
        }
        if let Some(lr) = self.scg_lr {
            if !(lr >= 0.0) {
                return Err(Error::Config(format!("scg_lr must be >= 0, got {lr}")));
            }
        }
        if self.client_lr.is_empty()
            || (self.client_lr.len() != 1 && self.client_lr.len() != self.clients)
        {
            return Err(Error::Config(format!(
                "client_lr needs 1 or {} entries, got {}",
                self.clients,
                self.client_lr.len()
            )));
        }
        if self.client_lr.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("every client_lr must be > 0".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config("snr_db must be finite or inf".into()));
        }
        if let Some(d) = self.downlink_snr_db {
            if d.is_nan() || d == f64::NEG_INFINITY {
                return Err(Error::Config("downlink_snr_db must be finite or inf".into()));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.encoder_hidden.is_empty()
            || (self.encoder_hidden.len() != 1 && self.encoder_hidden.len() != self.clients)
        {
            return Err(Error::Config(format!(
                "encoder_hidden needs 1 or {} per-client specs, got {}",
                self.clients,
                self.encoder_hidden.len()
            )));
        }
        if self.scheme == Scheme::Fedavg {
            let first = self.encoder_hidden_for(0);
            for k in 1..self.clients {
                if self.encoder_hidden_for(k) != first {
                    return Err(Error::Config(
                        "fedavg requires homogeneous encoder architectures across clients".into(),
                    ));
                }
            }
        }
        if let DatasetSource::Blobs { dim, per_class, spread } = &self.dataset {
            if *dim == 0 || *per_class == 0 {
                return Err(Error::Config("blob_dim and blob_per_class must be >= 1".into()));
            }
            if !(*spread > 0.0) {
                return Err(Error::Config(format!("blob_spread must be > 0, got {spread}")));
            }
        }
        Ok(())
    }

    /// The regularization weight actually applied (vanilla forces zero).
    pub fn effective_lambda(&self) -> f64 {
        if self.scheme == Scheme::Vanilla {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn encoder_hidden_for(&self, client: usize) -> &[usize] {
        if self.encoder_hidden.len() == 1 {
            &self.encoder_hidden[0]
        } else {
            &self.encoder_hidden[client]
        }
    }

    pub fn client_lr_for(&self, client: usize) -> f64 {
        if self.client_lr.len() == 1 {
            self.client_lr[0]
        } else {
            self.client_lr[client]
        }
    }

    /// Canonical `key=value` rendering of the fully resolved config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scheme={}", self.scheme.name());
        let _ = writeln!(out, "clients={}", self.clients);
        let _ = writeln!(out, "rounds={}", self.rounds);
        let _ = writeln!(out, "classes={}", self.classes);
        let _ = writeln!(out, "m={}", self.m);
        let _ = writeln!(out, "q={}", self.q);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "local_iters={}", self.local_iters);
        let _ = writeln!(out, "scg_iters={}", self.scg_iters);
        let _ = writeln!(out, "lambda={}", self.effective_lambda());
        let _ = writeln!(out, "server_lr={}", self.server_lr);
        if let Some(lr) = self.scg_lr {
            let _ = writeln!(out, "scg_lr={lr}");
        }
        let _ = writeln!(
            out,
            "client_lr={}",
            self.client_lr.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "snr_db={}", self.snr_db);
        if let Some(d) = self.downlink_snr_db {
            let _ = writeln!(out, "downlink_snr_db={d}");
        }
        let _ = writeln!(
            out,
            "fading={}",
            match self.fading {
                Fading::None => "none",
                Fading::Rayleigh => "rayleigh",
            }
        );
        let _ = writeln!(out, "equalize={}", self.equalize);
        let _ = writeln!(out, "feature_dim={}", self.feature_dim);
        let _ = writeln!(
            out,
            "encoder_hidden={}",
            self.encoder_hidden
                .iter()
                .map(|dims| render_dims(dims))
                .collect::<Vec<_>>()
                .join(";")
        );
        let _ = writeln!(out, "decoder_hidden={}", render_dims(&self.decoder_hidden));
        match &self.dataset {
            DatasetSource::Blobs { dim, per_class, spread } => {
                let _ = writeln!(out, "dataset=blobs");
                let _ = writeln!(out, "blob_dim={dim}");
                let _ = writeln!(out, "blob_per_class={per_class}");
                let _ = writeln!(out, "blob_spread={spread}");
            }
            DatasetSource::Csv(path) => {
                let _ = writeln!(out, "dataset=csv:{}", path.display());
            }
        }
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "out_dir={}", self.out_dir.display());
        let _ = writeln!(out, "threads={}", self.threads);
        out
    }
}

fn render_dims(dims: &[usize]) -> String {
    if dims.is_empty() {
        "none".to_string()
    } else {
        dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_scheme(value: &str) -> Result<Scheme> {
    match value {
        "fedcl" => Ok(Scheme::Fedcl),
        "fedproto" => Ok(Scheme::Fedproto),
        "vanilla" => Ok(Scheme::Vanilla),
        "fedavg" => Ok(Scheme::Fedavg),
        other => Err(Error::Config(format!(
            "scheme must be one of fedcl|fedproto|vanilla|fedavg, got `{other}`"
        ))),
    }
}

fn parse_num(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} must be a non-negative integer, got `{value}`")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} must be a number, got `{value}`")))
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            let dim: usize = v.trim().parse().map_err(|_| {
                Error::Config(format!("{key} entries must be integers, got `{v}`"))
            })?;
            if dim == 0 {
                return Err(Error::Config(format!("{key} entries must be positive")));
            }
            Ok(dim)
        })
        .collect()
}

fn parse_dataset(value: &str, current: &DatasetSource) -> Result<DatasetSource> {
    if value == "blobs" {
        return Ok(match current {
            blobs @ DatasetSource::Blobs { .. } => blobs.clone(),
            DatasetSource::Csv(_) => {
                let ExperimentConfig { dataset, .. } = ExperimentConfig::default();
                dataset
            }
        });
    }
    if let Some(path) = value.strip_prefix("csv:") {
        return Ok(DatasetSource::Csv(PathBuf::from(path)));
    }
    Err(Error::Config(format!(
        "dataset must be `blobs` or `csv:PATH`, got `{value}`"
    )))
}
