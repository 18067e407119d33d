//! Simulated wireless link.
//!
//! Features (uplink) and boundary gradients (downlink) are reshaped into
//! complex symbols and pushed through a flat noisy channel: `ŝ = h·s + n`
//! with `n ~ CN(0, δ²)` and `h = 1` (no fading) or one Rayleigh draw per
//! frame. The noise variance is calibrated against the measured per-frame
//! signal power so the configured SNR stays meaningful as feature magnitudes
//! evolve during training. Multi-client access is modeled as orthogonal
//! interference-free channels; each (client, round, direction) uses its own
//! random stream. Labels never touch the channel.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Flat-fading mode of the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    /// `h = 1` exactly (pure AWGN). The default.
    None,
    /// One real Rayleigh-distributed coefficient per frame, unit mean square.
    Rayleigh,
}

/// Link parameters shared by uplink and downlink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Signal-to-noise ratio in dB. `f64::INFINITY` is the documented
    /// noiseless sentinel: the channel becomes the identity.
    pub snr_db: f64,
    pub fading: Fading,
    /// Divide received symbols by the (perfectly known) channel coefficient.
    /// Irrelevant when `fading` is `None` since `h = 1`.
    pub equalize: bool,
    /// Master seed for all noise streams derived for this link.
    pub noise_seed: u64,
}

impl ChannelConfig {
    pub fn noiseless(seed: u64) -> Self {
        ChannelConfig {
            snr_db: f64::INFINITY,
            fading: Fading::None,
            equalize: false,
            noise_seed: seed,
        }
    }

    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        ChannelConfig { snr_db, fading: Fading::None, equalize: false, noise_seed: seed }
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!(
                "snr_db must be finite or +inf, got {}",
                self.snr_db
            )));
        }
        Ok(())
    }
}

/// A tensor reshaped into complex channel symbols.
///
/// Consecutive real entries `(r0, r1)` form one symbol `r0 + i·r1`; an odd
/// tail is padded with a single zero. The original shape is recorded so the
/// receiver can reshape back exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    symbols: Vec<Complex64>,
    original_shape: Vec<usize>,
    padded: bool,
}

impl SymbolFrame {
    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn original_shape(&self) -> &[usize] {
        &self.original_shape
    }

    /// Mean `|s|²` over the frame.
    pub fn signal_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    /// Inverse of [`reshape_to_symbols`]: exact on the unpadded region.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let n: usize = self.original_shape.iter().product();
        let mut data = Vec::with_capacity(self.symbols.len() * 2);
        for s in &self.symbols {
            data.push(s.re);
            data.push(s.im);
        }
        data.truncate(n);
        Tensor::new(self.original_shape.clone(), data)
    }
}

/// Packs a real tensor into complex symbols, recording its shape.
pub fn reshape_to_symbols(f: &Tensor) -> Result<SymbolFrame> {
    if f.len() == 0 {
        return Err(Error::InvalidArgument("cannot reshape an empty tensor".into()));
    }
    f.check_finite("reshape_to_symbols")?;
    let data = f.data();
    let padded = data.len() % 2 == 1;
    let mut symbols = Vec::with_capacity(data.len().div_ceil(2));
    for pair in data.chunks(2) {
        let re = pair[0];
        let im = if pair.len() == 2 { pair[1] } else { 0.0 };
        symbols.push(Complex64::new(re, im));
    }
    Ok(SymbolFrame { symbols, original_shape: f.shape().to_vec(), padded })
}

/// Noise variance `δ² = P / 10^(snr_db / 10)` for a given signal power.
pub fn noise_variance(signal_power: f64, snr_db: f64) -> Result<f64> {
    if !(signal_power > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "signal power must be positive, got {signal_power}"
        )));
    }
    Ok(signal_power / 10f64.powf(snr_db / 10.0))
}

/// Per-frame channel report: the coefficient and noise level actually applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmitInfo {
    pub h: f64,
    pub noise_var: f64,
    pub signal_power: f64,
}

/// Sends one frame through the link.
///
/// The per-frame signal power is measured as mean `|s|²`; each symbol
/// receives independent noise `CN(0, δ²)` (real and imaginary parts
/// `N(0, δ²/2)`). Under Rayleigh fading one coefficient is drawn per frame;
/// a coefficient too close to zero is resampled so equalization never
/// divides by zero. The noiseless sentinel returns the input unchanged.
pub fn transmit<R: Rng + ?Sized>(
    frame: &SymbolFrame,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(SymbolFrame, TransmitInfo)> {
    cfg.validate()?;
    if cfg.is_noiseless() {
        let info = TransmitInfo { h: 1.0, noise_var: 0.0, signal_power: frame.signal_power() };
        return Ok((frame.clone(), info));
    }
    let power = frame.signal_power();
    if power == 0.0 {
        // An all-zero frame carries no signal; SNR is undefined, pass through.
        let info = TransmitInfo { h: draw_h(cfg, rng), noise_var: 0.0, signal_power: 0.0 };
        return Ok((frame.clone(), info));
    }
    let var = noise_variance(power, cfg.snr_db)?;
    let component = Normal::new(0.0, (var / 2.0).sqrt())
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
    let h = draw_h(cfg, rng);
    let symbols = frame
        .symbols
        .iter()
        .map(|s| {
            let noise = Complex64::new(component.sample(rng), component.sample(rng));
            let received = h * s + noise;
            if cfg.equalize {
                received / h
            } else {
                received
            }
        })
        .collect();
    Ok((
        SymbolFrame {
            symbols,
            original_shape: frame.original_shape.clone(),
            padded: frame.padded,
        },
        TransmitInfo { h, noise_var: var, signal_power: power },
    ))
}

fn draw_h<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> f64 {
    match cfg.fading {
        Fading::None => 1.0,
        Fading::Rayleigh => {
            // Inverse CDF with scale 1/sqrt(2): E[h²] = 1, preserving the
            // average SNR across frames.
            loop {
                let u: f64 = rng.random();
                let h = (-(1.0 - u).ln()).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
                if h > 1e-12 {
                    return h;
                }
            }
        }
    }
}

/// Reshape → transmit → unshape. Used identically for uplink features and
/// downlink gradients.
pub fn transmit_tensor<R: Rng + ?Sized>(
    x: &Tensor,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if cfg.is_noiseless() {
        return Ok(x.clone());
    }
    let frame = reshape_to_symbols(x)?;
    let (received, _) = transmit(&frame, cfg, rng)?;
    received.to_tensor()
}
