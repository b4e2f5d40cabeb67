//! Synthetic SIMO RF frames with known pulse and TRFs.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), seeded with
//! `seed_from_u64`. Channel `i` draws its TRF from stream `i` of the
//! configured seed; noise for channel `i` comes from stream `i` of
//! `seed ^ NOISE_SEED_SALT`. Normal variates use `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{direct_convolve, RfFrame};

pub const NOISE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScattererModel {
    /// Gaussian amplitude at every sample.
    Dense,
    /// Gaussian amplitude present with probability `density`.
    Sparse { density: f64 },
}

/// Elliptical region, in (channel, sample) coordinates, whose reflectivity
/// is multiplied by `attenuation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub center_channel: f64,
    pub center_sample: f64,
    pub radius_channels: f64,
    pub radius_samples: f64,
    pub attenuation: f64,
}

impl Inclusion {
    pub fn contains(&self, channel: usize, sample: usize) -> bool {
        let dc = (channel as f64 - self.center_channel) / self.radius_channels;
        let ds = (sample as f64 - self.center_sample) / self.radius_samples;
        dc * dc + ds * ds <= 1.0
    }
}

/// Per-block pulse change: block `b` uses amplitude `amplitude^(b−1)` and
/// fractional bandwidth `bandwidth·bandwidth_factor^(b−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockTaper {
    pub amplitude: f64,
    pub bandwidth_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub channels: usize,
    pub len: usize,
    pub psf_len: usize,
    pub blocks: usize,
    /// Cycles per sample.
    pub center_freq: f64,
    pub bandwidth: f64,
    pub scatterers: ScattererModel,
    pub inclusion: Option<Inclusion>,
    pub snr_db: Option<f64>,
    pub taper: Option<BlockTaper>,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            len: 128,
            psf_len: 16,
            blocks: 2,
            center_freq: 0.25,
            bandwidth: 0.6,
            scatterers: ScattererModel::Dense,
            inclusion: None,
            snr_db: None,
            taper: None,
            sample_rate: 40e6,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::invalid("a phantom needs at least 2 channels"));
        }
        if self.blocks == 0 || self.len / self.blocks < 2 {
            return Err(Error::invalid(format!(
                "{} samples cannot hold {} blocks of at least 2",
                self.len, self.blocks
            )));
        }
        let lb = self.len / self.blocks;
        if self.psf_len < 2 || self.psf_len >= lb {
            return Err(Error::invalid(format!(
                "PSF length {} must be in 2..{lb} (below the block length)",
                self.psf_len
            )));
        }
        if !(self.center_freq > 0.0 && self.center_freq < 0.5) {
            return Err(Error::invalid(format!(
                "center frequency {} must lie in (0, 0.5) cycles/sample",
                self.center_freq
            )));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::invalid("fractional bandwidth must be positive"));
        }
        if let ScattererModel::Sparse { density } = self.scatterers {
            if !(density > 0.0 && density <= 1.0) {
                return Err(Error::invalid(format!("density {density} outside (0, 1]")));
            }
        }
        if let Some(inc) = &self.inclusion {
            if !(inc.radius_channels > 0.0 && inc.radius_samples > 0.0) {
                return Err(Error::invalid("inclusion radii must be positive"));
            }
            if !(inc.attenuation.is_finite() && inc.attenuation >= 0.0) {
                return Err(Error::invalid("inclusion attenuation must be non-negative"));
            }
        }
        if let Some(t) = &self.taper {
            if !(t.amplitude.is_finite() && t.amplitude > 0.0) {
                return Err(Error::invalid("taper amplitude must be positive"));
            }
            if !(t.bandwidth_factor.is_finite() && t.bandwidth_factor > 0.0) {
                return Err(Error::invalid("taper bandwidth factor must be positive"));
            }
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return Err(Error::invalid("SNR is NaN"));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    fn pulse_for_block(&self, b: usize) -> Vec<f64> {
        match &self.taper {
            None => gaussian_pulse(self.psf_len, self.center_freq, self.bandwidth),
            Some(t) => {
                let k = (b - 1) as i32;
                let bw = self.bandwidth * t.bandwidth_factor.powi(k);
                let amp = t.amplitude.powi(k);
                gaussian_pulse(self.psf_len, self.center_freq, bw)
                    .into_iter()
                    .map(|v| v * amp)
                    .collect()
            }
        }
    }
}

/// Unit-energy Gaussian-modulated cosine, centred in `len` samples.
///
/// `bandwidth` is the −6 dB fractional bandwidth relative to `center_freq`.
pub fn gaussian_pulse(len: usize, center_freq: f64, bandwidth: f64) -> Vec<f64> {
    let sigma = (2.0 * std::f64::consts::LN_2).sqrt() / (std::f64::consts::PI * bandwidth * center_freq);
    let mid = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - mid;
            (-t * t / (2.0 * sigma * sigma)).exp() * (2.0 * std::f64::consts::PI * center_freq * t).cos()
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub trfs: Vec<Vec<f64>>,
    /// Pulse of the first block.
    pub psf: Vec<f64>,
    /// Pulse used for each block.
    pub block_psfs: Vec<Vec<f64>>,
    /// Untruncated data, `L + L_s − 1` samples per channel.
    pub full: Vec<Vec<f64>>,
    pub noiseless: RfFrame,
    pub noisy: RfFrame,
}

impl GroundTruth {
    /// Samples `L .. L + L_s − 1` of each untruncated channel.
    pub fn withheld_tail(&self) -> Vec<Vec<f64>> {
        let len = self.noiseless.len();
        self.full.iter().map(|c| c[len..].to_vec()).collect()
    }
}

fn channel_rng(seed: u64, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64);
    rng
}

/// Draws TRFs and builds the truncated (and optionally noisy) frame.
pub fn generate(config: &PhantomConfig) -> Result<GroundTruth> {
    config.validate()?;
    let (m, len) = (config.channels, config.len);
    let trfs: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = channel_rng(config.seed, i);
            (0..len)
                .map(|n| {
                    let present = match config.scatterers {
                        ScattererModel::Dense => true,
                        ScattererModel::Sparse { density } => rng.random::<f64>() < density,
                    };
                    let amp: f64 = rng.sample(StandardNormal);
                    let amp = if present { amp } else { 0.0 };
                    match &config.inclusion {
                        Some(inc) if inc.contains(i, n) => amp * inc.attenuation,
                        _ => amp,
                    }
                })
                .collect()
        })
        .collect();

    let lb = len / config.blocks;
    let block_psfs: Vec<Vec<f64>> = (1..=config.blocks).map(|b| config.pulse_for_block(b)).collect();
    let full: Vec<Vec<f64>> = trfs
        .par_iter()
        .map(|h| {
            let per_block: Vec<Vec<f64>> = block_psfs
                .iter()
                .map(|s| direct_convolve(s, h))
                .collect::<Result<_>>()?;
            Ok((0..len + config.psf_len - 1)
                .map(|n| per_block[(n / lb).min(config.blocks - 1)][n])
                .collect())
        })
        .collect::<Result<_>>()?;
    let noiseless = RfFrame::new(
        full.iter().map(|c| c[..len].to_vec()).collect(),
        config.sample_rate,
    )?;
    let noisy = match config.snr_db {
        Some(snr) => add_noise(&noiseless, snr, config.seed ^ NOISE_SEED_SALT)?,
        None => noiseless.clone(),
    };
    Ok(GroundTruth {
        trfs,
        psf: block_psfs[0].clone(),
        block_psfs,
        full,
        noiseless,
        noisy,
    })
}

/// White Gaussian noise at `snr_db` relative to the frame's mean power.
/// `+∞` returns the frame unchanged.
pub fn add_noise(frame: &RfFrame, snr_db: f64, seed: u64) -> Result<RfFrame> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("SNR {snr_db} dB is not usable")));
    }
    let power = frame.power();
    if power == 0.0 {
        return Err(Error::invalid("cannot set an SNR on a zero-energy frame"));
    }
    if snr_db == f64::INFINITY {
        return Ok(frame.clone());
    }
    let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noisy = frame
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, ch)| {
            let mut rng = channel_rng(seed, i);
            ch.iter()
                .map(|v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + sd * z
                })
                .collect()
        })
        .collect();
    RfFrame::new(noisy, frame.sample_rate())
}
