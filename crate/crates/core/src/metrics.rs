//! Channel misalignment, axial resolution gain and log-compressed envelope
//! images.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};

/// NPM reported when the projection residual vanishes.
pub const NPM_FLOOR_DB: f64 = -300.0;
const NPM_FLOOR_RATIO: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NpmValue {
    /// Decibels; lower is better.
    pub value: f64,
    /// True when the residual was numerically zero and `value` is the floor.
    pub floored: bool,
}

/// Normalized projection misalignment of `h_est` against `h_true`.
///
/// Not symmetric in its arguments: only `h_est` is projected.
pub fn npm(h_true: &[f64], h_est: &[f64]) -> Result<NpmValue> {
    if h_true.len() != h_est.len() {
        return Err(Error::invalid(format!(
            "NPM needs equal lengths, got {} and {}",
            h_true.len(),
            h_est.len()
        )));
    }
    let hh: f64 = h_true.iter().map(|v| v * v).sum();
    let ee: f64 = h_est.iter().map(|v| v * v).sum();
    if hh == 0.0 || ee == 0.0 {
        return Err(Error::invalid("NPM is undefined for a zero vector"));
    }
    let he: f64 = h_true.iter().zip(h_est).map(|(a, b)| a * b).sum();
    let proj = he / ee;
    let resid: f64 = h_true
        .iter()
        .zip(h_est)
        .map(|(a, b)| {
            let z = a - proj * b;
            z * z
        })
        .sum();
    let ratio = (resid / hh).sqrt();
    if ratio <= NPM_FLOOR_RATIO {
        return Ok(NpmValue {
            value: NPM_FLOOR_DB,
            floored: true,
        });
    }
    Ok(NpmValue {
        value: 20.0 * ratio.log10(),
        floored: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RgReport {
    pub level_db: f64,
    /// Axial width of the reference image's autocovariance, samples.
    pub r_o: f64,
    /// Axial width of the deconvolved image's autocovariance, samples.
    pub r_d: f64,
    pub gain: f64,
    /// Set for levels other than 5 and 10 dB.
    pub nonstandard: bool,
}

fn check_image(image: &[Vec<f64>]) -> Result<usize> {
    let len = image.first().map(Vec::len).unwrap_or(0);
    if len == 0 {
        return Err(Error::invalid("image is empty"));
    }
    if image.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("image channels differ in length"));
    }
    if image.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image has non-finite samples"));
    }
    Ok(len)
}

/// Zero-lateral-lag slice of the mean-removed, biased 2-D autocovariance,
/// normalized to unit peak. Index `L − 1` is lag 0.
pub fn axial_autocovariance(image: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = check_image(image)?;
    let count = (image.len() * len) as f64;
    let mean = image.iter().flatten().sum::<f64>() / count;
    let centered: Vec<Vec<f64>> = image
        .iter()
        .map(|c| c.iter().map(|v| v - mean).collect())
        .collect();
    let per_channel: Vec<Vec<f64>> = centered
        .par_iter()
        .map(|c| {
            (0..len)
                .map(|lag| (0..len - lag).map(|n| c[n] * c[n + lag]).sum())
                .collect()
        })
        .collect();
    let mut half = vec![0.0; len];
    for c in &per_channel {
        for (acc, v) in half.iter_mut().zip(c) {
            *acc += v;
        }
    }
    let peak = half[0];
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::invalid("image has zero variance"));
    }
    let mut slice = Vec::with_capacity(2 * len - 1);
    slice.extend(half.iter().skip(1).rev().map(|v| v / peak));
    slice.extend(half.iter().map(|v| v / peak));
    Ok(slice)
}

/// Width of a unit-peak slice where it first falls below `10^(−d/20)` on
/// each side of the peak, with linear interpolation between samples.
pub fn width_at_level(slice: &[f64], level_db: f64) -> Result<f64> {
    if slice.is_empty() {
        return Err(Error::invalid("empty slice"));
    }
    if !(level_db.is_finite() && level_db > 0.0) {
        return Err(Error::invalid(format!("level must be positive dB, got {level_db}")));
    }
    let level = 10f64.powf(-level_db / 20.0);
    let peak = slice
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > slice[best] { i } else { best });
    let reach = |dir: isize| -> Result<f64> {
        let mut prev = slice[peak];
        let mut i = peak as isize;
        loop {
            let next = i + dir;
            if next < 0 || next as usize >= slice.len() {
                return Err(Error::invalid(format!(
                    "slice never falls to -{level_db} dB"
                )));
            }
            let v = slice[next as usize];
            if v < level {
                let frac = (prev - level) / (prev - v);
                return Ok((i - peak as isize).unsigned_abs() as f64 + frac);
            }
            prev = v;
            i = next;
        }
    };
    Ok(reach(-1)? + reach(1)?)
}

/// `G_d = R_o / R_d` from the axial autocovariance widths of a reference
/// (RF or envelope) image and its deconvolved counterpart.
pub fn resolution_gain(rf_image: &[Vec<f64>], trf_image: &[Vec<f64>], d: f64) -> Result<RgReport> {
    let r_o = width_at_level(&axial_autocovariance(rf_image)?, d)?;
    let r_d = width_at_level(&axial_autocovariance(trf_image)?, d)?;
    Ok(RgReport {
        level_db: d,
        r_o,
        r_d,
        gain: r_o / r_d,
        nonstandard: d != 5.0 && d != 10.0,
    })
}

/// Magnitude of the analytic signal, from a DFT-domain Hilbert transform.
pub fn envelope(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n == 0 {
        return Err(Error::invalid("cannot take the envelope of an empty signal"));
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let w = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *z *= w;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|z| z.norm() / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compression {
    Fixed(f64),
    /// Chooses `c` so the 99th-percentile envelope maps to 0.9 of the
    /// brightest pixel.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogImage {
    /// Channel-major, one row per channel.
    pub pixels: Vec<Vec<f64>>,
    pub c: f64,
}

/// `log(c·env + 1)` of every channel's envelope.
pub fn envelope_log_image(data: &[Vec<f64>], compression: Compression) -> Result<LogImage> {
    check_image(data)?;
    let env: Vec<Vec<f64>> = data
        .par_iter()
        .map(|c| envelope(c))
        .collect::<Result<_>>()?;
    let c = match compression {
        Compression::Fixed(c) => {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::invalid(format!("compression constant must be >= 0, got {c}")));
            }
            c
        }
        Compression::Auto => auto_compression(&env),
    };
    let pixels = env
        .iter()
        .map(|ch| ch.iter().map(|v| (c * v).ln_1p()).collect())
        .collect();
    Ok(LogImage { pixels, c })
}

fn auto_compression(env: &[Vec<f64>]) -> f64 {
    let mut all: Vec<f64> = env.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let max = *all.last().unwrap_or(&0.0);
    if max <= 0.0 {
        return 1.0;
    }
    let rank = ((0.99 * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
    let p = all[rank] / max;
    const TARGET: f64 = 0.9;
    if p >= TARGET {
        return 1.0 / max;
    }
    // ratio(t) = ln(1 + t·p)/ln(1 + t) rises from p to 1 as t = c·max grows
    let ratio = |t: f64| (t * p).ln_1p() / t.ln_1p();
    let (mut lo, mut hi) = (1e-6f64.ln(), 1e15f64.ln());
    if ratio(hi.exp()) < TARGET {
        return hi.exp() / max;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid.exp()) < TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp() / max
}
