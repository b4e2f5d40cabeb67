//! Re-synthesis of the unmeasured tail and the missing-data refinement.
//!
//! The measured frame stops at `L` samples, but `s * h_i` runs for
//! `L + L_s − 1`. Convolving the estimated pulse with each estimated TRF,
//! rescaled to the measured first block, yields a block `B+1` whose
//! crossrelation error supplies extra equations for every TRF block.

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::{ScaleEstimator, SolverConfig};
use crate::crossrelation::{
    active_npm, energy, frame_spectra, run_phase, BlockSpectra, ErrorBlock, Phase, PhaseSpec,
    SolverRun, TrfEstimate,
};
use crate::error::{Error, Result};
use crate::rmint::{estimate_psf, PsfEstimate};
use crate::signal::{direct_convolve, RfFrame};

/// Samples of the synthesized block below this fraction of its peak are
/// left out of the ratio estimator.
pub const RATIO_GUARD: f64 = 1e-6;

/// Estimated data block `B+1` with the per-channel scales that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingBlock {
    tails: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

impl MissingBlock {
    pub fn new(tails: Vec<Vec<f64>>, scales: Vec<f64>) -> Result<Self> {
        if tails.len() != scales.len() {
            return Err(Error::invalid(format!(
                "{} tails but {} scales",
                tails.len(),
                scales.len()
            )));
        }
        if tails.iter().flatten().chain(&scales).any(|v| !v.is_finite()) {
            return Err(Error::invalid("missing block has non-finite values"));
        }
        Ok(Self { tails, scales })
    }

    /// Block `B+1` of channel `i`, `L_b` samples.
    pub fn tail(&self, i: usize) -> &[f64] {
        &self.tails[i]
    }

    pub fn tails(&self) -> &[Vec<f64>] {
        &self.tails
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

/// `ŝ * ĥ_i` over the full `B·L_b` TRF, `B·L_b + L_s − 1` samples.
pub fn synthesize_rf(psf: &PsfEstimate, h_est: &TrfEstimate, i: usize) -> Result<Vec<f64>> {
    if i >= h_est.channels() {
        return Err(Error::invalid(format!("channel {i} outside 0..{}", h_est.channels())));
    }
    direct_convolve(psf.samples(), &h_est.channel(i))
}

/// Scale `ν` that maps synthesized samples onto observed ones.
pub fn scale_factor(observed: &[f64], synthesized: &[f64], estimator: ScaleEstimator) -> Result<f64> {
    if observed.len() != synthesized.len() || observed.is_empty() {
        return Err(Error::invalid(format!(
            "scale factor needs equal non-empty blocks, got {} and {}",
            observed.len(),
            synthesized.len()
        )));
    }
    let degenerate = |reason: String| Error::DegenerateChannel { channel: 0, reason };
    let nu = match estimator {
        ScaleEstimator::RatioMean => {
            let peak = synthesized.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let floor = RATIO_GUARD * peak;
            let (sum, count) = observed
                .iter()
                .zip(synthesized)
                .filter(|(_, s)| peak > 0.0 && s.abs() > floor)
                .fold((0.0, 0usize), |(sum, n), (o, s)| (sum + o / s, n + 1));
            if count == 0 {
                return Err(degenerate("synthesized block is numerically zero".into()));
            }
            sum / count as f64
        }
        ScaleEstimator::LeastSquares => {
            let ss: f64 = synthesized.iter().map(|v| v * v).sum();
            if ss == 0.0 {
                return Err(degenerate("synthesized block is numerically zero".into()));
            }
            observed.iter().zip(synthesized).map(|(o, s)| o * s).sum::<f64>() / ss
        }
    };
    if !(nu.is_finite() && nu != 0.0) {
        return Err(degenerate(format!("scale factor {nu} is unusable")));
    }
    Ok(nu)
}

fn check_shapes(psf: &PsfEstimate, h_est: &TrfEstimate, frame: &RfFrame) -> Result<()> {
    if frame.channels() != h_est.channels() {
        return Err(Error::invalid(format!(
            "frame has {} channels, estimate has {}",
            frame.channels(),
            h_est.channels()
        )));
    }
    let lb = h_est.plan().block_len();
    if psf.len() > lb {
        return Err(Error::invalid(format!(
            "PSF of {} samples is longer than a block ({lb})",
            psf.len()
        )));
    }
    if frame.len() < h_est.plan().covered_len() {
        return Err(Error::invalid("frame is shorter than the estimate's blocks"));
    }
    Ok(())
}

/// Scaled synthetic tail per channel, zero past its first `L_s − 1` samples.
pub fn missing_block(
    psf: &PsfEstimate,
    h_est: &TrfEstimate,
    frame: &RfFrame,
    estimator: ScaleEstimator,
) -> Result<MissingBlock> {
    check_shapes(psf, h_est, frame)?;
    let lb = h_est.plan().block_len();
    let covered = h_est.plan().covered_len();
    let per_channel: Vec<(Vec<f64>, f64)> = (0..h_est.channels())
        .into_par_iter()
        .map(|i| {
            let x_hat = synthesize_rf(psf, h_est, i)?;
            if x_hat.iter().all(|&v| v == 0.0) {
                warn!("channel {i}: synthesized data is identically zero; tail left at zero");
                return Ok((vec![0.0; lb], 1.0));
            }
            let nu = scale_factor(&frame.channel(i)[..lb], &x_hat[..lb], estimator).map_err(
                |e| match e {
                    Error::DegenerateChannel { reason, .. } => {
                        Error::DegenerateChannel { channel: i, reason }
                    }
                    other => other,
                },
            )?;
            let mut tail = vec![0.0; lb];
            for (t, v) in tail.iter_mut().zip(&x_hat[covered..]) {
                *t = nu * v;
            }
            Ok((tail, nu))
        })
        .collect::<Result<_>>()?;
    let (tails, scales) = per_channel.into_iter().unzip();
    MissingBlock::new(tails, scales)
}

fn check_missing(missing: &MissingBlock, h_est: &TrfEstimate) -> Result<()> {
    if missing.tails().len() != h_est.channels() {
        return Err(Error::invalid(format!(
            "missing block has {} channels, estimate has {}",
            missing.tails().len(),
            h_est.channels()
        )));
    }
    let lb = h_est.plan().block_len();
    if missing.tails().iter().any(|t| t.len() != lb) {
        return Err(Error::invalid(format!("missing block rows must have {lb} samples")));
    }
    Ok(())
}

/// Crossrelation error of block `B+1`, using the estimated data block.
pub fn error_block_bplus1(
    frame: &RfFrame,
    missing: &MissingBlock,
    h_est: &TrfEstimate,
    i: usize,
    j: usize,
) -> Result<ErrorBlock> {
    check_missing(missing, h_est)?;
    if i >= h_est.channels() || j >= h_est.channels() {
        return Err(Error::invalid("channel index out of range"));
    }
    let data = frame_spectra(h_est, frame)?.with_extra_block(missing.tails());
    let b = h_est.plan().blocks() + 1;
    Ok(ErrorBlock {
        i,
        j,
        b,
        spectrum: data.pair_error(h_est.spectra(), i, j, b),
    })
}

/// Weights of the composite missing-data cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub psi: f64,
}

fn check_weights(w: &CompositeWeights) -> Result<()> {
    if !(w.alpha1.is_finite() && w.alpha1 >= 0.0 && w.alpha2.is_finite() && w.alpha2 >= 0.0) {
        return Err(Error::invalid("alpha weights must be non-negative"));
    }
    if !w.psi.is_finite() {
        return Err(Error::invalid("coupling factor must be finite"));
    }
    Ok(())
}

/// `J^{b'} = α₁J^b + α₂J^{B+1} − ψ·J_corr^b`.
pub fn cost_jb_prime(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    missing: &MissingBlock,
    b: usize,
    w: &CompositeWeights,
) -> Result<f64> {
    check_weights(w)?;
    check_missing(missing, h_est)?;
    let nb = h_est.plan().blocks();
    if b == 0 || b > nb {
        return Err(Error::invalid(format!("block index {b} outside 1..={nb}")));
    }
    let data = frame_spectra(h_est, frame)?.with_extra_block(missing.tails());
    let h = h_est.spectra();
    Ok(w.alpha1 * energy(&data.errors(h, b)) + w.alpha2 * energy(&data.errors(h, nb + 1))
        - w.psi * energy(&data.correlations(h, b)))
}

/// Gradient of [`cost_jb_prime`] with respect to `conj(H_k^q)` for every
/// channel and block, with `ψ`, `ν` and the missing block held fixed.
pub fn grad_jb_prime(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    missing: &MissingBlock,
    b: usize,
    w: &CompositeWeights,
) -> Result<BlockSpectra> {
    check_weights(w)?;
    check_missing(missing, h_est)?;
    let nb = h_est.plan().blocks();
    if b == 0 || b > nb {
        return Err(Error::invalid(format!("block index {b} outside 1..={nb}")));
    }
    let data = frame_spectra(h_est, frame)?.with_extra_block(missing.tails());
    Ok(composite_gradient(&data, h_est.spectra(), b, w))
}

fn composite_gradient(
    data: &crate::crossrelation::DataSpectra,
    h: &BlockSpectra,
    b: usize,
    w: &CompositeWeights,
) -> BlockSpectra {
    let nb = data.plan.blocks();
    let g1 = data.gradient(&data.errors(h, b), b, nb);
    let g2 = data.gradient(&data.errors(h, nb + 1), nb + 1, nb);
    let gc = data.correlation_gradient(&data.correlations(h, b), b, nb);
    g1.iter()
        .zip(&g2)
        .zip(&gc)
        .map(|((a, c), r)| {
            a.iter()
                .zip(c)
                .zip(r)
                .map(|((a, c), r)| {
                    a.iter()
                        .zip(c)
                        .zip(r)
                        .map(|((a, c), r)| w.alpha1 * a + w.alpha2 * c - w.psi * r)
                        .collect::<Vec<Complex64>>()
                })
                .collect()
        })
        .collect()
}

/// Output of the missing-data refinement.
#[derive(Debug, Clone)]
pub struct MdRun {
    pub run: SolverRun,
    pub psf: PsfEstimate,
    pub missing: MissingBlock,
}

/// PSF estimation, tail synthesis, then the block loop on the composite
/// cost, starting from a completed block solver estimate.
pub fn run_md_bmcflms(
    frame: &RfFrame,
    config: &SolverConfig,
    warm_start: Option<&TrfEstimate>,
    truth: Option<&[Vec<f64>]>,
) -> Result<MdRun> {
    config.validate()?;
    let warm = warm_start.ok_or_else(|| {
        Error::invalid("the missing-data refinement needs a warm-start estimate")
    })?;
    let psf = estimate_psf(
        frame,
        warm,
        config.psf_len,
        config.delta,
        config.lateral_block.min(frame.channels()),
        config.target_delay,
    )?;
    let missing = missing_block(&psf, warm, frame, config.scale_estimator)?;
    let run = run_md_with_missing(frame, config, warm, &missing, truth)?;
    Ok(MdRun { run, psf, missing })
}

/// The refinement loop with a caller-supplied block `B+1`.
pub fn run_md_with_missing(
    frame: &RfFrame,
    config: &SolverConfig,
    warm_start: &TrfEstimate,
    missing: &MissingBlock,
    truth: Option<&[Vec<f64>]>,
) -> Result<SolverRun> {
    config.validate()?;
    check_missing(missing, warm_start)?;
    let mut est = warm_start.clone().with_all_blocks_active();
    if (est.active_norm() - 1.0).abs() > 1e-12 {
        est.normalize_active()?;
    }
    let data = frame_spectra(&est, frame)?.with_extra_block(missing.tails());
    if let Some(t) = truth {
        // surfaces shape errors before the loop
        active_npm(t, &est)?;
    }
    let params = config.constraint()?;
    let spec = PhaseSpec {
        phase: Phase::MdBmcflms,
        max_iters: config.md_max_iters,
        tol: config.tol,
        constraint: Some(&params),
        weights: Some((config.alpha1, config.alpha2)),
        truth,
    };
    let mut log = Vec::new();
    run_phase(&data, &mut est, &spec, &mut log)?;
    Ok(SolverRun { estimate: est, log })
}
