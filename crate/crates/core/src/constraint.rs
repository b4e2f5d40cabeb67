//! Correlation-energy constraint against misconvergence.
//!
//! `r_k^b` is block `b` of `x_k * ĥ_k`. Its energy grows as the estimate
//! drifts toward the noise-driven solution, so the solver subtracts
//! `ψ·J_corr^b` from the crossrelation cost with a coupling factor
//! `ψ = ξ·|ρ·log₁₀ J^b|^γ` that shrinks as `J^b` approaches 1.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossrelation::{
    accumulate_conj, energy, frame_spectra, BlockSpectra, DataSpectra, TrfEstimate,
};
use crate::error::{Error, Result};
use crate::signal::{block_decompose, real_part_checked, BlockedSignal, RfFrame};

/// Smallest cost fed to the logarithm inside the solver loop.
pub const COST_CLAMP: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub xi: f64,
    pub rho: f64,
    pub gamma: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            xi: 1e-4,
            rho: 2.55,
            gamma: 2.4,
        }
    }
}

impl ConstraintParams {
    pub fn new(xi: f64, rho: f64, gamma: f64) -> Result<Self> {
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(Error::invalid(format!("xi must be non-negative, got {xi}")));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { xi, rho, gamma })
    }

    /// `ψ` with `J` clamped to [`COST_CLAMP`], for use inside the solver.
    pub(crate) fn coupling_clamped(&self, j: f64) -> f64 {
        if self.xi == 0.0 {
            return 0.0;
        }
        psi(j.max(COST_CLAMP), self)
    }
}

fn psi(j: f64, p: &ConstraintParams) -> f64 {
    p.xi * (p.rho * j.log10()).abs().powf(p.gamma)
}

/// `ψ = ξ·|ρ·log₁₀ J|^γ`.
pub fn coupling_factor(j: f64, params: &ConstraintParams) -> Result<f64> {
    if !(j.is_finite() && j > 0.0) {
        return Err(Error::invalid(format!(
            "coupling factor needs a positive finite cost, got {j}"
        )));
    }
    Ok(psi(j, params))
}

impl DataSpectra {
    /// `F₁·r_k^b`.
    pub(crate) fn correlation(&self, h: &BlockSpectra, k: usize, b: usize) -> Vec<Complex64> {
        let n = self.ops.spectrum_len();
        let (x, hk) = (&self.blocks[k], &h[k]);
        let accumulate = |acc: &mut Vec<Complex64>, p: usize, q: usize| -> bool {
            match (x.get(p - 1), hk.get(q - 1)) {
                (Some(a), Some(c)) => {
                    for t in 0..n {
                        acc[t] += a[t] * c[t];
                    }
                    true
                }
                _ => false,
            }
        };
        let mut tail = vec![Complex64::default(); n];
        let mut head = vec![Complex64::default(); n];
        let mut any_tail = false;
        for p in 1..b {
            any_tail |= accumulate(&mut tail, p, b - p);
        }
        let mut any_head = false;
        for p in 1..=b {
            any_head |= accumulate(&mut head, p, b - p + 1);
        }
        let time = self.ops.fold_block(
            any_tail.then_some(tail.as_slice()),
            any_head.then_some(head.as_slice()),
        );
        self.ops.f1(&time)
    }

    pub(crate) fn correlations(&self, h: &BlockSpectra, b: usize) -> Vec<Vec<Complex64>> {
        (0..self.channels())
            .into_par_iter()
            .map(|k| self.correlation(h, k, b))
            .collect()
    }

    /// Gradient of `Σ_k |F₁ r_k^b|²` with respect to `conj(H_k^q)`,
    /// `q = 1..=nq`.
    pub(crate) fn correlation_gradient(
        &self,
        corr: &[Vec<Complex64>],
        b: usize,
        nq: usize,
    ) -> BlockSpectra {
        let n = self.ops.spectrum_len();
        corr.par_iter()
            .enumerate()
            .map(|(k, r)| {
                let (adj_head, adj_tail) = self.ops.apply_adjoints(r);
                (1..=nq)
                    .map(|q| {
                        let mut g = vec![Complex64::default(); n];
                        if q <= b {
                            if let Some(x) = self.blocks[k].get(b - q) {
                                accumulate_conj(&mut g, x, &adj_head, true);
                            }
                        }
                        if q < b {
                            if let Some(x) = self.blocks[k].get(b - q - 1) {
                                accumulate_conj(&mut g, x, &adj_tail, true);
                            }
                        }
                        g
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_block(h_est: &TrfEstimate, b: usize) -> Result<()> {
    if b == 0 || b > h_est.plan().blocks() {
        return Err(Error::invalid(format!(
            "block index {b} outside 1..={}",
            h_est.plan().blocks()
        )));
    }
    Ok(())
}

/// Block `b` of `x_i * ĥ_i` in the time domain.
pub fn correlation_block(
    frame_blocks: &BlockedSignal,
    h_est: &TrfEstimate,
    b: usize,
    i: usize,
) -> Result<Vec<f64>> {
    check_block(h_est, b)?;
    if frame_blocks.plan() != h_est.plan() {
        return Err(Error::invalid("data and estimate use different block plans"));
    }
    if i >= h_est.channels() {
        return Err(Error::invalid(format!("channel {i} outside 0..{}", h_est.channels())));
    }
    let h_i = crate::signal::block_decompose(&h_est.channel(i), h_est.plan())?;
    crate::signal::blocked_convolve_block(frame_blocks, &h_i, b)
}

/// `J_corr^b = Σ_k |F₁·r_k^b|²`.
pub fn cost_jcorr(frame: &RfFrame, h_est: &TrfEstimate, b: usize) -> Result<f64> {
    check_block(h_est, b)?;
    let data = frame_spectra(h_est, frame)?;
    Ok(energy(&data.correlations(h_est.spectra(), b)))
}

/// Time-domain correlation blocks for every channel.
pub fn correlation_blocks(frame: &RfFrame, h_est: &TrfEstimate, b: usize) -> Result<Vec<Vec<f64>>> {
    check_block(h_est, b)?;
    let data = frame_spectra(h_est, frame)?;
    let lb = h_est.plan().block_len() as f64;
    data.correlations(h_est.spectra(), b)
        .iter()
        .map(|r| {
            let mut t = h_est.transforms().f1_adjoint(r);
            t.iter_mut().for_each(|z| *z /= lb);
            real_part_checked(&t)
        })
        .collect()
}

fn constrained(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    b: usize,
    q: usize,
    k: usize,
    psi: f64,
) -> Result<Vec<Complex64>> {
    check_block(h_est, b)?;
    if k >= h_est.channels() {
        return Err(Error::invalid(format!("channel {k} outside 0..{}", h_est.channels())));
    }
    if !psi.is_finite() {
        return Err(Error::invalid(format!("coupling factor must be finite, got {psi}")));
    }
    let data = frame_spectra(h_est, frame)?;
    let errors = data.errors(h_est.spectra(), b);
    let mut g = data.gradient(&errors, b, b).swap_remove(k).swap_remove(q - 1);
    let corr = data.correlations(h_est.spectra(), b);
    let gc = &data.correlation_gradient(&corr, b, b)[k][q - 1];
    for (a, c) in g.iter_mut().zip(gc) {
        *a -= psi * c;
    }
    Ok(g)
}

/// `∂(J^b − ψ·J_corr^b)/∂conj(H_k^b)` at a frozen `ψ`.
pub fn constrained_gradient_block_b(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    b: usize,
    k: usize,
    psi: f64,
) -> Result<Vec<Complex64>> {
    constrained(h_est, frame, b, b, k, psi)
}

/// `∂(J^b − ψ·J_corr^b)/∂conj(H_k^q)` for `q < b` at a frozen `ψ`.
pub fn constrained_gradient_block_q(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    b: usize,
    q: usize,
    k: usize,
    psi: f64,
) -> Result<Vec<Complex64>> {
    if q == 0 || q >= b {
        return Err(Error::invalid(format!(
            "earlier-block gradient needs 1 <= q < b, got q={q}, b={b}"
        )));
    }
    constrained(h_est, frame, b, q, k, psi)
}

/// Blocked data of one frame channel, for [`correlation_block`].
pub fn channel_blocks(frame: &RfFrame, h_est: &TrfEstimate, i: usize) -> Result<BlockedSignal> {
    block_decompose(frame.channel(i), h_est.plan())
}
