//! Block-wise crossrelation error, its cost and gradients, the variable
//! step-size rule, and the sequential block solver.
//!
//! All costs and gradients are evaluated on spectra. For channels `i, j` and
//! block `b` the error spectrum is
//!
//! ```text
//! E_ij^b = B₁·Σ_{p<b} (X_i^p H_j^{b−p} − X_j^p H_i^{b−p})
//!        + B ·Σ_{p≤b} (X_i^p H_j^{b−p+1} − X_j^p H_i^{b−p+1})
//! ```
//!
//! and the gradient with respect to `conj(H_k^q)` is
//! `Σ_i conj(X_i^{b−q+1})·Bᴴ E_ik + conj(X_i^{b−q})·B₁ᴴ E_ik`.
//! Blocks missing on either side of a product (TRF block `B+1`, data blocks
//! past the end) contribute nothing.

use std::collections::BTreeMap;

use log::debug;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::SolverConfig;
use crate::constraint::ConstraintParams;
use crate::error::{Error, Result};
use crate::metrics;
use crate::signal::{
    block_decompose, real_part_checked, BlockPlan, BlockTransforms, BlockedSignal, RfFrame,
};

/// Per-channel, per-block spectra, indexed `[channel][block − 1]`.
pub type BlockSpectra = Vec<Vec<Vec<Complex64>>>;

/// Gradient norms below this are treated as a stationary point.
pub const GRADIENT_FLOOR: f64 = 1e-30;

/// Current TRF estimate: time coefficients and cached zero-padded spectra
/// for every channel and block.
#[derive(Debug, Clone)]
pub struct TrfEstimate {
    ops: BlockTransforms,
    plan: BlockPlan,
    coeffs: Vec<Vec<Vec<f64>>>,
    spectra: BlockSpectra,
    active_blocks: usize,
}

impl TrfEstimate {
    /// Unit impulse at the first sample of every channel, scaled to a global
    /// norm of one.
    pub fn initial(channels: usize, plan: BlockPlan) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("estimate needs at least one channel"));
        }
        let lb = plan.block_len();
        let mut coeffs = vec![vec![vec![0.0; lb]; plan.blocks()]; channels];
        let amp = 1.0 / (channels as f64).sqrt();
        for ch in &mut coeffs {
            ch[0][0] = amp;
        }
        Ok(Self::from_parts(plan, coeffs, 1))
    }

    /// Estimate holding the first `B·L_b` samples of each given channel.
    /// No normalization is applied.
    pub fn from_channels(trfs: &[Vec<f64>], plan: BlockPlan, active_blocks: usize) -> Result<Self> {
        if trfs.is_empty() {
            return Err(Error::invalid("estimate needs at least one channel"));
        }
        if active_blocks == 0 || active_blocks > plan.blocks() {
            return Err(Error::invalid(format!(
                "active block count {active_blocks} outside 1..={}",
                plan.blocks()
            )));
        }
        let mut coeffs = Vec::with_capacity(trfs.len());
        for (k, t) in trfs.iter().enumerate() {
            if t.len() < plan.covered_len() {
                return Err(Error::invalid(format!(
                    "channel {k} has {} coefficients, the plan needs {}",
                    t.len(),
                    plan.covered_len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("channel {k} has non-finite coefficients")));
            }
            coeffs.push(
                t[..plan.covered_len()]
                    .chunks(plan.block_len())
                    .map(<[f64]>::to_vec)
                    .collect(),
            );
        }
        Ok(Self::from_parts(plan, coeffs, active_blocks))
    }

    fn from_parts(plan: BlockPlan, coeffs: Vec<Vec<Vec<f64>>>, active_blocks: usize) -> Self {
        let ops = BlockTransforms::new(plan.block_len());
        let spectra = coeffs
            .iter()
            .map(|ch| ch.iter().map(|blk| ops.block_spectrum(blk)).collect())
            .collect();
        Self {
            ops,
            plan,
            coeffs,
            spectra,
            active_blocks,
        }
    }

    pub fn plan(&self) -> &BlockPlan {
        &self.plan
    }

    pub fn channels(&self) -> usize {
        self.coeffs.len()
    }

    pub fn active_blocks(&self) -> usize {
        self.active_blocks
    }

    /// Time coefficients of channel `k`, block `q` (1-indexed).
    pub fn block(&self, k: usize, q: usize) -> &[f64] {
        &self.coeffs[k][q - 1]
    }

    /// Cached spectrum of channel `k`, block `q` (1-indexed).
    pub fn spectrum(&self, k: usize, q: usize) -> &[Complex64] {
        &self.spectra[k][q - 1]
    }

    /// All `B·L_b` coefficients of channel `k`.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.coeffs[k].iter().flatten().copied().collect()
    }

    /// Coefficients of channel `k` over the active blocks.
    pub fn channel_active(&self, k: usize) -> Vec<f64> {
        self.coeffs[k][..self.active_blocks]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Active-block coefficients of every channel, channel-major.
    pub fn stacked_active(&self) -> Vec<f64> {
        (0..self.channels())
            .flat_map(|k| self.channel_active(k))
            .collect()
    }

    pub fn active_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|ch| ch[..self.active_blocks].iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy with every coefficient multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|ch| {
                ch.iter()
                    .map(|blk| blk.iter().map(|v| v * alpha).collect())
                    .collect()
            })
            .collect();
        Self::from_parts(self.plan, coeffs, self.active_blocks)
    }

    /// Marks every block as active without changing coefficients.
    pub fn with_all_blocks_active(mut self) -> Self {
        self.active_blocks = self.plan.blocks();
        self
    }

    pub(crate) fn spectra(&self) -> &BlockSpectra {
        &self.spectra
    }

    pub(crate) fn transforms(&self) -> &BlockTransforms {
        &self.ops
    }

    /// `H_k^b ← H_k^b − μ·G_k`, projected back onto `L_b` real taps, then
    /// joint renormalization of the active blocks.
    pub(crate) fn apply_update(
        &mut self,
        grads: &[&[Complex64]],
        mu: f64,
        b: usize,
    ) -> Result<()> {
        if !mu.is_finite() {
            return Err(Error::numerical(format!("step size is not finite ({mu})")));
        }
        let lb = self.plan.block_len();
        for (k, g) in grads.iter().enumerate() {
            let stepped: Vec<Complex64> = self.spectra[k][b - 1]
                .iter()
                .zip(g.iter())
                .map(|(h, g)| h - mu * g)
                .collect();
            let time = real_part_checked(&self.ops.f2_inverse(&stepped))?;
            if time.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "channel {k} block {b} became non-finite"
                )));
            }
            self.coeffs[k][b - 1].copy_from_slice(&time[..lb]);
        }
        self.active_blocks = self.active_blocks.max(b);
        self.normalize_active()
    }

    pub(crate) fn normalize_active(&mut self) -> Result<()> {
        let norm = self.active_norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::numerical(format!(
                "cannot normalize estimate with norm {norm}"
            )));
        }
        let inv = 1.0 / norm;
        let active = self.active_blocks;
        for (ch, spec) in self.coeffs.iter_mut().zip(self.spectra.iter_mut()) {
            for (blk, s) in ch[..active].iter_mut().zip(spec.iter_mut()) {
                blk.iter_mut().for_each(|v| *v *= inv);
                *s = self.ops.block_spectrum(blk);
            }
        }
        Ok(())
    }

    pub(crate) fn set_active_blocks(&mut self, active: usize) {
        self.active_blocks = active;
    }
}

/// Data block spectra of a frame, optionally extended by an estimated
/// block `B+1`.
pub(crate) struct DataSpectra {
    pub(crate) ops: BlockTransforms,
    pub(crate) plan: BlockPlan,
    pub(crate) blocks: BlockSpectra,
    pairs: Vec<(usize, usize)>,
}

impl DataSpectra {
    pub(crate) fn new(frame: &RfFrame, plan: &BlockPlan, ops: &BlockTransforms) -> Result<Self> {
        let mut blocks = Vec::with_capacity(frame.channels());
        for ch in frame.samples() {
            let blk = block_decompose(ch, plan)?;
            blocks.push(blk.blocks().iter().map(|b| ops.block_spectrum(b)).collect());
        }
        let m = frame.channels();
        let pairs = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .collect();
        Ok(Self {
            ops: ops.clone(),
            plan: *plan,
            blocks,
            pairs,
        })
    }

    /// Appends one estimated data block per channel after block `B`.
    pub(crate) fn with_extra_block(mut self, tails: &[Vec<f64>]) -> Self {
        for (ch, tail) in self.blocks.iter_mut().zip(tails) {
            ch.truncate(self.plan.blocks());
            ch.push(self.ops.block_spectrum(tail));
        }
        self
    }

    pub(crate) fn channels(&self) -> usize {
        self.blocks.len()
    }

    /// `F₁`-domain error of pair `(i, j)` for block `b`.
    pub(crate) fn pair_error(&self, h: &BlockSpectra, i: usize, j: usize, b: usize) -> Vec<Complex64> {
        let n = self.ops.spectrum_len();
        let (xi, xj) = (&self.blocks[i], &self.blocks[j]);
        let (hi, hj) = (&h[i], &h[j]);
        let accumulate = |acc: &mut Vec<Complex64>, p: usize, q: usize| -> bool {
            match (xi.get(p - 1), xj.get(p - 1), hi.get(q - 1), hj.get(q - 1)) {
                (Some(a), Some(c), Some(hi), Some(hj)) => {
                    for t in 0..n {
                        acc[t] += a[t] * hj[t] - c[t] * hi[t];
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

    /// Error spectra of every pair `i < j`, lexicographic.
    pub(crate) fn errors(&self, h: &BlockSpectra, b: usize) -> Vec<Vec<Complex64>> {
        self.pairs
            .par_iter()
            .map(|&(i, j)| self.pair_error(h, i, j, b))
            .collect()
    }

    /// Gradient of `Σ_{i<j} |E_ij^b|²` with respect to `conj(H_k^q)` for
    /// every channel and `q = 1..=nq`.
    pub(crate) fn gradient(&self, errors: &[Vec<Complex64>], b: usize, nq: usize) -> BlockSpectra {
        let adjoints: Vec<(Vec<Complex64>, Vec<Complex64>)> = errors
            .par_iter()
            .map(|e| self.ops.apply_adjoints(e))
            .collect();
        let m = self.channels();
        let n = self.ops.spectrum_len();
        (0..m)
            .into_par_iter()
            .map(|k| {
                (1..=nq)
                    .map(|q| {
                        let mut g = vec![Complex64::default(); n];
                        for i in (0..m).filter(|&i| i != k) {
                            let (idx, positive) = if i < k {
                                (pair_index(m, i, k), true)
                            } else {
                                (pair_index(m, k, i), false)
                            };
                            let (adj_head, adj_tail) = &adjoints[idx];
                            if q <= b {
                                if let Some(x) = self.blocks[i].get(b - q) {
                                    accumulate_conj(&mut g, x, adj_head, positive);
                                }
                            }
                            if q < b {
                                if let Some(x) = self.blocks[i].get(b - q - 1) {
                                    accumulate_conj(&mut g, x, adj_tail, positive);
                                }
                            }
                        }
                        g
                    })
                    .collect()
            })
            .collect()
    }
}

/// `g ± conj(x)·a`, elementwise.
pub(crate) fn accumulate_conj(g: &mut [Complex64], x: &[Complex64], a: &[Complex64], positive: bool) {
    if positive {
        for ((g, x), a) in g.iter_mut().zip(x).zip(a) {
            *g += x.conj() * a;
        }
    } else {
        for ((g, x), a) in g.iter_mut().zip(x).zip(a) {
            *g -= x.conj() * a;
        }
    }
}

/// Position of pair `(i, j)`, `i < j`, in lexicographic order.
pub(crate) fn pair_index(m: usize, i: usize, j: usize) -> usize {
    i * (2 * m - i - 1) / 2 + (j - i - 1)
}

/// `Σ |v|²` in order.
pub(crate) fn energy(v: &[Vec<Complex64>]) -> f64 {
    v.iter()
        .map(|e| e.iter().map(Complex64::norm_sqr).sum::<f64>())
        .sum()
}

/// Transformed crossrelation error of one channel pair and block.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBlock {
    pub i: usize,
    pub j: usize,
    pub b: usize,
    /// `F₁·ẽ_ij^b`, length `L_b`.
    pub spectrum: Vec<Complex64>,
}

impl ErrorBlock {
    /// `ẽ_ij^b` in the time domain.
    pub fn time(&self) -> Result<Vec<f64>> {
        let mut buf = self.spectrum.clone();
        rustfft::FftPlanner::new()
            .plan_fft_inverse(buf.len())
            .process(&mut buf);
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
        real_part_checked(&buf)
    }

    pub fn energy(&self) -> f64 {
        self.spectrum.iter().map(Complex64::norm_sqr).sum()
    }
}

fn check_frame(h_est: &TrfEstimate, frame: &RfFrame) -> Result<()> {
    if frame.channels() != h_est.channels() {
        return Err(Error::invalid(format!(
            "frame has {} channels, estimate has {}",
            frame.channels(),
            h_est.channels()
        )));
    }
    let plan = BlockPlan::new(frame.len(), h_est.plan().blocks())?;
    if plan != *h_est.plan() {
        return Err(Error::invalid(format!(
            "frame of {} samples does not match the estimate's plan {:?}",
            frame.len(),
            h_est.plan()
        )));
    }
    Ok(())
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

fn check_channel(h_est: &TrfEstimate, k: usize) -> Result<()> {
    if k >= h_est.channels() {
        return Err(Error::invalid(format!(
            "channel {k} outside 0..{}",
            h_est.channels()
        )));
    }
    Ok(())
}

pub(crate) fn frame_spectra(h_est: &TrfEstimate, frame: &RfFrame) -> Result<DataSpectra> {
    check_frame(h_est, frame)?;
    DataSpectra::new(frame, h_est.plan(), h_est.transforms())
}

/// Spectrum of the `(p, q)` error component
/// `x_i^p * ĥ_j^q − x_j^p * ĥ_i^q` (length `2·L_b − 1`).
pub fn error_component(
    x_i: &BlockedSignal,
    x_j: &BlockedSignal,
    h_est: &TrfEstimate,
    i: usize,
    j: usize,
    p: usize,
    q: usize,
) -> Result<Vec<Complex64>> {
    if x_i.plan() != h_est.plan() || x_j.plan() != h_est.plan() {
        return Err(Error::invalid("data and estimate use different block plans"));
    }
    check_channel(h_est, i)?;
    check_channel(h_est, j)?;
    let nb = h_est.plan().blocks();
    if p == 0 || p > nb || q == 0 || q > nb {
        return Err(Error::invalid(format!(
            "component ({p}, {q}) outside 1..={nb}"
        )));
    }
    let ops = h_est.transforms();
    let xi = ops.block_spectrum(x_i.block(p));
    let xj = ops.block_spectrum(x_j.block(p));
    let (hi, hj) = (h_est.spectrum(i, q), h_est.spectrum(j, q));
    Ok((0..ops.spectrum_len())
        .map(|t| xi[t] * hj[t] - xj[t] * hi[t])
        .collect())
}

/// Sums error components into the transformed block error: tails of the
/// `(p, b−p)` components and heads of the `(p, b−p+1)` components.
pub fn assemble_error_block(
    ops: &BlockTransforms,
    i: usize,
    j: usize,
    b: usize,
    components: &BTreeMap<(usize, usize), Vec<Complex64>>,
) -> Result<ErrorBlock> {
    if b == 0 {
        return Err(Error::invalid("block index starts at 1"));
    }
    let n = ops.spectrum_len();
    let fetch = |p: usize, q: usize| -> Result<&Vec<Complex64>> {
        let c = components.get(&(p, q)).ok_or_else(|| {
            Error::InvalidState(format!("error component ({p}, {q}) missing for block {b}"))
        })?;
        if c.len() != n {
            return Err(Error::invalid(format!(
                "component ({p}, {q}) has length {}, expected {n}",
                c.len()
            )));
        }
        Ok(c)
    };
    let mut tail = vec![Complex64::default(); n];
    for p in 1..b {
        for (a, v) in tail.iter_mut().zip(fetch(p, b - p)?) {
            *a += v;
        }
    }
    let mut head = vec![Complex64::default(); n];
    for p in 1..=b {
        for (a, v) in head.iter_mut().zip(fetch(p, b - p + 1)?) {
            *a += v;
        }
    }
    let time = ops.fold_block((b > 1).then_some(tail.as_slice()), Some(&head));
    Ok(ErrorBlock {
        i,
        j,
        b,
        spectrum: ops.f1(&time),
    })
}

/// Transformed crossrelation error `F₁·ẽ_ij^b` of one pair.
pub fn error_block(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    i: usize,
    j: usize,
    b: usize,
) -> Result<ErrorBlock> {
    check_block(h_est, b)?;
    check_channel(h_est, i)?;
    check_channel(h_est, j)?;
    let data = frame_spectra(h_est, frame)?;
    Ok(ErrorBlock {
        i,
        j,
        b,
        spectrum: data.pair_error(h_est.spectra(), i, j, b),
    })
}

/// `J^b = Σ_{i<j} |F₁·ẽ_ij^b|²`.
pub fn cost_jb(h_est: &TrfEstimate, frame: &RfFrame, b: usize) -> Result<f64> {
    check_block(h_est, b)?;
    let data = frame_spectra(h_est, frame)?;
    Ok(energy(&data.errors(h_est.spectra(), b)))
}

/// `∂J^b/∂conj(H_k^b)`.
pub fn grad_jb_block_b(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    b: usize,
    k: usize,
) -> Result<Vec<Complex64>> {
    check_block(h_est, b)?;
    check_channel(h_est, k)?;
    let data = frame_spectra(h_est, frame)?;
    let errors = data.errors(h_est.spectra(), b);
    Ok(data.gradient(&errors, b, b).swap_remove(k).swap_remove(b - 1))
}

/// `∂J^b/∂conj(H_k^q)` for an earlier block `q < b`.
pub fn grad_jb_block_q(
    h_est: &TrfEstimate,
    frame: &RfFrame,
    b: usize,
    q: usize,
    k: usize,
) -> Result<Vec<Complex64>> {
    check_block(h_est, b)?;
    check_channel(h_est, k)?;
    if q == 0 || q >= b {
        return Err(Error::invalid(format!(
            "earlier-block gradient needs 1 <= q < b, got q={q}, b={b}"
        )));
    }
    let data = frame_spectra(h_est, frame)?;
    let errors = data.errors(h_est.spectra(), b);
    Ok(data.gradient(&errors, b, b).swap_remove(k).swap_remove(q - 1))
}

/// Result of the variable step-size rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub mu: f64,
    /// Set when the gradient vanished; `mu` is then 0.
    pub converged: bool,
}

/// `μ = Re⟨ĥ, ∇J⟩ / ‖∇J‖²` over stacked vectors.
pub fn variable_step_size(estimate: &[Complex64], gradient: &[Complex64]) -> StepSize {
    step_over(std::iter::once((estimate, gradient)))
}

pub(crate) fn step_over<'a>(
    parts: impl Iterator<Item = (&'a [Complex64], &'a [Complex64])>,
) -> StepSize {
    let mut num = 0.0;
    let mut den = 0.0;
    for (h, g) in parts {
        for (h, g) in h.iter().zip(g) {
            num += h.re * g.re + h.im * g.im;
            den += g.norm_sqr();
        }
    }
    if den < GRADIENT_FLOOR {
        StepSize {
            mu: 0.0,
            converged: true,
        }
    } else {
        StepSize {
            mu: num / den,
            converged: false,
        }
    }
}

/// One descent step on block `b` followed by support projection and
/// normalization of the active blocks.
pub fn update_and_normalize(
    h_est: &TrfEstimate,
    gradients: &[Vec<Complex64>],
    mu: f64,
    b: usize,
) -> Result<TrfEstimate> {
    check_block(h_est, b)?;
    if gradients.len() != h_est.channels() {
        return Err(Error::invalid(format!(
            "{} gradients for {} channels",
            gradients.len(),
            h_est.channels()
        )));
    }
    let n = h_est.plan().spectrum_len();
    if let Some(g) = gradients.iter().find(|g| g.len() != n) {
        return Err(Error::invalid(format!(
            "gradient of length {}, expected {n}",
            g.len()
        )));
    }
    let mut out = h_est.clone();
    let refs: Vec<&[Complex64]> = gradients.iter().map(Vec::as_slice).collect();
    out.apply_update(&refs, mu, b)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Bmcflms,
    MdBmcflms,
}

/// One solver iteration, describing the iterate before its update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub phase: Phase,
    pub block: usize,
    pub iter: usize,
    /// Crossrelation part of the cost (`J^b`, or `α₁J^b + α₂J^{B+1}`).
    pub cost: f64,
    /// What the step minimizes: the cost minus `ψ·J_corr^b`.
    pub objective: f64,
    pub mu: f64,
    pub psi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub npm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    pub estimate: TrfEstimate,
    pub log: Vec<IterationRecord>,
}

pub(crate) struct PhaseSpec<'a> {
    pub phase: Phase,
    pub max_iters: usize,
    pub tol: f64,
    pub constraint: Option<&'a ConstraintParams>,
    /// `(α₁, α₂)` for the missing-data cost; `None` for plain `J^b`.
    pub weights: Option<(f64, f64)>,
    pub truth: Option<&'a [Vec<f64>]>,
}

fn check_truth(truth: Option<&[Vec<f64>]>, est: &TrfEstimate) -> Result<()> {
    if let Some(t) = truth {
        if t.len() != est.channels() {
            return Err(Error::invalid(format!(
                "truth has {} channels, estimate has {}",
                t.len(),
                est.channels()
            )));
        }
        if let Some(k) = t.iter().position(|c| c.len() < est.plan().covered_len()) {
            return Err(Error::invalid(format!(
                "truth channel {k} is shorter than {} samples",
                est.plan().covered_len()
            )));
        }
    }
    Ok(())
}

/// NPM of the active blocks of `est` against the same span of `truth`.
pub(crate) fn active_npm(truth: &[Vec<f64>], est: &TrfEstimate) -> Result<f64> {
    let span = est.active_blocks() * est.plan().block_len();
    let h: Vec<f64> = truth.iter().flat_map(|c| c[..span].iter().copied()).collect();
    Ok(metrics::npm(&h, &est.stacked_active())?.value)
}

/// Block-sequential descent shared by both solvers.
pub(crate) fn run_phase(
    data: &DataSpectra,
    est: &mut TrfEstimate,
    spec: &PhaseSpec<'_>,
    log: &mut Vec<IterationRecord>,
) -> Result<()> {
    let nb = est.plan().blocks();
    for b in 1..=nb {
        let nq = if spec.weights.is_some() { nb } else { b };
        est.set_active_blocks(est.active_blocks().max(b));
        let mut history: Vec<f64> = Vec::new();
        for m in 0..spec.max_iters {
            let done = iterate(data, est, spec, b, nq, m, &mut history, log).map_err(|e| match e {
                Error::NumericalFailure(msg) => Error::NumericalFailure(format!(
                    "block {b}, iteration {m}: {msg}"
                )),
                other => other,
            })?;
            if done {
                debug!("{:?} block {b} stopped after {} iterations", spec.phase, m + 1);
                break;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    data: &DataSpectra,
    est: &mut TrfEstimate,
    spec: &PhaseSpec<'_>,
    b: usize,
    nq: usize,
    m: usize,
    history: &mut Vec<f64>,
    log: &mut Vec<IterationRecord>,
) -> Result<bool> {
    let nb = est.plan().blocks();
    let errors = data.errors(est.spectra(), b);
    let jb = energy(&errors);
    let mut grad = data.gradient(&errors, b, nq);
    let mut cost = jb;
    if let Some((a1, a2)) = spec.weights {
        cost = a1 * jb;
        scale_in_place(&mut grad, a1);
        if a2 != 0.0 {
            let extra = data.errors(est.spectra(), nb + 1);
            cost += a2 * energy(&extra);
            let g2 = data.gradient(&extra, nb + 1, nq);
            axpy_in_place(&mut grad, a2, &g2);
        }
    }
    let mut objective = cost;
    let mut psi = 0.0;
    if let Some(params) = spec.constraint {
        psi = params.coupling_clamped(jb);
        if psi != 0.0 {
            let corr = data.correlations(est.spectra(), b);
            let jc = energy(&corr);
            let gc = data.correlation_gradient(&corr, b, nq);
            axpy_in_place(&mut grad, -psi, &gc);
            objective = cost - psi * jc;
        }
    }
    if !(cost.is_finite() && objective.is_finite()) {
        return Err(Error::numerical(format!("cost is not finite ({cost})")));
    }
    let step = step_over(
        est.spectra()
            .iter()
            .zip(&grad)
            .flat_map(|(h, g)| h[..nq].iter().zip(g).map(|(h, g)| (h.as_slice(), g.as_slice()))),
    );
    let npm = match spec.truth {
        Some(t) => Some(active_npm(t, est)?),
        None => None,
    };
    log.push(IterationRecord {
        phase: spec.phase,
        block: b,
        iter: m,
        cost,
        objective,
        mu: step.mu,
        psi,
        npm,
    });
    if step.converged {
        return Ok(true);
    }
    history.push(cost);
    if m >= 5 {
        let prev = history[m - 5];
        if (cost - prev).abs() < spec.tol * prev.abs() {
            return Ok(true);
        }
    }
    let block_grads: Vec<&[Complex64]> = grad.iter().map(|g| g[b - 1].as_slice()).collect();
    est.apply_update(&block_grads, step.mu, b)?;
    Ok(false)
}

fn scale_in_place(g: &mut BlockSpectra, a: f64) {
    g.iter_mut()
        .flatten()
        .flatten()
        .for_each(|v| *v *= a);
}

/// `g += a·h`.
fn axpy_in_place(g: &mut BlockSpectra, a: f64, h: &BlockSpectra) {
    for (gk, hk) in g.iter_mut().zip(h) {
        for (gq, hq) in gk.iter_mut().zip(hk) {
            for (x, y) in gq.iter_mut().zip(hq) {
                *x += a * y;
            }
        }
    }
}

/// Block-sequential blind TRF estimation from an impulse initialization.
///
/// `constraint` enables the correlation-energy term; `truth` adds NPM to
/// each log row.
pub fn run_bmcflms(
    frame: &RfFrame,
    config: &SolverConfig,
    constraint: Option<&ConstraintParams>,
    truth: Option<&[Vec<f64>]>,
) -> Result<SolverRun> {
    config.validate()?;
    let plan = BlockPlan::new(frame.len(), config.blocks)?;
    let init = TrfEstimate::initial(frame.channels(), plan)?;
    run_bmcflms_from(frame, config, constraint, truth, init)
}

/// Same as [`run_bmcflms`] but continuing from an existing estimate.
pub fn run_bmcflms_from(
    frame: &RfFrame,
    config: &SolverConfig,
    constraint: Option<&ConstraintParams>,
    truth: Option<&[Vec<f64>]>,
    init: TrfEstimate,
) -> Result<SolverRun> {
    config.validate()?;
    if frame.channels() < 2 {
        return Err(Error::invalid("crossrelation needs at least 2 channels"));
    }
    let mut est = init;
    let data = frame_spectra(&est, frame)?;
    check_truth(truth, &est)?;
    let mut log = Vec::new();
    let spec = PhaseSpec {
        phase: Phase::Bmcflms,
        max_iters: config.max_iters,
        tol: config.tol,
        constraint,
        weights: None,
        truth,
    };
    run_phase(&data, &mut est, &spec, &mut log)?;
    Ok(SolverRun { estimate: est, log })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::signal::{apply_a1, apply_a2, direct_convolve, dft_forward};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Noiseless SIMO frame with random pulse and TRFs.
    pub(crate) fn synthetic(
        seed: u64,
        m: usize,
        len: usize,
        ls: usize,
    ) -> (RfFrame, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = randn(&mut rng, ls);
        let h: Vec<Vec<f64>> = (0..m).map(|_| randn(&mut rng, len)).collect();
        let x = h
            .iter()
            .map(|hi| direct_convolve(&s, hi).unwrap()[..len].to_vec())
            .collect();
        (RfFrame::new(x, 1.0).unwrap(), h, s)
    }

    pub(crate) fn random_estimate(rng: &mut ChaCha8Rng, m: usize, plan: BlockPlan) -> TrfEstimate {
        let ch: Vec<Vec<f64>> = (0..m).map(|_| randn(rng, plan.covered_len())).collect();
        TrfEstimate::from_channels(&ch, plan, plan.blocks()).unwrap()
    }

    pub(crate) fn random_spectra(rng: &mut ChaCha8Rng, m: usize, nb: usize, n: usize) -> BlockSpectra {
        (0..m)
            .map(|_| {
                (0..nb)
                    .map(|_| {
                        (0..n)
                            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Time-domain block `b` of the truncated crossrelation `x_i*h_j − x_j*h_i`.
    fn brute_error(frame: &RfFrame, h: &[Vec<f64>], i: usize, j: usize, b: usize, lb: usize) -> Vec<f64> {
        let len = h[0].len();
        let a = direct_convolve(&frame.channel(i)[..len], &h[j]).unwrap();
        let c = direct_convolve(&frame.channel(j)[..len], &h[i]).unwrap();
        ((b - 1) * lb..b * lb).map(|t| a[t] - c[t]).collect()
    }

    /// Central differences of `f` over Re and Im of every bin of `h[k][q]`;
    /// returns the Wirtinger estimate `½(∂Re + i∂Im)`.
    pub(crate) fn fd_wirtinger(
        f: &dyn Fn(&BlockSpectra) -> f64,
        h: &BlockSpectra,
        k: usize,
        q: usize,
    ) -> Vec<Complex64> {
        let step = 1e-6;
        (0..h[k][q].len())
            .map(|t| {
                let mut d = [0.0; 2];
                for (c, unit) in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)].iter().enumerate() {
                    let mut hp = h.clone();
                    hp[k][q][t] += unit * step;
                    let mut hm = h.clone();
                    hm[k][q][t] -= unit * step;
                    d[c] = (f(&hp) - f(&hm)) / (2.0 * step);
                }
                Complex64::new(0.5 * d[0], 0.5 * d[1])
            })
            .collect()
    }

    pub(crate) fn assert_grad_close(analytic: &[Complex64], numeric: &[Complex64]) {
        let scale = analytic.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, n) in analytic.iter().zip(numeric) {
            for (x, y) in [(a.re, n.re), (a.im, n.im)] {
                if x.abs() > 1e-8 {
                    let rel = (x - y).abs() / x.abs().max(1e-3 * scale);
                    assert!(rel < 1e-5, "analytic {x} numeric {y} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn zero_cost_and_gradient_at_truth() {
        let (frame, h, _) = synthetic(1, 4, 24, 5);
        let plan = BlockPlan::new(24, 3).unwrap();
        let est = TrfEstimate::from_channels(&h, plan, 3).unwrap();
        let energy: f64 = frame.samples().iter().flatten().map(|v| v * v).sum();
        for b in 1..=3 {
            let j = cost_jb(&est, &frame, b).unwrap();
            assert!(j < 1e-16 * energy * energy, "b={b} J={j}");
            for k in 0..4 {
                let g = grad_jb_block_b(&est, &frame, b, k).unwrap();
                assert!(g.iter().all(|z| z.norm() < 1e-10));
                for q in 1..b {
                    let g = grad_jb_block_q(&est, &frame, b, q, k).unwrap();
                    assert!(g.iter().all(|z| z.norm() < 1e-10));
                }
            }
            let e = error_block(&est, &frame, 0, 2, b).unwrap();
            assert!(e.spectrum.iter().all(|z| z.norm() < 1e-10));
        }
    }

    #[test]
    fn error_component_matches_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let plan = BlockPlan::new(12, 2).unwrap();
        let est = random_estimate(&mut rng, 3, plan);
        let xi = block_decompose(&randn(&mut rng, 12), &plan).unwrap();
        let xj = block_decompose(&randn(&mut rng, 12), &plan).unwrap();
        for (p, q) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let got = error_component(&xi, &xj, &est, 0, 2, p, q).unwrap();
            let a = direct_convolve(xi.block(p), est.block(2, q)).unwrap();
            let c = direct_convolve(xj.block(p), est.block(0, q)).unwrap();
            let diff: Vec<f64> = a.iter().zip(&c).map(|(a, c)| a - c).collect();
            let want = dft_forward(&diff).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).norm() < 1e-10);
            }
        }
        let same = error_component(&xi, &xi, &est, 1, 1, 1, 2).unwrap();
        assert!(same.iter().all(|z| z.norm() == 0.0));
        assert!(matches!(
            error_component(&xi, &xj, &est, 0, 1, 3, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn assembled_block_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let plan = BlockPlan::new(15, 3).unwrap();
        let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 15)).collect(), 1.0).unwrap();
        let est = random_estimate(&mut rng, 3, plan);
        let h: Vec<Vec<f64>> = (0..3).map(|k| est.channel(k)).collect();
        let blocked: Vec<BlockedSignal> = frame
            .samples()
            .iter()
            .map(|c| block_decompose(c, &plan).unwrap())
            .collect();
        for b in 1..=3 {
            let mut comps = BTreeMap::new();
            for p in 1..=3 {
                for q in 1..=3 {
                    comps.insert(
                        (p, q),
                        error_component(&blocked[0], &blocked[1], &est, 0, 1, p, q).unwrap(),
                    );
                }
            }
            let assembled = assemble_error_block(est.transforms(), 0, 1, b, &comps).unwrap();
            let direct = error_block(&est, &frame, 0, 1, b).unwrap();
            let want = brute_error(&frame, &h, 0, 1, b, 5);
            for (u, v) in assembled.time().unwrap().iter().zip(&want) {
                assert!((u - v).abs() < 1e-10);
            }
            for (u, v) in direct.time().unwrap().iter().zip(&want) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        // b = 1 uses only the head of (1, 1)
        let mut only = BTreeMap::new();
        only.insert(
            (1, 1),
            error_component(&blocked[0], &blocked[1], &est, 0, 1, 1, 1).unwrap(),
        );
        let e1 = assemble_error_block(est.transforms(), 0, 1, 1, &only).unwrap();
        let a = direct_convolve(blocked[0].block(1), est.block(1, 1)).unwrap();
        let c = direct_convolve(blocked[1].block(1), est.block(0, 1)).unwrap();
        let diff: Vec<f64> = a.iter().zip(&c).map(|(a, c)| a - c).collect();
        for (u, v) in e1.time().unwrap().iter().zip(apply_a2(&diff, 5).unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(matches!(
            assemble_error_block(est.transforms(), 0, 1, 2, &only),
            Err(Error::InvalidState(_))
        ));
        // the tail operator is the only way block 2 sees the (1, 1) pair
        let _ = apply_a1(&diff, 5).unwrap();
    }

    #[test]
    fn error_blocks_are_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plan = BlockPlan::new(16, 2).unwrap();
        let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 16)).collect(), 1.0).unwrap();
        let est = random_estimate(&mut rng, 3, plan);
        for b in 1..=2 {
            let a = error_block(&est, &frame, 0, 2, b).unwrap();
            let c = error_block(&est, &frame, 2, 0, b).unwrap();
            for (u, v) in a.spectrum.iter().zip(&c.spectrum) {
                assert_eq!(*u, -v);
            }
        }
    }

    #[test]
    fn cost_is_parseval_scaled_time_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let plan = BlockPlan::new(12, 2).unwrap();
        let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 12)).collect(), 1.0).unwrap();
        let est = random_estimate(&mut rng, 3, plan);
        let h: Vec<Vec<f64>> = (0..3).map(|k| est.channel(k)).collect();
        for b in 1..=2 {
            let mut time_energy = 0.0;
            for i in 0..3 {
                for j in i + 1..3 {
                    time_energy += brute_error(&frame, &h, i, j, b, 6).iter().map(|v| v * v).sum::<f64>();
                }
            }
            let j = cost_jb(&est, &frame, b).unwrap();
            assert!((j - 6.0 * time_energy).abs() < 1e-10 * j.max(1.0));
            let j2 = cost_jb(&est.scaled(2.5), &frame, b).unwrap();
            assert!((j2 - 6.25 * j).abs() < 1e-10 * j2);
        }
    }

    #[test]
    fn two_channel_gradient_matches_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let plan = BlockPlan::new(8, 1).unwrap();
        let frame = RfFrame::new((0..2).map(|_| randn(&mut rng, 8)).collect(), 1.0).unwrap();
        let est = random_estimate(&mut rng, 2, plan);
        let ops = est.transforms();
        let x1 = ops.block_spectrum(frame.channel(0));
        let x2 = ops.block_spectrum(frame.channel(1));
        let e12 = error_block(&est, &frame, 0, 1, 1).unwrap().spectrum;
        let be = ops.apply_b_adjoint(&e12);
        let g1 = grad_jb_block_b(&est, &frame, 1, 0).unwrap();
        let g2 = grad_jb_block_b(&est, &frame, 1, 1).unwrap();
        for t in 0..be.len() {
            assert!((g2[t] - x1[t].conj() * be[t]).norm() < 1e-12);
            assert!((g1[t] + x2[t].conj() * be[t]).norm() < 1e-12);
        }
    }

    #[test]
    fn spectral_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for (m, lb, nb) in [(2, 4, 2), (3, 5, 2), (3, 8, 3), (2, 6, 3)] {
            let plan = BlockPlan::new(lb * nb, nb).unwrap();
            let frame = RfFrame::new((0..m).map(|_| randn(&mut rng, lb * nb)).collect(), 1.0).unwrap();
            let ops = BlockTransforms::new(lb);
            let data = DataSpectra::new(&frame, &plan, &ops).unwrap();
            let h = random_spectra(&mut rng, m, nb, 2 * lb - 1);
            for b in 1..=nb {
                let f = |h: &BlockSpectra| energy(&data.errors(h, b));
                let g = data.gradient(&data.errors(&h, b), b, b);
                for k in 0..m {
                    for q in 0..b {
                        assert_grad_close(&g[k][q], &fd_wirtinger(&f, &h, k, q));
                    }
                }
            }
        }
    }

    #[test]
    fn time_coefficient_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let plan = BlockPlan::new(16, 2).unwrap();
        let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 16)).collect(), 1.0).unwrap();
        let est = random_estimate(&mut rng, 3, plan);
        for (q, k) in [(2, 1), (1, 2)] {
            let g = if q == 2 {
                grad_jb_block_b(&est, &frame, 2, k).unwrap()
            } else {
                grad_jb_block_q(&est, &frame, 2, q, k).unwrap()
            };
            // dJ/dh[t] = 2·Re(F₂ᴴ g)[t]
            let back = {
                let mut buf = g.clone();
                rustfft::FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
                buf
            };
            let h: Vec<Vec<f64>> = (0..3).map(|c| est.channel(c)).collect();
            for t in 0..8 {
                let step = 1e-6;
                let cost_at = |delta: f64| {
                    let mut hp = h.clone();
                    hp[k][(q - 1) * 8 + t] += delta;
                    let e = TrfEstimate::from_channels(&hp, plan, 2).unwrap();
                    cost_jb(&e, &frame, 2).unwrap()
                };
                let numeric = (cost_at(step) - cost_at(-step)) / (2.0 * step);
                let analytic = 2.0 * back[t].re;
                if analytic.abs() > 1e-8 {
                    assert!((numeric - analytic).abs() / analytic.abs() < 1e-5);
                }
            }
        }
        assert!(matches!(
            grad_jb_block_q(&est, &frame, 2, 2, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn step_size_rule() {
        let one = Complex64::new(1.0, 0.0);
        let s = variable_step_size(&[one, 0.0.into()], &[2.0 * one, 0.0.into()]);
        assert_eq!(s, StepSize { mu: 0.5, converged: false });
        let s = variable_step_size(&[one, 0.0.into()], &[0.0.into(), one]);
        assert_eq!(s.mu, 0.0);
        assert!(!s.converged);
        let s = variable_step_size(&[one], &[Complex64::new(1e-16, 0.0)]);
        assert!(s.converged);
        assert_eq!(s.mu, 0.0);
    }

    #[test]
    fn update_projects_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let plan = BlockPlan::new(12, 2).unwrap();
        let mut est = random_estimate(&mut rng, 3, plan);
        est.normalize_active().unwrap();
        let same = update_and_normalize(&est, &vec![vec![Complex64::default(); 11]; 3], 0.0, 2).unwrap();
        assert!((same.active_norm() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            for (a, b) in same.channel(k).iter().zip(est.channel(k)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        // a gradient with energy outside the support is projected away
        let grads: Vec<Vec<Complex64>> = (0..3)
            .map(|_| ops_spectrum(&randn(&mut rng, 11)))
            .collect();
        let upd = update_and_normalize(&est, &grads, 0.3, 2).unwrap();
        assert!((upd.active_norm() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let back = crate::signal::dft_inverse(upd.spectrum(k, 2)).unwrap();
            for z in &back[6..] {
                assert!(z.norm() < 1e-14);
            }
            let direct = dft_forward(&[upd.block(k, 2), &[0.0; 5][..]].concat()).unwrap();
            for (a, b) in direct.iter().zip(upd.spectrum(k, 2)) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        assert!(matches!(
            update_and_normalize(&est, &grads, f64::NAN, 2),
            Err(Error::NumericalFailure(_))
        ));
    }

    fn ops_spectrum(v: &[f64]) -> Vec<Complex64> {
        dft_forward(v).unwrap()
    }

    #[test]
    fn initialization_is_scaled_impulse() {
        let plan = BlockPlan::new(32, 2).unwrap();
        let est = TrfEstimate::initial(4, plan).unwrap();
        assert_eq!(est.active_blocks(), 1);
        for k in 0..4 {
            let c = est.channel(k);
            assert_eq!(c[0], 0.5);
            assert!(c[1..].iter().all(|&v| v == 0.0));
        }
        assert!((est.active_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solver_keeps_unit_norm_and_logs() {
        let (frame, h, _) = synthetic(3, 4, 32, 6);
        let cfg = SolverConfig {
            max_iters: 30,
            ..Default::default()
        };
        let run = run_bmcflms(&frame, &cfg, None, Some(&h)).unwrap();
        assert!((run.estimate.active_norm() - 1.0).abs() < 1e-12);
        assert_eq!(run.estimate.active_blocks(), 2);
        assert!(run.log.iter().all(|r| r.cost >= 0.0 && r.cost.is_finite()));
        assert!(run.log.iter().all(|r| r.npm.is_some() && r.psi == 0.0));
        assert!(run.log.iter().any(|r| r.block == 2));
    }

    #[test]
    fn solver_rejects_mismatched_truth() {
        let (frame, h, _) = synthetic(3, 3, 16, 4);
        let cfg = SolverConfig::default();
        assert!(matches!(
            run_bmcflms(&frame, &cfg, None, Some(&h[..2])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn solver_is_deterministic() {
        let (frame, _, _) = synthetic(4, 4, 32, 6);
        let cfg = SolverConfig {
            max_iters: 20,
            ..Default::default()
        };
        let p = cfg.constraint().unwrap();
        let a = run_bmcflms(&frame, &cfg, Some(&p), None).unwrap();
        let b = run_bmcflms(&frame, &cfg, Some(&p), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.estimate.stacked_active(), b.estimate.stacked_active());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn norm_preserved_every_iteration(seed in any::<u64>(), m in 2usize..=4) {
            let (frame, _, _) = synthetic(seed, m, 24, 4);
            let plan = BlockPlan::new(24, 2).unwrap();
            let mut est = TrfEstimate::initial(m, plan).unwrap();
            let data = DataSpectra::new(&frame, &plan, est.transforms()).unwrap();
            for b in 1..=2 {
                for _ in 0..5 {
                    let e = data.errors(est.spectra(), b);
                    let g = data.gradient(&e, b, b);
                    let step = step_over(est.spectra().iter().zip(&g).flat_map(|(h, g)| {
                        h[..b].iter().zip(g).map(|(h, g)| (h.as_slice(), g.as_slice()))
                    }));
                    if step.converged { break; }
                    let gb: Vec<&[Complex64]> = g.iter().map(|g| g[b - 1].as_slice()).collect();
                    est.apply_update(&gb, step.mu, b).unwrap();
                    prop_assert!((est.active_norm() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn cost_is_homogeneous_of_degree_two(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = BlockPlan::new(12, 2).unwrap();
            let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 12)).collect(), 1.0).unwrap();
            let est = random_estimate(&mut rng, 3, plan);
            for b in 1..=2 {
                let j = cost_jb(&est, &frame, b).unwrap();
                let ja = cost_jb(&est.scaled(alpha), &frame, b).unwrap();
                prop_assert!((ja - alpha * alpha * j).abs() <= 1e-10 * j.max(1e-12));
            }
        }

        #[test]
        fn antisymmetry_holds_exactly(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = BlockPlan::new(15, 3).unwrap();
            let frame = RfFrame::new((0..3).map(|_| randn(&mut rng, 15)).collect(), 1.0).unwrap();
            let est = random_estimate(&mut rng, 3, plan);
            for b in 1..=3 {
                let a = error_block(&est, &frame, 1, 2, b).unwrap();
                let c = error_block(&est, &frame, 2, 1, b).unwrap();
                for (u, v) in a.spectrum.iter().zip(&c.spectrum) {
                    prop_assert_eq!(*u, -v);
                }
            }
        }
    }

    #[test]
    fn pair_index_is_lexicographic() {
        let m = 5;
        let mut idx = 0;
        for i in 0..m {
            for j in i + 1..m {
                assert_eq!(pair_index(m, i, j), idx);
                idx += 1;
            }
        }
    }
}
