//! Block decomposition, exact-length transforms and the blocked convolution
//! identity.
//!
//! A length-`L` signal is cut into `B` contiguous blocks of `L_b = floor(L/B)`
//! samples. The product of two zero-padded block spectra of length
//! `2·L_b − 1` is the exact linear convolution of the blocks, so the `b`-th
//! length-`L_b` slice of a full convolution can be rebuilt from block pairs:
//! the tail (last `L_b − 1` samples) of every pair whose block indices sum to
//! `b` and the head (first `L_b` samples) of every pair whose indices sum to
//! `b + 1`.

use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Largest imaginary residue, relative to the vector's magnitude, tolerated
/// when a spectrum is brought back to a real time-domain signal.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// Multichannel RF data: `M` channels of `L` real samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    samples: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl RfFrame {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "an RF frame needs at least 2 channels, got {}",
                samples.len()
            )));
        }
        let len = samples[0].len();
        if len < 2 {
            return Err(Error::invalid(format!(
                "an RF frame needs at least 2 samples per channel, got {len}"
            )));
        }
        for (i, ch) in samples.iter().enumerate() {
            if ch.len() != len {
                return Err(Error::invalid(format!(
                    "channel {i} has {} samples, expected {len}",
                    ch.len()
                )));
            }
            if let Some(t) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "channel {i} sample {t} is not finite"
                )));
            }
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec<f64>> {
        self.samples
    }

    /// Mean power over every sample of every channel.
    pub fn power(&self) -> f64 {
        let n = (self.channels() * self.len()) as f64;
        self.samples
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum::<f64>()
            / n
    }
}

/// Block count and block length used for all block-wise math.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    blocks: usize,
    block_len: usize,
}

impl BlockPlan {
    /// Plan for a signal of `signal_len` samples cut into `blocks` blocks.
    pub fn new(signal_len: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::invalid("block count must be at least 1"));
        }
        if signal_len < blocks {
            return Err(Error::invalid(format!(
                "signal of {signal_len} samples cannot hold {blocks} blocks"
            )));
        }
        let block_len = signal_len / blocks;
        if block_len < 2 {
            return Err(Error::invalid(format!(
                "block length {block_len} is below the minimum of 2 \
                 ({signal_len} samples, {blocks} blocks)"
            )));
        }
        Ok(Self { blocks, block_len })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// `2·L_b − 1`, the length of a block-pair convolution.
    pub fn spectrum_len(&self) -> usize {
        2 * self.block_len - 1
    }

    /// Number of samples covered by the blocks, `B·L_b`.
    pub fn covered_len(&self) -> usize {
        self.blocks * self.block_len
    }
}

/// A signal split into the contiguous blocks of a [`BlockPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedSignal {
    blocks: Vec<Vec<f64>>,
    plan: BlockPlan,
    dropped: usize,
}

impl BlockedSignal {
    pub fn plan(&self) -> &BlockPlan {
        &self.plan
    }

    /// Block `b`, 1-indexed.
    pub fn block(&self, b: usize) -> &[f64] {
        &self.blocks[b - 1]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    /// Trailing samples that did not fit into `B·L_b`.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn concat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }
}

/// Splits `signal` into the blocks of `plan`. Samples past `B·L_b` are
/// dropped with a logged warning.
pub fn block_decompose(signal: &[f64], plan: &BlockPlan) -> Result<BlockedSignal> {
    if signal.len() < plan.blocks() {
        return Err(Error::invalid(format!(
            "signal of {} samples cannot hold {} blocks",
            signal.len(),
            plan.blocks()
        )));
    }
    if signal.len() < plan.covered_len() {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than the plan's {} samples",
            signal.len(),
            plan.covered_len()
        )));
    }
    let dropped = signal.len() - plan.covered_len();
    if dropped > 0 {
        warn!(
            "dropping {dropped} trailing samples: {} samples do not divide into {} blocks",
            signal.len(),
            plan.blocks()
        );
    }
    let blocks = signal[..plan.covered_len()]
        .chunks(plan.block_len())
        .map(<[f64]>::to_vec)
        .collect();
    Ok(BlockedSignal {
        blocks,
        plan: *plan,
        dropped,
    })
}

fn check_pair_len(len: usize, block_len: usize) -> Result<()> {
    if block_len < 2 || len != 2 * block_len - 1 {
        return Err(Error::invalid(format!(
            "expected a block-pair convolution of length {}, got {len}",
            2 * block_len.max(1) - 1
        )));
    }
    Ok(())
}

/// Tail truncation: moves the last `L_b − 1` samples of a block-pair
/// convolution to the front and zeroes the final position.
pub fn apply_a1<T: Copy + Default>(conv: &[T], block_len: usize) -> Result<Vec<T>> {
    check_pair_len(conv.len(), block_len)?;
    let mut out = vec![T::default(); block_len];
    out[..block_len - 1].copy_from_slice(&conv[block_len..]);
    Ok(out)
}

/// Head truncation: the first `L_b` samples of a block-pair convolution.
pub fn apply_a2<T: Copy + Default>(conv: &[T], block_len: usize) -> Result<Vec<T>> {
    check_pair_len(conv.len(), block_len)?;
    Ok(conv[..block_len].to_vec())
}

/// Transpose of [`apply_a1`]: length `L_b` to length `2·L_b − 1`.
pub fn apply_a1_transpose<T: Copy + Default>(v: &[T]) -> Vec<T> {
    let lb = v.len();
    let mut out = vec![T::default(); 2 * lb - 1];
    out[lb..].copy_from_slice(&v[..lb - 1]);
    out
}

/// Transpose of [`apply_a2`]: zero-pads length `L_b` to `2·L_b − 1`.
pub fn apply_a2_transpose<T: Copy + Default>(v: &[T]) -> Vec<T> {
    let lb = v.len();
    let mut out = vec![T::default(); 2 * lb - 1];
    out[..lb].copy_from_slice(v);
    out
}

/// Exact linear convolution by the O(n·m) definition.
pub fn direct_convolve(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || h.is_empty() {
        return Err(Error::invalid("cannot convolve an empty sequence"));
    }
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            out[i + j] += xi * hj;
        }
    }
    Ok(out)
}

/// Forward DFT of a real sequence of any length `n ≥ 1`:
/// `X[k] = Σ_t x[t]·exp(−j2πkt/n)`.
pub fn dft_forward(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("cannot transform an empty sequence"));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf)
}

/// Inverse DFT with the `1/n` scaling, so `dft_inverse(dft_forward(x)) = x`.
pub fn dft_inverse(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    if spectrum.is_empty() {
        return Err(Error::invalid("cannot transform an empty sequence"));
    }
    let mut buf = spectrum.to_vec();
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(buf)
}

/// Real part of a spectrum's inverse, rejecting residues above
/// [`IMAG_RESIDUE_TOL`] relative to the vector's largest magnitude.
pub fn real_part_checked(v: &[Complex64]) -> Result<Vec<f64>> {
    let scale = v.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let worst = v.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if worst > IMAG_RESIDUE_TOL * scale {
        return Err(Error::numerical(format!(
            "time-domain result has imaginary residue {worst:.3e} (scale {scale:.3e})"
        )));
    }
    Ok(v.iter().map(|z| z.re).collect())
}

/// Planned transforms for one block length: `F₁` (length `L_b`) and `F₂`
/// (length `2·L_b − 1`), plus the composite truncation operators
/// `B = F₁A₂F₂⁻¹` and `B₁ = F₁A₁F₂⁻¹` and their adjoints.
#[derive(Clone)]
pub struct BlockTransforms {
    block_len: usize,
    f1_fwd: Arc<dyn Fft<f64>>,
    f1_inv: Arc<dyn Fft<f64>>,
    f2_fwd: Arc<dyn Fft<f64>>,
    f2_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for BlockTransforms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockTransforms")
            .field("block_len", &self.block_len)
            .finish()
    }
}

impl BlockTransforms {
    pub fn new(block_len: usize) -> Self {
        assert!(block_len >= 2, "block length must be at least 2");
        let mut planner = FftPlanner::new();
        let n = 2 * block_len - 1;
        Self {
            block_len,
            f1_fwd: planner.plan_fft_forward(block_len),
            f1_inv: planner.plan_fft_inverse(block_len),
            f2_fwd: planner.plan_fft_forward(n),
            f2_inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn spectrum_len(&self) -> usize {
        2 * self.block_len - 1
    }

    /// `F₂` of a real block zero-padded to `2·L_b − 1`.
    pub fn block_spectrum(&self, block: &[f64]) -> Vec<Complex64> {
        debug_assert!(block.len() <= self.spectrum_len());
        let mut buf = vec![Complex64::default(); self.spectrum_len()];
        for (dst, &v) in buf.iter_mut().zip(block) {
            dst.re = v;
        }
        self.f2_fwd.process(&mut buf);
        buf
    }

    pub fn f1(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut buf = v.to_vec();
        self.f1_fwd.process(&mut buf);
        buf
    }

    /// `F₁ᴴ`, the unnormalized inverse.
    pub fn f1_adjoint(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut buf = v.to_vec();
        self.f1_inv.process(&mut buf);
        buf
    }

    pub fn f2(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut buf = v.to_vec();
        self.f2_fwd.process(&mut buf);
        buf
    }

    /// `F₂⁻¹`, including the `1/(2·L_b − 1)` scaling.
    pub fn f2_inverse(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut buf = v.to_vec();
        self.f2_inv.process(&mut buf);
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
        buf
    }

    /// Time-domain block `A₁F₂⁻¹·tail + A₂F₂⁻¹·head` (complex, length `L_b`).
    ///
    /// `tail` collects the spectra whose last `L_b − 1` samples land in the
    /// block, `head` those whose first `L_b` samples do.
    pub fn fold_block(
        &self,
        tail: Option<&[Complex64]>,
        head: Option<&[Complex64]>,
    ) -> Vec<Complex64> {
        let lb = self.block_len;
        let mut out = vec![Complex64::default(); lb];
        if let Some(tail) = tail {
            let t = self.f2_inverse(tail);
            out[..lb - 1].copy_from_slice(&t[lb..]);
        }
        if let Some(head) = head {
            let h = self.f2_inverse(head);
            for (o, v) in out.iter_mut().zip(&h[..lb]) {
                *o += v;
            }
        }
        out
    }

    /// `B·v = F₁A₂F₂⁻¹·v`.
    pub fn apply_b(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.f1(&self.fold_block(None, Some(v)))
    }

    /// `B₁·v = F₁A₁F₂⁻¹·v`.
    pub fn apply_b1(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.f1(&self.fold_block(Some(v), None))
    }

    /// `Bᴴ·e = F₂⁻ᴴA₂ᵀF₁ᴴ·e`, with `F₂⁻ᴴ = F₂/(2·L_b − 1)`.
    pub fn apply_b_adjoint(&self, e: &[Complex64]) -> Vec<Complex64> {
        let t = apply_a2_transpose(&self.f1_adjoint(e));
        self.scaled_f2(t)
    }

    /// `B₁ᴴ·e = F₂⁻ᴴA₁ᵀF₁ᴴ·e`.
    pub fn apply_b1_adjoint(&self, e: &[Complex64]) -> Vec<Complex64> {
        let t = apply_a1_transpose(&self.f1_adjoint(e));
        self.scaled_f2(t)
    }

    /// `(Bᴴ·e, B₁ᴴ·e)` sharing one `F₁ᴴ`.
    pub fn apply_adjoints(&self, e: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let t = self.f1_adjoint(e);
        (
            self.scaled_f2(apply_a2_transpose(&t)),
            self.scaled_f2(apply_a1_transpose(&t)),
        )
    }

    fn scaled_f2(&self, mut buf: Vec<Complex64>) -> Vec<Complex64> {
        self.f2_fwd.process(&mut buf);
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
        buf
    }
}

/// Spectra `F₂` of every block of a blocked signal.
pub(crate) fn block_spectra(ops: &BlockTransforms, signal: &BlockedSignal) -> Vec<Vec<Complex64>> {
    signal
        .blocks()
        .iter()
        .map(|blk| ops.block_spectrum(blk))
        .collect()
}

/// Block `b` (1-indexed) of the convolution of two blocked signals, from
/// their block spectra. Missing blocks on either side count as zero.
pub(crate) fn blocked_block_spectral(
    ops: &BlockTransforms,
    x: &[Vec<Complex64>],
    h: &[Vec<Complex64>],
    b: usize,
) -> Vec<Complex64> {
    let n = ops.spectrum_len();
    let mut tail = vec![Complex64::default(); n];
    let mut head = vec![Complex64::default(); n];
    let mut any_tail = false;
    for p in 1..b {
        let q = b - p;
        if let (Some(xp), Some(hq)) = (x.get(p - 1), h.get(q - 1)) {
            any_tail = true;
            for ((acc, a), c) in tail.iter_mut().zip(xp).zip(hq) {
                *acc += a * c;
            }
        }
    }
    for p in 1..=b {
        let q = b - p + 1;
        if let (Some(xp), Some(hq)) = (x.get(p - 1), h.get(q - 1)) {
            for ((acc, a), c) in head.iter_mut().zip(xp).zip(hq) {
                *acc += a * c;
            }
        }
    }
    ops.fold_block(any_tail.then_some(tail.as_slice()), Some(&head))
}

/// Block `b` (1-indexed) of `x * h`, assembled from block-pair convolutions.
///
/// Equals samples `(b−1)·L_b .. b·L_b − 1` of the direct linear convolution.
pub fn blocked_convolve_block(x: &BlockedSignal, h: &BlockedSignal, b: usize) -> Result<Vec<f64>> {
    if x.plan() != h.plan() {
        return Err(Error::invalid(format!(
            "block plans differ: {:?} vs {:?}",
            x.plan(),
            h.plan()
        )));
    }
    if b == 0 || b > x.plan().blocks() {
        return Err(Error::invalid(format!(
            "block index {b} outside 1..={}",
            x.plan().blocks()
        )));
    }
    let ops = BlockTransforms::new(x.plan().block_len());
    let xs = block_spectra(&ops, x);
    let hs = block_spectra(&ops, h);
    real_part_checked(&blocked_block_spectral(&ops, &xs, &hs, b))
}
