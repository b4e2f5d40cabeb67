//! PSF estimation with regularized multichannel equalizers.
//!
//! Each lateral group of `M_b` channels gets an equalizer bank `g` that
//! drives its stacked first-block TRF convolution matrix toward an impulse.
//! Applying the same bank to the first data block then exposes the pulse.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::crossrelation::TrfEstimate;
use crate::error::{Error, Result};
use crate::signal::{direct_convolve, RfFrame};

/// Cholesky pivots whose squared ratio to the largest falls below this are
/// treated as singular when no regularization is applied.
const PIVOT_RATIO_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct PsfEstimate {
    s: Vec<f64>,
}

impl PsfEstimate {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.len() < 2 {
            return Err(Error::invalid(format!(
                "a PSF needs at least 2 samples, got {}",
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("PSF has non-finite samples"));
        }
        Ok(Self { s })
    }

    pub fn samples(&self) -> &[f64] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualizerBank {
    /// Stacked coefficients, `L_b` per channel.
    pub g: DVector<f64>,
    pub channels: usize,
    /// Absolute regularization weight used in the solve.
    pub delta: f64,
    pub target_index: usize,
    /// `‖H·g − d‖`.
    pub residual: f64,
}

impl EqualizerBank {
    pub fn per_channel(&self) -> Vec<Vec<f64>> {
        let lb = self.g.len() / self.channels;
        self.g.as_slice().chunks(lb).map(<[f64]>::to_vec).collect()
    }
}

/// `[H_1 … H_{M_b}]`, the horizontally stacked `(2L_b − 1) × L_b`
/// convolution matrices of the first TRF block of each listed channel.
pub fn build_channel_matrix(h_est: &TrfEstimate, channels: &[usize]) -> Result<DMatrix<f64>> {
    if channels.is_empty() {
        return Err(Error::invalid("channel subset is empty"));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= h_est.channels()) {
        return Err(Error::invalid(format!(
            "channel {c} outside 0..{}",
            h_est.channels()
        )));
    }
    let lb = h_est.plan().block_len();
    let rows = 2 * lb - 1;
    let mut h = DMatrix::zeros(rows, channels.len() * lb);
    for (slot, &c) in channels.iter().enumerate() {
        let taps = h_est.block(c, 1);
        for k in 0..lb {
            for (t, &v) in taps.iter().enumerate() {
                h[(k + t, slot * lb + k)] = v;
            }
        }
    }
    Ok(h)
}

fn singular(msg: String) -> Error {
    Error::numerical(format!("equalizer system is singular: {msg}"))
}

fn pivot_ratio(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        (min / max).powi(2)
    }
}

/// Minimizer of `‖H·g − d‖² + δ‖g‖²` for an impulse target `d` at
/// `target_index`, with absolute weight `delta`.
pub fn solve_equalizer(h: &DMatrix<f64>, target_index: usize, delta: f64) -> Result<EqualizerBank> {
    let (rows, cols) = h.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("empty channel matrix"));
    }
    if target_index >= rows {
        return Err(Error::invalid(format!(
            "target index {target_index} outside 0..{rows}"
        )));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be non-negative, got {delta}")));
    }
    let mut d = DVector::zeros(rows);
    d[target_index] = 1.0;

    let g = if delta > 0.0 && rows < cols {
        // g = Hᵀ(HHᵀ + δI)⁻¹d, the same minimizer through the smaller system
        let mut a = h * h.transpose();
        a.iter_mut().step_by(rows + 1).for_each(|v| *v += delta);
        let chol = Cholesky::new(a)
            .ok_or_else(|| singular(format!("{rows}x{rows} dual system not positive definite")))?;
        h.transpose() * chol.solve(&d)
    } else {
        if delta == 0.0 && rows < cols {
            return Err(singular(format!(
                "HᵀH is {cols}x{cols} with rank at most {rows}; set delta > 0"
            )));
        }
        let mut a = h.transpose() * h;
        a.iter_mut().step_by(cols + 1).for_each(|v| *v += delta);
        let chol = Cholesky::new(a)
            .ok_or_else(|| singular("normal equations not positive definite".to_string()))?;
        let ratio = pivot_ratio(&chol);
        if delta == 0.0 && ratio < PIVOT_RATIO_FLOOR {
            return Err(singular(format!(
                "squared Cholesky pivot ratio {ratio:.3e} below {PIVOT_RATIO_FLOOR:.0e}"
            )));
        }
        chol.solve(&(h.transpose() * &d))
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("equalizer coefficients are not finite"));
    }
    let residual = (h * &g - &d).norm();
    // a stacked TRF matrix has 2·L_b − 1 rows and L_b columns per channel
    let lb = rows.div_ceil(2);
    Ok(EqualizerBank {
        g,
        channels: if cols % lb == 0 { cols / lb } else { 1 },
        delta,
        target_index,
        residual,
    })
}

/// Lateral-group PSF estimates `ŝ_r`, each the first `L_s` samples of
/// `Σ_i x_i¹ * g_i` over the group's channels.
pub fn estimate_psf_groups(
    frame: &RfFrame,
    h_est: &TrfEstimate,
    psf_len: usize,
    delta: f64,
    lateral_block: usize,
    target_delay: usize,
) -> Result<Vec<Vec<f64>>> {
    let m = frame.channels();
    if m != h_est.channels() {
        return Err(Error::invalid(format!(
            "frame has {m} channels, estimate has {}",
            h_est.channels()
        )));
    }
    let lb = h_est.plan().block_len();
    if frame.len() < lb {
        return Err(Error::invalid("frame is shorter than one block"));
    }
    if lateral_block == 0 || lateral_block > m {
        return Err(Error::invalid(format!(
            "lateral block size {lateral_block} outside 1..={m}"
        )));
    }
    if psf_len < 2 || psf_len > lb {
        return Err(Error::invalid(format!(
            "PSF length {psf_len} outside 2..={lb}"
        )));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be non-negative, got {delta}")));
    }
    let groups = m / lateral_block;
    let leftover = m - groups * lateral_block;
    if leftover > 0 {
        warn!(
            "channels {}..{m} do not fill a lateral block of {lateral_block} and are unused",
            groups * lateral_block
        );
    }
    (0..groups)
        .into_par_iter()
        .map(|r| {
            let channels: Vec<usize> = (r * lateral_block..(r + 1) * lateral_block).collect();
            let h = build_channel_matrix(h_est, &channels)?;
            let scale = channels
                .iter()
                .map(|&c| h_est.block(c, 1).iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max);
            let bank = solve_equalizer(&h, target_delay, delta * scale)?;
            let mut s = vec![0.0; psf_len];
            for (slot, g) in bank.per_channel().iter().enumerate() {
                let x1 = &frame.channel(channels[slot])[..lb];
                let y = direct_convolve(x1, g)?;
                for (acc, v) in s.iter_mut().zip(&y) {
                    *acc += v;
                }
            }
            Ok(s)
        })
        .collect()
}

/// Average of the lateral-group estimates from [`estimate_psf_groups`].
///
/// `delta` is relative to the largest diagonal entry of `HᵀH`.
pub fn estimate_psf(
    frame: &RfFrame,
    h_est: &TrfEstimate,
    psf_len: usize,
    delta: f64,
    lateral_block: usize,
    target_delay: usize,
) -> Result<PsfEstimate> {
    let groups = estimate_psf_groups(frame, h_est, psf_len, delta, lateral_block, target_delay)?;
    let n = groups.len() as f64;
    let mut s = vec![0.0; psf_len];
    for g in &groups {
        for (acc, v) in s.iter_mut().zip(g) {
            *acc += v;
        }
    }
    s.iter_mut().for_each(|v| *v /= n);
    PsfEstimate::new(s)
}

/// Peak of the normalized cross-correlation between two pulses over all
/// lags, in `[-1, 1]` (the signed value of largest magnitude).
pub fn normalized_xcorr_peak(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cross-correlation of a zero pulse"));
    }
    let rev: Vec<f64> = b.iter().rev().copied().collect();
    let xc = direct_convolve(a, &rev)?;
    let peak = xc
        .iter()
        .copied()
        .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
    Ok(peak / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossrelation::tests::{randn, synthetic};
    use crate::signal::BlockPlan;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn estimate(h: &[Vec<f64>], len: usize, blocks: usize) -> TrfEstimate {
        TrfEstimate::from_channels(h, BlockPlan::new(len, blocks).unwrap(), blocks).unwrap()
    }

    #[test]
    fn channel_matrix_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 8)).collect();
        let est = estimate(&h, 8, 2);
        let m = build_channel_matrix(&est, &[0, 2]).unwrap();
        assert_eq!(m.shape(), (7, 8));
        for slot in 0..2 {
            let taps = est.block([0, 2][slot], 1);
            for k in 0..4 {
                for r in 0..7 {
                    let want = if r >= k && r - k < 4 { taps[r - k] } else { 0.0 };
                    assert_eq!(m[(r, slot * 4 + k)], want);
                }
            }
        }
        // H·g is the sum of per-channel convolutions
        let g: Vec<f64> = randn(&mut rng, 8);
        let hg = &m * DVector::from_vec(g.clone());
        let a = direct_convolve(est.block(0, 1), &g[..4]).unwrap();
        let b = direct_convolve(est.block(2, 1), &g[4..]).unwrap();
        for r in 0..7 {
            assert!((hg[r] - a[r] - b[r]).abs() < 1e-12);
        }
        assert!(matches!(build_channel_matrix(&est, &[]), Err(Error::InvalidArgument(_))));

        let mut imp = vec![vec![0.0; 8]];
        imp[0][0] = 1.0;
        imp.push(vec![0.0; 8]);
        let id = build_channel_matrix(&estimate(&imp, 8, 2), &[0]).unwrap();
        for r in 0..7 {
            for c in 0..4 {
                assert_eq!(id[(r, c)], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn orthonormal_columns_collapse_to_transpose() {
        let mut h = DMatrix::zeros(5, 3);
        h[(0, 0)] = 1.0;
        h[(2, 1)] = 1.0;
        h[(4, 2)] = 1.0;
        let bank = solve_equalizer(&h, 2, 0.0).unwrap();
        let mut d = DVector::zeros(5);
        d[2] = 1.0;
        let want = h.transpose() * d;
        assert!((bank.g - want).norm() < 1e-14);
    }

    #[test]
    fn matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = DMatrix::from_fn(12, 8, |_, _| rng.random_range(-1.0..1.0));
        for delta in [0.0, 1e-3, 0.5] {
            let bank = solve_equalizer(&h, 3, delta).unwrap();
            let mut a = h.transpose() * &h;
            for i in 0..8 {
                a[(i, i)] += delta;
            }
            let mut d = DVector::zeros(12);
            d[3] = 1.0;
            let want = a.try_inverse().unwrap() * h.transpose() * d;
            assert!((&bank.g - &want).norm() < 1e-9 * want.norm());
        }
    }

    #[test]
    fn dual_form_matches_primal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = DMatrix::from_fn(7, 16, |_, _| rng.random_range(-1.0..1.0));
        let bank = solve_equalizer(&h, 0, 1e-2).unwrap();
        let mut a = h.transpose() * &h;
        for i in 0..16 {
            a[(i, i)] += 1e-2;
        }
        let mut d = DVector::zeros(7);
        d[0] = 1.0;
        let want = a.try_inverse().unwrap() * h.transpose() * d;
        assert!((&bank.g - &want).norm() < 1e-9 * want.norm());
    }

    #[test]
    fn heavy_regularization_shrinks_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = DMatrix::from_fn(9, 10, |_, _| rng.random_range(-1.0..1.0));
        let mut d = DVector::zeros(9);
        d[0] = 1.0;
        let htd = (h.transpose() * d).norm();
        let mut prev = f64::INFINITY;
        for delta in [1e2, 1e4, 1e6] {
            let g = solve_equalizer(&h, 0, delta).unwrap().g.norm();
            assert!(g <= htd / delta);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn singular_system_without_regularization_fails() {
        let h = DMatrix::from_fn(5, 6, |r, c| (r + c) as f64);
        assert!(matches!(solve_equalizer(&h, 0, 0.0), Err(Error::NumericalFailure(_))));
        let mut h = DMatrix::zeros(6, 3);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        h[(0, 2)] = 1.0;
        h[(1, 2)] = 1.0;
        assert!(matches!(solve_equalizer(&h, 0, 0.0), Err(Error::NumericalFailure(_))));
        assert!(solve_equalizer(&h, 9, 0.1).is_err());
    }

    #[test]
    fn residual_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = DMatrix::from_fn(11, 12, |_, _| rng.random_range(-1.0..1.0));
        let delta = 0.05;
        let bank = solve_equalizer(&h, 1, delta).unwrap();
        let mut d = DVector::zeros(11);
        d[1] = 1.0;
        let objective = |g: &DVector<f64>| (&h * g - &d).norm_squared() + delta * g.norm_squared();
        let base = objective(&bank.g);
        for _ in 0..50 {
            let u = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0)).normalize();
            assert!(objective(&(&bank.g + 1e-4 * &u)) >= base);
        }
    }

    #[test]
    fn recovers_pulse_from_true_trfs() {
        let (frame, h, s) = synthetic(11, 8, 128, 16);
        let est = estimate(&h, 128, 2);
        let psf = estimate_psf(&frame, &est, 16, 1e-8, 8, 0).unwrap();
        let peak = normalized_xcorr_peak(psf.samples(), &s).unwrap();
        assert!(peak >= 0.99, "peak {peak}");
    }

    #[test]
    fn identical_trfs_give_identical_group_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = randn(&mut rng, 6);
        let trf = randn(&mut rng, 32);
        let h = vec![trf.clone(); 6];
        let x: Vec<Vec<f64>> = (0..6)
            .map(|_| direct_convolve(&s, &trf).unwrap()[..32].to_vec())
            .collect();
        let frame = RfFrame::new(x, 1.0).unwrap();
        let est = estimate(&h, 32, 2);
        let groups = estimate_psf_groups(&frame, &est, 6, 1e-3, 2, 0).unwrap();
        assert_eq!(groups.len(), 3);
        for g in &groups[1..] {
            assert_eq!(g, &groups[0]);
        }
        let avg = estimate_psf(&frame, &est, 6, 1e-3, 2, 0).unwrap();
        for (a, b) in avg.samples().iter().zip(&groups[0]) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn leftover_channels_are_excluded() {
        let (frame, h, _) = synthetic(7, 8, 32, 4);
        let est = estimate(&h, 32, 2);
        assert_eq!(estimate_psf_groups(&frame, &est, 4, 1e-3, 3, 0).unwrap().len(), 2);
        assert!(estimate_psf(&frame, &est, 17, 1e-3, 3, 0).is_err());
        assert!(estimate_psf(&frame, &est, 4, 1e-3, 9, 0).is_err());
    }

    #[test]
    fn d_truncation_takes_leading_samples() {
        let (frame, h, _) = synthetic(8, 4, 24, 4);
        let est = estimate(&h, 24, 2);
        let groups = estimate_psf_groups(&frame, &est, 12, 1e-3, 4, 0).unwrap();
        let short = estimate_psf_groups(&frame, &est, 5, 1e-3, 4, 0).unwrap();
        assert_eq!(&groups[0][..5], &short[0][..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scale_covariance(seed in any::<u64>(), alpha in prop_oneof![-8.0f64..-0.1, 0.1f64..8.0]) {
            let (frame, h, _) = synthetic(seed, 4, 32, 6);
            let est = estimate(&h, 32, 2);
            let base = estimate_psf(&frame, &est, 6, 1e-3, 4, 0).unwrap();
            let scaled = estimate_psf(&frame, &est.scaled(alpha), 6, 1e-3, 4, 0).unwrap();
            let frame_scaled = RfFrame::new(
                frame.samples().iter().map(|c| c.iter().map(|v| v * alpha).collect()).collect(),
                1.0,
            ).unwrap();
            let both = estimate_psf(&frame_scaled, &est.scaled(alpha), 6, 1e-3, 4, 0).unwrap();
            let n = base.samples().iter().map(|v| v * v).sum::<f64>().sqrt();
            for ((a, b), c) in base.samples().iter().zip(scaled.samples()).zip(both.samples()) {
                prop_assert!((a - alpha * b).abs() < 1e-9 * n);
                prop_assert!((a - c).abs() < 1e-9 * n);
            }
        }
    }
}
