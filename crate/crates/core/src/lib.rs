//! Blind deconvolution of multichannel ultrasound RF frames.
//!
//! Each channel is modelled as `x_i = trunc_L(s * h_i) + v_i`: one pulse
//! `s` shared by all scan lines, a per-line tissue reflectivity `h_i`, and
//! a record cut at the TRF length. The block solver estimates the `h_i`
//! from crossrelations between channels, one axial block at a time, with a
//! correlation-energy term that counters noise-driven misconvergence. The
//! pulse is then recovered with regularized multichannel equalizers, and
//! the tail that the truncation removed is re-synthesized to refine the
//! TRFs.
//!
//! Module map:
//! - [`signal`]: blocks, transforms, truncation operators.
//! - [`crossrelation`]: error, cost, gradients, step size, block solver.
//! - [`constraint`]: correlation energy and coupling factor.
//! - [`rmint`]: PSF estimation.
//! - [`missing`]: tail synthesis and the missing-data refinement.
//! - [`phantom`]: synthetic frames with ground truth.
//! - [`metrics`]: NPM, resolution gain, envelope images.
//! - [`io`], [`config`]: file formats and solver settings.

pub mod config;
pub mod constraint;
pub mod crossrelation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod missing;
pub mod phantom;
pub mod rmint;
pub mod signal;

pub use config::{ScaleEstimator, SolverConfig};
pub use constraint::ConstraintParams;
pub use crossrelation::{run_bmcflms, IterationRecord, Phase, SolverRun, TrfEstimate};
pub use error::{Error, Result};
pub use missing::run_md_bmcflms;
pub use rmint::PsfEstimate;
pub use signal::{BlockPlan, RfFrame};
