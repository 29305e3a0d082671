//! Tempered sequential Monte Carlo for high-dimensional i.i.d. product
//! targets `Π(x) = Π_j exp{g(x_j)}`.
//!
//! The sampler anneals from `π^{φ_0}` to `π` through bridging densities
//! `Π_n ∝ Π^{φ_n}`, moving each coordinate with its own `π_{φ_n}`-invariant
//! kernel and resampling multinomially when the effective sample size drops.
//! Alongside it, [`asymptotics`] computes the `d → ∞` limits that govern the
//! sampler's stability: the variance profile `σ²_{s:t}`, the limiting ESS law,
//! and limiting resampling times. [`experiments`] runs the desk-scale studies
//! that compare the two.
//!
//! All randomness comes from counter-style streams ([`rng`]), so every result
//! is a pure function of its seed, independent of thread count.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod quadrature;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod stats;
pub mod target;

pub use asymptotics::{
    analytic_profile_perfect_gaussian, build_variance_profile, limiting_resample_times,
    local_asymptotic_variance, mc_error_shape, sample_limiting_ess, theoretical_resample_times_d,
    Estimate, ResampleTime, VarianceProfile,
};
pub use error::{Result, SmcError};
pub use kernel::{apply_kernel_coordinatewise, kernel_step, KernelSpec, Precision};
pub use rng::{stream, Purpose, StreamRng};
pub use schedule::{step_index, AnnealingSchedule, ScheduleKind, Tabulated, TestGrid};
pub use smc::{
    ess, estimate_marginal, multinomial_resample, run_smc, weight_update, ParticleSystem,
    ResamplingPolicy, RunRecord, RunSummary, Thresholds,
};
pub use target::TemperedTarget;
