//! Fixtures shared by the criterion benches.

use hdsmc::{AnnealingSchedule, KernelSpec, ParticleSystem, TemperedTarget};

pub struct Fixture {
    pub target: TemperedTarget,
    pub schedule: AnnealingSchedule,
    pub system: ParticleSystem,
}

/// Gaussian target at `phi0 = 0.5` with `n` particles in dimension `d`.
pub fn gaussian(d: usize, n: usize) -> Fixture {
    let target = TemperedTarget::gaussian(0.5).expect("valid target");
    let schedule = AnnealingSchedule::linear(0.5, d).expect("valid schedule");
    let system = ParticleSystem::init(1, &target, n, d, 0.5).expect("valid system");
    Fixture { target, schedule, system }
}

pub fn kernels() -> [(&'static str, KernelSpec); 2] {
    [("rwm", KernelSpec::rwm()), ("perfect", KernelSpec::perfect())]
}
