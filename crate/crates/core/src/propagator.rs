//! One KvN-Langevin step `psi -> U_PITE U_F U_NVE psi / ||.||`.
//!
//! * [`NveStep`]: Strang splitting `drift(dt/2) kick(dt) drift(dt/2)`; the
//!   drift is the phase `exp(-i tau P k_R / mu)` in `(k_R, P)` and the kick is
//!   `exp(-i tau F(R) k_P)` in `(R, k_P)`.
//! * [`FrictionStep`]: `psi(R, P) -> e^{s/2} psi(R, e^s P)` with `s = gamma dt`.
//! * [`DiffusionStep`]: multiply the `k_P` components by `cos(sigma_H k_P)`,
//!   record the success probability and renormalize.

use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::electronic::{tabulate_pes, PesModel};
use crate::error::{Error, Result};
use crate::grid::{Basis, KvnState, PhaseSpaceGrid};

/// Success probability below which the filtered state is considered lost.
pub const COLLAPSE_THRESHOLD: f64 = 1e-6;
/// Renormalization correction above which friction reports a boundary leak.
pub const LEAK_THRESHOLD: f64 = 1e-3;
/// Window and tolerance of the stationarity detector in the bias experiment.
pub const STATIONARY_WINDOW: usize = 50;
pub const STATIONARY_TOL: f64 = 1e-8;

/// `T_phys / (1 + tanh(s) / 2)`.
pub fn corrected_internal_temperature(t_phys: f64, s: f64) -> f64 {
    t_phys / (1.0 + 0.5 * s.tanh())
}

/// Discrete fluctuation-dissipation filter width `sqrt(2 mu T (1 - e^{-2s}))`.
pub fn fdt_sigma(mu: f64, t_int: f64, s: f64) -> f64 {
    (2.0 * mu * t_int * (-(-2.0 * s).exp_m1())).sqrt()
}

/// Thermostat settings before the filter width is fixed. Temperatures in hartree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThermostatSettings {
    pub mu: f64,
    pub gamma: f64,
    pub dt: f64,
    pub t_phys: f64,
}

/// Fully calibrated step parameters (atomic units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LangevinParams {
    pub mu: f64,
    pub gamma: f64,
    pub dt: f64,
    pub t_phys: f64,
    pub t_int: f64,
    pub sigma_h: f64,
}

impl ThermostatSettings {
    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            bad.push(format!("mu = {}", self.mu));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            bad.push(format!("dt = {}", self.dt));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            bad.push(format!("gamma = {}", self.gamma));
        }
        if !(self.t_phys > 0.0 && self.t_phys.is_finite()) {
            bad.push(format!("T_phys = {}", self.t_phys));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid thermostat settings: {}",
                bad.join(", ")
            )))
        }
    }
}

/// Fix `sigma_H` by the discrete fluctuation-dissipation condition at `t_int`.
pub fn calibrate(settings: ThermostatSettings, t_int: f64) -> Result<LangevinParams> {
    settings.validate()?;
    if !(t_int > 0.0 && t_int.is_finite()) {
        return Err(Error::Config(format!("T_int = {t_int}")));
    }
    let s = settings.gamma * settings.dt;
    Ok(LangevinParams {
        mu: settings.mu,
        gamma: settings.gamma,
        dt: settings.dt,
        t_phys: settings.t_phys,
        t_int,
        sigma_h: fdt_sigma(settings.mu, t_int, s),
    })
}

impl LangevinParams {
    /// Calibrate with or without the a-priori temperature correction.
    pub fn new(settings: ThermostatSettings, correction: bool) -> Result<Self> {
        let s = settings.gamma * settings.dt;
        let t_int = if correction {
            corrected_internal_temperature(settings.t_phys, s)
        } else {
            settings.t_phys
        };
        calibrate(settings, t_int)
    }

    /// `s = gamma dt`.
    pub fn s(&self) -> f64 {
        self.gamma * self.dt
    }
}

/// Liouville flow for one time step, with phase tables precomputed.
#[derive(Clone, Debug)]
pub struct NveStep {
    grid: Arc<PhaseSpaceGrid>,
    dt: f64,
    /// `exp(-i (dt/2) P_l k_R / mu)`, indexed `[l * N_R + m]`.
    half_drift: Vec<Complex64>,
    /// `exp(-i dt F(R_j) k_P)`, indexed `[j * N_P + m]`.
    kick: Vec<Complex64>,
}

impl NveStep {
    pub fn new(grid: &Arc<PhaseSpaceGrid>, pes: &PesModel, mu: f64, dt: f64) -> Result<Self> {
        let (_, force) = tabulate_pes(pes, grid)?;
        Self::from_forces(grid, &force, mu, dt)
    }

    /// Build from forces already tabulated on the R nodes.
    pub fn from_forces(
        grid: &Arc<PhaseSpaceGrid>,
        force: &[f64],
        mu: f64,
        dt: f64,
    ) -> Result<Self> {
        if force.len() != grid.n_r() {
            return Err(Error::Shape {
                expected: grid.n_r(),
                found: force.len(),
            });
        }
        if !(mu > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("mu = {mu}, dt = {dt}")));
        }
        // Nyquist modes are dropped from both generators so that the discrete
        // propagator maps real amplitudes to real amplitudes.
        let kr = PhaseSpaceGrid::derivative_wavenumbers(grid.k_r_natural());
        let kp = PhaseSpaceGrid::derivative_wavenumbers(grid.k_p_natural());
        let half_drift = grid
            .p()
            .iter()
            .flat_map(|&p| {
                let a = -0.5 * dt * p / mu;
                kr.iter().map(move |&k| Complex64::from_polar(1.0, a * k))
            })
            .collect();
        let kick = force
            .iter()
            .flat_map(|&f| {
                let a = -dt * f;
                kp.iter().map(move |&k| Complex64::from_polar(1.0, a * k))
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            dt,
            half_drift,
            kick,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn drift(&self, state: &mut KvnState, full: bool) -> Result<()> {
        let nr = self.grid.n_r();
        let table = &self.half_drift;
        state.map_r_spectrum(|l, col| {
            let ph = &table[l * nr..(l + 1) * nr];
            if full {
                col.iter_mut().zip(ph).for_each(|(a, z)| *a *= z * z);
            } else {
                col.iter_mut().zip(ph).for_each(|(a, z)| *a *= z);
            }
        })
    }

    fn kick(&self, state: &mut KvnState) -> Result<()> {
        let np = self.grid.n_p();
        let table = &self.kick;
        state.map_p_spectrum(|j, row| {
            row.iter_mut()
                .zip(&table[j * np..(j + 1) * np])
                .for_each(|(a, z)| *a *= z);
        })
    }

    fn check(&self, state: &KvnState) -> Result<()> {
        state.require(Basis::Rp)?;
        if !Arc::ptr_eq(state.grid(), &self.grid) && state.grid().len() != self.grid.len() {
            return Err(Error::Shape {
                expected: self.grid.len(),
                found: state.grid().len(),
            });
        }
        Ok(())
    }

    /// One Strang step. Exactly unitary.
    pub fn apply(&self, state: &mut KvnState) -> Result<()> {
        self.check(state)?;
        self.drift(state, false)?;
        self.kick(state)?;
        self.drift(state, false)
    }

    /// `n` consecutive steps with adjacent half drifts merged.
    pub fn apply_steps(&self, state: &mut KvnState, n: usize) -> Result<()> {
        self.check(state)?;
        if n == 0 {
            return Ok(());
        }
        self.drift(state, false)?;
        for i in 0..n {
            self.kick(state)?;
            self.drift(state, i + 1 < n)?;
        }
        Ok(())
    }
}

/// Periodic band-limited interpolation kernel (even-N Dirichlet kernel),
/// `x` in units of the grid spacing.
fn periodic_sinc(x: f64, n: usize) -> f64 {
    if x.abs() < 1e-12 {
        return 1.0;
    }
    let nf = n as f64;
    (std::f64::consts::PI * x).sin() / (nf * (std::f64::consts::PI * x / nf).tan())
}

/// Momentum dilation `psi(R, P) -> e^{s/2} psi(R, e^s P)`.
///
/// The off-node samples `psi(R, e^s P_l)` come from trigonometric
/// interpolation along P, stored as a dense `N_P x N_P` real matrix. Targets
/// outside `[P_min, P_max - dP]` are set to zero.
#[derive(Clone, Debug)]
pub struct FrictionStep {
    s: f64,
    n: usize,
    matrix: Option<Vec<f64>>,
}

impl FrictionStep {
    pub fn new(grid: &PhaseSpaceGrid, s: f64) -> Self {
        Self::from_axis(grid.p(), grid.dp(), s)
    }

    pub(crate) fn from_axis(p: &[f64], dp: f64, s: f64) -> Self {
        let n = p.len();
        if s == 0.0 {
            return Self { s, n, matrix: None };
        }
        let scale = (0.5 * s).exp();
        let (lo, hi) = (p[0], p[n - 1]);
        let mut m = vec![0.0; n * n];
        for (l, row) in m.chunks_mut(n).enumerate() {
            let target = s.exp() * p[l];
            if target < lo || target > hi {
                continue;
            }
            for (lp, w) in row.iter_mut().enumerate() {
                *w = scale * periodic_sinc((target - p[lp]) / dp, n);
            }
        }
        Self {
            s,
            n,
            matrix: Some(m),
        }
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Apply to one momentum row.
    pub(crate) fn apply_row(&self, row: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        let Some(m) = &self.matrix else { return };
        scratch.clear();
        scratch.extend_from_slice(row);
        for (out, mrow) in row.iter_mut().zip(m.chunks(self.n)) {
            let mut acc = Complex64::default();
            for (w, a) in mrow.iter().zip(scratch.iter()) {
                acc += a * w;
            }
            *out = acc;
        }
    }

    /// Dilate and renormalize. Returns the squared norm before renormalization.
    pub fn apply(&self, state: &mut KvnState) -> Result<f64> {
        if state.grid().n_p() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                found: state.grid().n_p(),
            });
        }
        state.map_rows(|_, row| {
            let mut scratch = Vec::with_capacity(row.len());
            self.apply_row(row, &mut scratch);
        })?;
        let n = state.normalize();
        if !(n > 0.0) {
            return Err(Error::Degenerate("friction removed all amplitude".into()));
        }
        Ok(n)
    }
}

/// Momentum-space filter applied to the amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKernel {
    /// `cos(sigma_H k_P)`, the postselected filter.
    Cosine,
    /// `exp(-sigma_H^2 k_P^2 / 2)`, the Gaussian the cosine approximates.
    /// Test hook that isolates the cosine-filter bias.
    IdealGaussian,
}

#[derive(Clone, Debug)]
pub struct DiffusionStep {
    sigma_h: f64,
    kernel_kind: DiffusionKernel,
    /// Filter values in natural `k_P` order.
    kernel: Vec<f64>,
}

impl DiffusionStep {
    pub fn new(grid: &PhaseSpaceGrid, sigma_h: f64, kind: DiffusionKernel) -> Self {
        Self::from_wavenumbers(grid.k_p_natural(), sigma_h, kind)
    }

    pub(crate) fn from_wavenumbers(k: &[f64], sigma_h: f64, kind: DiffusionKernel) -> Self {
        let kernel = k
            .iter()
            .map(|&k| match kind {
                DiffusionKernel::Cosine => (sigma_h * k).cos(),
                DiffusionKernel::IdealGaussian => (-0.5 * sigma_h * sigma_h * k * k).exp(),
            })
            .collect();
        Self {
            sigma_h,
            kernel_kind: kind,
            kernel,
        }
    }

    pub fn sigma_h(&self) -> f64 {
        self.sigma_h
    }
    pub fn kernel_kind(&self) -> DiffusionKernel {
        self.kernel_kind
    }
    pub(crate) fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Filter, renormalize and return the success probability. The state is
    /// returned in `(R, P)`.
    pub fn apply(&self, state: &mut KvnState) -> Result<f64> {
        if state.grid().n_p() != self.kernel.len() {
            return Err(Error::Shape {
                expected: self.kernel.len(),
                found: state.grid().n_p(),
            });
        }
        let before = state.norm_sq();
        let kernel = &self.kernel;
        match state.basis() {
            Basis::RKp => {
                let np = kernel.len();
                state
                    .amplitudes_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, a)| *a *= kernel[i % np]);
                state.inverse_fourier_p()?;
            }
            Basis::KrP => {
                state.inverse_fourier_r()?;
                return self.apply(state);
            }
            Basis::Rp => state.map_p_spectrum(|_, row| {
                row.iter_mut().zip(kernel).for_each(|(a, w)| *a *= w);
            })?,
        }
        let p = state.norm_sq() / before;
        if !(p >= COLLAPSE_THRESHOLD) {
            return Err(Error::FilterCollapse(p));
        }
        state.normalize();
        Ok(p)
    }
}

/// Diagnostics of one full step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    /// Squared norm after the cosine filter, before renormalization.
    pub success_probability: f64,
    /// Squared norm after friction, before renormalization.
    pub friction_norm: f64,
    /// `sum log(success_probability)` over all steps so far.
    pub log_cumulative_success: f64,
    /// Friction renormalization exceeded [`LEAK_THRESHOLD`].
    pub boundary_leak: bool,
}

/// Precomputed three-block stepper for one grid, surface and parameter set.
#[derive(Clone, Debug)]
pub struct LangevinStepper {
    params: LangevinParams,
    nve: NveStep,
    friction: FrictionStep,
    diffusion: DiffusionStep,
    log_success: f64,
    leak_reported: bool,
}

impl LangevinStepper {
    pub fn new(grid: &Arc<PhaseSpaceGrid>, pes: &PesModel, params: LangevinParams) -> Result<Self> {
        Self::with_kernel(grid, pes, params, DiffusionKernel::Cosine)
    }

    pub fn with_kernel(
        grid: &Arc<PhaseSpaceGrid>,
        pes: &PesModel,
        params: LangevinParams,
        kernel: DiffusionKernel,
    ) -> Result<Self> {
        Ok(Self {
            params,
            nve: NveStep::new(grid, pes, params.mu, params.dt)?,
            friction: FrictionStep::new(grid, params.s()),
            diffusion: DiffusionStep::new(grid, params.sigma_h, kernel),
            log_success: 0.0,
            leak_reported: false,
        })
    }

    pub fn params(&self) -> &LangevinParams {
        &self.params
    }
    pub fn nve(&self) -> &NveStep {
        &self.nve
    }

    /// `exp(sum log p)` over all steps taken.
    pub fn cumulative_success(&self) -> f64 {
        self.log_success.exp()
    }

    /// `U_PITE U_F U_NVE`, renormalized.
    pub fn step(&mut self, state: &mut KvnState) -> Result<StepReport> {
        self.nve.apply(state)?;
        let friction_norm = self.friction.apply(state)?;
        let p = self.diffusion.apply(state)?;
        self.log_success += p.ln();
        let boundary_leak = (friction_norm - 1.0).abs() > LEAK_THRESHOLD;
        if boundary_leak && !self.leak_reported {
            warn!("friction renormalization {friction_norm:.6}: amplitude leaving the momentum window");
            self.leak_reported = true;
        }
        Ok(StepReport {
            success_probability: p,
            friction_norm,
            log_cumulative_success: self.log_success,
            boundary_leak,
        })
    }
}

/// Outcome of [`momentum_bias_experiment`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BiasMeasurement {
    pub s: f64,
    /// `(T_kin - T_int) / T_int` at stationarity.
    pub measured: f64,
    /// `tanh(s) / 2`.
    pub predicted: f64,
    pub t_kin: f64,
    pub steps: usize,
}

/// Iterate friction + cosine diffusion with `V = 0` until the kinetic
/// temperature is stationary and report the relative bias against `T_int`.
///
/// With no force the dynamics do not couple R and P, so a single momentum row
/// of the grid carries the whole experiment.
pub fn momentum_bias_experiment(
    grid: &PhaseSpaceGrid,
    params: &LangevinParams,
    n_steps: usize,
) -> Result<BiasMeasurement> {
    bias_run(grid, params, n_steps, DiffusionKernel::Cosine)
}

pub(crate) fn bias_run(
    grid: &PhaseSpaceGrid,
    params: &LangevinParams,
    n_steps: usize,
    kind: DiffusionKernel,
) -> Result<BiasMeasurement> {
    let p = grid.p();
    let n = p.len();
    let friction = FrictionStep::from_axis(p, grid.dp(), params.s());
    let diffusion = DiffusionStep::from_wavenumbers(grid.k_p_natural(), params.sigma_h, kind);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let v0 = params.mu * params.t_int;
    let mut row: Vec<Complex64> = p
        .iter()
        .map(|&x| Complex64::new((-x * x / (4.0 * v0)).exp(), 0.0))
        .collect();
    let mut scratch = Vec::with_capacity(n);
    let second_moment = |row: &[Complex64]| {
        let (z, m2) = row.iter().zip(p).fold((0.0, 0.0), |(z, m2), (a, x)| {
            let w = a.norm_sqr();
            (z + w, m2 + w * x * x)
        });
        m2 / z
    };
    let mut t_prev = second_moment(&row) / params.mu;
    let mut quiet = 0usize;
    for step in 1..=n_steps {
        friction.apply_row(&mut row, &mut scratch);
        fwd.process(&mut row);
        row.iter_mut()
            .zip(diffusion.kernel())
            .for_each(|(a, w)| *a *= w);
        inv.process(&mut row);
        let z: f64 = row.iter().map(|a| a.norm_sqr()).sum();
        if !(z > 0.0) {
            return Err(Error::FilterCollapse(0.0));
        }
        let scale = 1.0 / z.sqrt();
        row.iter_mut().for_each(|a| *a *= scale);

        let t = second_moment(&row) / params.mu;
        if ((t - t_prev) / t).abs() < STATIONARY_TOL {
            quiet += 1;
        } else {
            quiet = 0;
        }
        t_prev = t;
        if quiet >= STATIONARY_WINDOW {
            return Ok(BiasMeasurement {
                s: params.s(),
                measured: (t - params.t_int) / params.t_int,
                predicted: 0.5 * params.s().tanh(),
                t_kin: t,
                steps: step,
            });
        }
    }
    Err(Error::NonConvergence {
        steps: n_steps,
        what: "kinetic temperature not stationary".into(),
    })
}
