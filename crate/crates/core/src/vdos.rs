//! Vibrational spectra: branch-selective excitations `A+- = Q -+ i Pi`, an
//! exact simulation of the phase-estimation readout over KvN NVE evolution,
//! and the trajectory reference binned onto the same frequency grid.
//!
//! Bin `j` of an `m`-ancilla readout is centred at
//! `omega_j = omega_shift + j * 2 pi / (tau 2^m)`, and
//! `P_j = || (1/M) sum_k e^{i k omega_j tau} U^k alpha ||^2` with
//! `U = exp(-i tau H_NVE)`, `M = 2^m`.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::electronic::PesModel;
use crate::error::{Error, Result};
use crate::grid::{Basis, KvnState, PhaseSpaceGrid};
use crate::oracles::TrajectoryEnsemble;
use crate::par;
use crate::propagator::NveStep;
use crate::units;

/// Above this many bytes of accumulators the correlation route is used.
pub const DIRECT_ROUTE_BYTES: usize = 256 << 20;

/// Default half-width (in grid points) of the curvature fit.
pub const FIT_HALF_WIDTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Plus => "plus",
            Branch::Minus => "minus",
        }
    }
}

/// Readout register and evolution interval (atomic units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QpeConfig {
    pub m: u32,
    pub tau: f64,
    pub omega_shift: f64,
    /// Trotter steps per application of `U(tau)`.
    pub substeps: usize,
}

impl QpeConfig {
    pub fn new(m: u32, tau: f64) -> Self {
        Self {
            m,
            tau,
            omega_shift: 0.0,
            substeps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=20).contains(&self.m) {
            return Err(Error::Config(format!(
                "QPE register m = {} outside 1..=20",
                self.m
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite() && self.omega_shift.is_finite()) {
            return Err(Error::Config(format!(
                "QPE tau = {}, omega_shift = {}",
                self.tau, self.omega_shift
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("QPE substeps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn registers(&self) -> usize {
        1 << self.m
    }

    /// `Omega = 2 pi / tau`.
    pub fn window_width(&self) -> f64 {
        2.0 * PI / self.tau
    }

    pub fn bin_width(&self) -> f64 {
        self.window_width() / self.registers() as f64
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let d = self.bin_width();
        (0..self.registers())
            .map(|j| self.omega_shift + j as f64 * d)
            .collect()
    }
}

/// Evolution applied once per controlled power.
pub trait UnitaryEvolution: Sync {
    fn advance(&self, state: &mut KvnState) -> Result<()>;
}

/// `U_NVE(tau)` as `substeps` Strang steps of `tau / substeps`.
pub struct NveEvolution {
    step: NveStep,
    substeps: usize,
}

impl NveEvolution {
    pub fn new(
        grid: &Arc<PhaseSpaceGrid>,
        pes: &PesModel,
        mu: f64,
        cfg: &QpeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let step = NveStep::new(grid, pes, mu, cfg.tau / cfg.substeps as f64)?;
        Ok(Self {
            step,
            substeps: cfg.substeps,
        })
    }
}

impl UnitaryEvolution for NveEvolution {
    fn advance(&self, state: &mut KvnState) -> Result<()> {
        self.step.apply_steps(state, self.substeps)
    }
}

/// Test generator: amplitude `i` picks up `exp(-i omega_i tau)` per power.
pub struct DiagonalEvolution {
    phases: Vec<Complex64>,
}

impl DiagonalEvolution {
    pub fn new(omegas: &[f64], tau: f64) -> Self {
        Self {
            phases: omegas
                .iter()
                .map(|w| Complex64::from_polar(1.0, -w * tau))
                .collect(),
        }
    }
}

impl UnitaryEvolution for DiagonalEvolution {
    fn advance(&self, state: &mut KvnState) -> Result<()> {
        let amps = state.amplitudes_mut();
        if amps.len() != self.phases.len() {
            return Err(Error::Shape {
                expected: self.phases.len(),
                found: amps.len(),
            });
        }
        amps.iter_mut().zip(&self.phases).for_each(|(a, z)| *a *= z);
        Ok(())
    }
}

/// Binned spectrum on the readout grid. Frequencies in a.u.
#[derive(Clone, Debug, Serialize)]
pub struct SpectrumResult {
    pub omega: Vec<f64>,
    pub prob: Vec<f64>,
    pub branch: Option<Branch>,
    pub branch_weight: Option<f64>,
    pub config: QpeConfig,
}

impl SpectrumResult {
    pub fn peak_bin(&self) -> usize {
        self.prob
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    pub fn peak_omega(&self) -> f64 {
        self.omega[self.peak_bin()]
    }

    pub fn omega_cm1(&self) -> Vec<f64> {
        self.omega
            .iter()
            .map(|&w| units::au_freq_to_cm1(w))
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.prob.iter().sum()
    }

    /// Fold onto the `|omega|` axis: bins `j` and `M - j` are merged.
    /// Returns `(|omega_j|, P)` for `j = 0..=M/2`. Needs `omega_shift = 0`.
    pub fn folded(&self) -> Result<Vec<(f64, f64)>> {
        if self.config.omega_shift != 0.0 {
            return Err(Error::Config(
                "|omega| folding needs omega_shift = 0".into(),
            ));
        }
        let n = self.prob.len();
        Ok((0..=n / 2)
            .map(|j| {
                let p = if j == 0 || 2 * j == n {
                    self.prob[j]
                } else {
                    self.prob[j] + self.prob[n - j]
                };
                (self.omega[j], p)
            })
            .collect())
    }
}

/// `F_m(theta) = (1/2^m) [sin(2^m theta / 2) / sin(theta / 2)]^2`.
pub fn fejer_kernel(theta: f64, m: u32) -> f64 {
    let n = (1u64 << m) as f64;
    let s = (0.5 * theta).sin();
    if s.abs() < 1e-12 {
        return n;
    }
    let r = (0.5 * n * theta).sin() / s;
    r * r / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpeRoute {
    /// Direct accumulators below [`DIRECT_ROUTE_BYTES`], correlations above.
    Auto,
    /// One accumulator state per bin.
    Direct,
    /// `P_j = (1/M^2) sum_d (M - |d|) e^{i d omega_j tau} <alpha|U^d alpha>`;
    /// exact for unitary `U`.
    Correlation,
}

/// Readout distribution of `input` (normalized internally).
pub fn qpe_spectrum(
    input: &KvnState,
    evolution: &dyn UnitaryEvolution,
    cfg: &QpeConfig,
) -> Result<SpectrumResult> {
    qpe_spectrum_via(input, evolution, cfg, QpeRoute::Auto)
}

pub fn qpe_spectrum_via(
    input: &KvnState,
    evolution: &dyn UnitaryEvolution,
    cfg: &QpeConfig,
    route: QpeRoute,
) -> Result<SpectrumResult> {
    cfg.validate()?;
    let mut alpha = input.clone();
    alpha.normalize();
    let m = cfg.registers();
    let bytes = m
        .saturating_mul(alpha.amplitudes().len())
        .saturating_mul(16);
    let route = match route {
        QpeRoute::Auto if bytes <= DIRECT_ROUTE_BYTES => QpeRoute::Direct,
        QpeRoute::Auto => QpeRoute::Correlation,
        r => r,
    };
    let phi: Vec<f64> = cfg.bin_centers().iter().map(|w| w * cfg.tau).collect();
    let prob = match route {
        QpeRoute::Direct => direct_route(alpha, evolution, &phi)?,
        _ => correlation_route(alpha, evolution, &phi)?,
    };
    Ok(SpectrumResult {
        omega: cfg.bin_centers(),
        prob,
        branch: None,
        branch_weight: None,
        config: *cfg,
    })
}

fn direct_route(
    mut state: KvnState,
    evolution: &dyn UnitaryEvolution,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let m = phi.len();
    let n = state.amplitudes().len();
    let mut acc = vec![Complex64::default(); m * n];
    for k in 0..m {
        if k > 0 {
            evolution.advance(&mut state)?;
        }
        let x = state.amplitudes();
        par::for_each_chunk(&mut acc, n, |j, a| {
            let w = Complex64::from_polar(1.0, (k as f64 * phi[j]).rem_euclid(2.0 * PI));
            a.iter_mut().zip(x).for_each(|(a, x)| *a += w * x);
        });
    }
    let cell = state.grid().cell();
    let scale = cell / (m * m) as f64;
    Ok(acc
        .chunks(n)
        .map(|a| a.iter().map(|z| z.norm_sqr()).sum::<f64>() * scale)
        .collect())
}

fn correlation_route(
    alpha: KvnState,
    evolution: &dyn UnitaryEvolution,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let m = phi.len();
    let mut state = alpha.clone();
    let mut c = Vec::with_capacity(m);
    for d in 0..m {
        if d > 0 {
            evolution.advance(&mut state)?;
        }
        c.push(alpha.inner(&state)?);
    }
    let mf = m as f64;
    Ok(phi
        .iter()
        .map(|&p| {
            let tail: f64 = (1..m)
                .map(|d| {
                    (mf - d as f64)
                        * (Complex64::from_polar(1.0, (d as f64 * p).rem_euclid(2.0 * PI)) * c[d])
                            .re
                })
                .sum();
            ((mf * c[0].re + 2.0 * tail) / (mf * mf)).max(0.0)
        })
        .collect())
}

/// QPE of `input` under `U_NVE(tau)` on `pes`.
pub fn qpe_nve(
    input: &KvnState,
    pes: &PesModel,
    mu: f64,
    cfg: &QpeConfig,
) -> Result<SpectrumResult> {
    let evo = NveEvolution::new(input.grid(), pes, mu, cfg)?;
    qpe_spectrum(input, &evo, cfg)
}

/// Harmonic frequency at the potential minimum over the grid's R nodes.
pub fn reference_frequency(pes: &PesModel, grid: &PhaseSpaceGrid, mu: f64) -> Result<f64> {
    reference_frequency_with(pes, grid.r(), mu, FIT_HALF_WIDTH)
}

/// Least-squares parabola through `2 * half_width + 1` equally spaced points
/// around the minimum. The stencil is re-centred on the fitted vertex twice
/// so the node offset does not leak cubic anharmonicity into the curvature.
pub fn reference_frequency_with(
    pes: &PesModel,
    nodes: &[f64],
    mu: f64,
    half_width: usize,
) -> Result<f64> {
    if nodes.len() < 2 * half_width + 1 || half_width == 0 {
        return Err(Error::Config(format!(
            "{} nodes cannot hold a +-{half_width} point fit",
            nodes.len()
        )));
    }
    let v: Vec<f64> = nodes
        .iter()
        .map(|&r| pes.energy(r))
        .collect::<Result<_>>()?;
    let imin = v
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) },
        )
        .0;
    if imin == 0 || imin + 1 == nodes.len() {
        return Err(Error::Config(format!(
            "potential minimum on the grid boundary at R = {}",
            nodes[imin]
        )));
    }
    let h = nodes[1] - nodes[0];
    let mut center = nodes[imin];
    let mut curv = 0.0;
    for _ in 0..3 {
        let xs: Vec<f64> = (-(half_width as i64)..=half_width as i64)
            .map(|i| i as f64 * h)
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| pes.energy(center + x))
            .collect::<Result<_>>()?;
        let (c1, c2) = fit_parabola(&xs, &ys);
        if !(c2 > 0.0) {
            return Err(Error::Degenerate(format!(
                "non-positive curvature {} at R = {center}",
                2.0 * c2
            )));
        }
        curv = 2.0 * c2;
        let shift = -c1 / (2.0 * c2);
        if shift.abs() > h * half_width as f64 {
            break;
        }
        center += shift;
    }
    Ok((curv / mu).sqrt())
}

/// Fit `y = c0 + c1 x + c2 x^2` on a stencil symmetric about zero.
fn fit_parabola(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let s2: f64 = x.iter().map(|x| x * x).sum();
    let s4: f64 = x.iter().map(|x| x.powi(4)).sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(x, y)| x * y).sum();
    let sx2y: f64 = x.iter().zip(y).map(|(x, y)| x * x * y).sum();
    let c1 = sxy / s2;
    let c2 = (n * sx2y - s2 * sy) / (n * s4 - s2 * s2);
    (c1, c2)
}

/// Normalized `A+ psi`, `A- psi` and their squared norms.
#[derive(Clone, Debug)]
pub struct BranchStates {
    pub plus: KvnState,
    pub minus: KvnState,
    pub weight_plus: f64,
    pub weight_minus: f64,
    /// `<R>` of the input, the origin of `Q`.
    pub mean_r: f64,
}

impl BranchStates {
    pub fn state(&self, b: Branch) -> &KvnState {
        match b {
            Branch::Plus => &self.plus,
            Branch::Minus => &self.minus,
        }
    }

    pub fn weight(&self, b: Branch) -> f64 {
        match b {
            Branch::Plus => self.weight_plus,
            Branch::Minus => self.weight_minus,
        }
    }
}

/// `A+- psi = (Q -+ i P / (mu omega_ref)) psi` with `Q = R - <R>_psi`.
pub fn prepare_branch_states(eq: &KvnState, omega_ref: f64, mu: f64) -> Result<BranchStates> {
    eq.require(Basis::Rp)?;
    if !(omega_ref > 0.0 && mu > 0.0) {
        return Err(Error::Config(format!("omega_ref = {omega_ref}, mu = {mu}")));
    }
    let norm = eq.norm_sq();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("zero-norm equilibrium state".into()));
    }
    let grid = eq.grid().clone();
    let np = grid.n_p();
    let mean_r = eq
        .amplitudes()
        .chunks(np)
        .zip(grid.r())
        .map(|(row, r)| r * row.iter().map(|a| a.norm_sqr()).sum::<f64>())
        .sum::<f64>()
        * grid.cell()
        / norm;
    let build = |sign: f64| -> Result<(KvnState, f64)> {
        let amps: Vec<Complex64> = eq
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let q = grid.r()[i / np] - mean_r;
                let pi = grid.p()[i % np] / (mu * omega_ref);
                Complex64::new(q, -sign * pi) * a
            })
            .collect();
        let mut s = KvnState::from_raw(grid.clone(), Basis::Rp, amps);
        let w = s.norm_sq() / norm;
        // Q is only exact to rounding of <R>.
        if !(w > 1e-24 * (1.0 + mean_r * mean_r)) {
            return Err(Error::Degenerate("zero-norm branch state".into()));
        }
        s.normalize();
        Ok((s, w))
    };
    let (plus, weight_plus) = build(1.0)?;
    let (minus, weight_minus) = build(-1.0)?;
    Ok(BranchStates {
        plus,
        minus,
        weight_plus,
        weight_minus,
        mean_r,
    })
}

/// Both branch readouts, labelled and weighted.
pub fn branch_spectra(
    eq: &KvnState,
    pes: &PesModel,
    mu: f64,
    omega_ref: f64,
    cfg: &QpeConfig,
) -> Result<(SpectrumResult, SpectrumResult)> {
    let states = prepare_branch_states(eq, omega_ref, mu)?;
    let evo = NveEvolution::new(eq.grid(), pes, mu, cfg)?;
    let run = |b: Branch| -> Result<SpectrumResult> {
        let mut s = qpe_spectrum(states.state(b), &evo, cfg)?;
        s.branch = Some(b);
        s.branch_weight = Some(states.weight(b));
        Ok(s)
    };
    Ok((run(Branch::Plus)?, run(Branch::Minus)?))
}

/// `C_QQ(t_n) = <Q psi| U(dt)^n |Q psi>` for `n = 0..n_t`.
pub fn kvn_autocorrelation(
    eq: &KvnState,
    pes: &PesModel,
    mu: f64,
    dt: f64,
    n_t: usize,
) -> Result<Vec<Complex64>> {
    eq.require(Basis::Rp)?;
    let grid = eq.grid().clone();
    let np = grid.n_p();
    let norm = eq.norm_sq();
    let mean_r = eq
        .amplitudes()
        .chunks(np)
        .zip(grid.r())
        .map(|(row, r)| r * row.iter().map(|a| a.norm_sqr()).sum::<f64>())
        .sum::<f64>()
        * grid.cell()
        / norm;
    let amps = eq
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(i, a)| a * ((grid.r()[i / np] - mean_r) / norm.sqrt()))
        .collect();
    let q0 = KvnState::from_raw(grid.clone(), Basis::Rp, amps);
    let step = NveStep::new(&grid, pes, mu, dt)?;
    let mut s = q0.clone();
    let mut out = Vec::with_capacity(n_t);
    for n in 0..n_t {
        if n > 0 {
            step.apply(&mut s)?;
        }
        out.push(q0.inner(&s)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// One-sided Hann taper `w_n = (1 + cos(pi n / N)) / 2`.
    Hann,
    Rect,
}

impl Window {
    fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 * (1.0 + (PI * i as f64 / n as f64).cos()))
                .collect(),
            Window::Rect => vec![1.0; n],
        }
    }
}

/// Postprocessing of a correlation series onto the readout bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceSettings {
    pub window: Window,
    /// Samples used from the series; `None` means the readout window `M tau`.
    pub n_samples: Option<usize>,
    /// Zero-padding factor of the frequency grid.
    pub pad: usize,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            n_samples: None,
            pad: 8,
        }
    }
}

/// `S(omega) = |sum_n w_n C(t_n) e^{i omega t_n} h|^2` on the non-negative
/// frequency axis, wrapped into `[omega_shift, omega_shift + Omega)` and
/// smoothed with the readout kernel, `S_j = N sum F_m[(omega - omega_j) tau] S_wrap(omega)`.
/// Returns bin weights summing to one.
pub fn binned_spectrum(
    c: &[Complex64],
    h: f64,
    cfg: &QpeConfig,
    settings: &ReferenceSettings,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(h > 0.0) || settings.pad == 0 {
        return Err(Error::Config(format!(
            "sample interval {h}, pad {}",
            settings.pad
        )));
    }
    let m = cfg.registers();
    let n_t = settings
        .n_samples
        .unwrap_or(((m as f64 * cfg.tau) / h).round() as usize);
    if n_t < 2 || c.len() < n_t {
        return Err(Error::Config(format!(
            "correlation series has {} samples, window needs {n_t}",
            c.len()
        )));
    }
    let len = n_t * settings.pad;
    let mut buf = vec![Complex64::default(); len];
    for ((b, c), w) in buf.iter_mut().zip(c).zip(settings.window.weights(n_t)) {
        *b = c * (w * h);
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    let omega_big = cfg.window_width();
    let dw = 2.0 * PI / (len as f64 * h);
    let wrapped: Vec<(f64, f64)> = buf[..=len / 2]
        .iter()
        .enumerate()
        .map(|(q, z)| {
            (
                (q as f64 * dw - cfg.omega_shift).rem_euclid(omega_big),
                z.norm_sqr(),
            )
        })
        .collect();
    let bins: Vec<f64> = par::map_indexed(m, |j| {
        let wj = j as f64 * cfg.bin_width();
        wrapped
            .iter()
            .map(|&(w, s)| fejer_kernel((w - wj) * cfg.tau, cfg.m) * s)
            .sum()
    });
    let total: f64 = bins.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("reference spectrum has no weight".into()));
    }
    Ok(bins.into_iter().map(|b| b / total).collect())
}

/// Trajectory reference: `C(t_n) = (1/N) sum_r Q_r(t_n) Q_r(0)` with
/// `Q = R - <R>` over all frames, binned by [`binned_spectrum`].
pub fn aimd_reference_spectrum(
    ensemble: &TrajectoryEnsemble,
    cfg: &QpeConfig,
    settings: &ReferenceSettings,
) -> Result<SpectrumResult> {
    let trajs = &ensemble.trajectories;
    if trajs.is_empty() {
        return Err(Error::Config("empty trajectory set".into()));
    }
    let h = trajs[0].dt * trajs[0].stride as f64;
    let len = trajs.iter().map(|t| t.r.len()).min().unwrap_or(0);
    if trajs
        .iter()
        .any(|t| (t.dt * t.stride as f64 - h).abs() > 1e-12 * h)
    {
        return Err(Error::Config(
            "trajectories have different sample intervals".into(),
        ));
    }
    let count = (trajs.len() * len) as f64;
    let mean = trajs
        .iter()
        .map(|t| t.r[..len].iter().sum::<f64>())
        .sum::<f64>()
        / count;
    let c: Vec<Complex64> = (0..len)
        .map(|n| {
            let s: f64 = trajs
                .iter()
                .map(|t| (t.r[n] - mean) * (t.r[0] - mean))
                .sum();
            Complex64::new(s / trajs.len() as f64, 0.0)
        })
        .collect();
    let prob = binned_spectrum(&c, h, cfg, settings)?;
    Ok(SpectrumResult {
        omega: cfg.bin_centers(),
        prob,
        branch: None,
        branch_weight: None,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{nve_ensemble, Trajectory};
    use crate::tst::analytic_canonical_state;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_state(grid: &Arc<PhaseSpaceGrid>, seed: u64) -> KvnState {
        use rand::Rng;
        let mut rng = crate::oracles::stream(seed, 0);
        let amps = (0..grid.len())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        KvnState::from_amplitudes(grid.clone(), Basis::Rp, amps).unwrap()
    }

    fn small_grid() -> Arc<PhaseSpaceGrid> {
        PhaseSpaceGrid::new(3, 3, (0.0, 1.0), (-1.0, 1.0)).unwrap()
    }

    /// Harmonic oscillator with mu = 1, omega0 = 1 on a grid wide enough for
    /// the T = 1 canonical state.
    fn oscillator() -> (Arc<PhaseSpaceGrid>, PesModel, KvnState) {
        let g = PhaseSpaceGrid::new(6, 6, (-9.0, 9.0), (-9.0, 9.0)).unwrap();
        let pes = PesModel::Harmonic { k: 1.0, r0: 0.0 };
        let eq = analytic_canonical_state(&g, &pes, 1.0, 1.0).unwrap();
        (g, pes, eq)
    }

    #[test]
    fn bin_layout() {
        let cfg = QpeConfig {
            m: 3,
            tau: 2.0,
            omega_shift: 0.5,
            substeps: 1,
        };
        assert_relative_eq!(cfg.window_width(), PI);
        assert_relative_eq!(cfg.bin_width(), PI / 8.0);
        assert_relative_eq!(cfg.bin_centers()[3], 0.5 + 3.0 * PI / 8.0);
        assert!(QpeConfig { substeps: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn fejer_kernel_direct_sum() {
        for &theta in &[0.0, 1e-9, 0.3, 1.7, -2.2, 2.0 * PI] {
            let m = 4;
            let n = 16;
            let s: Complex64 = (0..n)
                .map(|k| Complex64::from_polar(1.0, k as f64 * theta))
                .sum();
            assert!((fejer_kernel(theta, m) - s.norm_sqr() / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn on_bin_eigenstate_is_a_delta() {
        let g = small_grid();
        let cfg = QpeConfig {
            m: 4,
            tau: 0.7,
            omega_shift: 0.0,
            substeps: 1,
        };
        let w = cfg.bin_centers()[5];
        let evo = DiagonalEvolution::new(&vec![w; g.len()], cfg.tau);
        for route in [QpeRoute::Direct, QpeRoute::Correlation] {
            let s = qpe_spectrum_via(&random_state(&g, 1), &evo, &cfg, route).unwrap();
            for (j, p) in s.prob.iter().enumerate() {
                let want = if j == 5 { 1.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-10, "{route:?} bin {j}: {p}");
            }
        }
    }

    #[test]
    fn off_bin_eigenstate_follows_fejer() {
        let g = small_grid();
        let cfg = QpeConfig {
            m: 5,
            tau: 0.3,
            omega_shift: -1.1,
            substeps: 1,
        };
        let w = cfg.bin_centers()[9] + 0.37 * cfg.bin_width();
        let evo = DiagonalEvolution::new(&vec![w; g.len()], cfg.tau);
        for route in [QpeRoute::Direct, QpeRoute::Correlation] {
            let s = qpe_spectrum_via(&random_state(&g, 2), &evo, &cfg, route).unwrap();
            for (j, p) in s.prob.iter().enumerate() {
                let want = fejer_kernel((w - s.omega[j]) * cfg.tau, cfg.m) / cfg.registers() as f64;
                assert!((p - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixed_eigenstates_add_incoherently() {
        let g = small_grid();
        let cfg = QpeConfig::new(4, 1.0);
        let omegas: Vec<f64> = (0..g.len())
            .map(|i| if i % 3 == 0 { 0.81 } else { -2.3 })
            .collect();
        let evo = DiagonalEvolution::new(&omegas, cfg.tau);
        let s = random_state(&g, 3);
        let w0: f64 = s
            .amplitudes()
            .iter()
            .step_by(3)
            .map(|a| a.norm_sqr())
            .sum::<f64>()
            * g.cell();
        let out = qpe_spectrum(&s, &evo, &cfg).unwrap();
        for (j, p) in out.prob.iter().enumerate() {
            let f = |w: f64| fejer_kernel((w - out.omega[j]) * cfg.tau, cfg.m) / 16.0;
            assert!((p - (w0 * f(0.81) + (1.0 - w0) * f(-2.3))).abs() < 1e-10);
        }
    }

    #[test]
    fn routes_agree_on_kvn_flow() {
        let (g, pes, eq) = oscillator();
        let cfg = QpeConfig {
            m: 4,
            tau: 0.9,
            omega_shift: 0.0,
            substeps: 4,
        };
        let b = prepare_branch_states(&eq, 1.0, 1.0).unwrap();
        let evo = NveEvolution::new(&g, &pes, 1.0, &cfg).unwrap();
        let a = qpe_spectrum_via(&b.plus, &evo, &cfg, QpeRoute::Direct).unwrap();
        let c = qpe_spectrum_via(&b.plus, &evo, &cfg, QpeRoute::Correlation).unwrap();
        for (x, y) in a.prob.iter().zip(&c.prob) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((a.total() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn positive_branch_reads_out_the_oscillator_frequency() {
        let (_, pes, eq) = oscillator();
        // omega0 = 1 sits on bin 2.
        let cfg = QpeConfig {
            m: 4,
            tau: 4.0 * PI / 16.0,
            omega_shift: 0.0,
            substeps: 8,
        };
        let (p, m) = branch_spectra(&eq, &pes, 1.0, 1.0, &cfg).unwrap();
        assert_eq!(p.peak_bin(), 2);
        assert!(p.prob[2] > 0.99, "{}", p.prob[2]);
        assert_eq!(m.peak_bin(), 14);
        assert!((p.branch_weight.unwrap() - m.branch_weight.unwrap()).abs() < 1e-10);
        for j in 0..16 {
            assert!((p.prob[j] - m.prob[(16 - j) % 16]).abs() < 1e-10);
        }
        let f = m.folded().unwrap();
        assert_eq!(f.len(), 9);
        assert!(f[2].1 > 0.99);
    }

    #[test]
    fn misspecified_reference_frequency_keeps_the_peak() {
        let (_, pes, eq) = oscillator();
        let cfg = QpeConfig {
            m: 4,
            tau: 4.0 * PI / 16.0,
            omega_shift: 0.0,
            substeps: 8,
        };
        for w in [0.8, 1.2] {
            let (p, _) = branch_spectra(&eq, &pes, 1.0, w, &cfg).unwrap();
            assert_eq!(p.peak_bin(), 2);
        }
    }

    #[test]
    fn reference_frequency_examples() {
        let mu = 1836.0;
        let w0 = 0.02;
        let g = PhaseSpaceGrid::new(8, 3, (0.5, 4.0), (-1.0, 1.0)).unwrap();
        let h = PesModel::Harmonic {
            k: mu * w0 * w0,
            r0: 1.4,
        };
        assert_relative_eq!(
            reference_frequency(&h, &g, mu).unwrap(),
            w0,
            max_relative = 1e-6
        );

        let (de, a) = (0.1744, 1.02764);
        let morse = crate::electronic::morse_pes(de, a, 1.4011).unwrap();
        let exact = (2.0 * de * a * a / mu).sqrt();
        let full = reference_frequency(&morse, &g, mu).unwrap();
        assert_relative_eq!(full, exact, max_relative = 5e-3);
        let half = reference_frequency_with(&morse, g.r(), mu, 2).unwrap();
        assert!((half / full - 1.0).abs() < 2e-3);

        let edge = PhaseSpaceGrid::new(6, 3, (1.6, 4.0), (-1.0, 1.0)).unwrap();
        assert!(matches!(
            reference_frequency(&morse, &edge, mu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gaussian_branch_weight_by_quadrature() {
        let g = PhaseSpaceGrid::new(6, 6, (-4.0, 4.0), (-8.0, 8.0)).unwrap();
        let psi = KvnState::gaussian(&g, 0.3, 0.5, 0.5, 0.9).unwrap();
        let (mu, w) = (2.0, 0.7);
        let b = prepare_branch_states(&psi, w, mu).unwrap();
        // Quadrature of <(R - <R>)^2> + <(P / (mu w))^2> over the density.
        let rho = psi.density().unwrap();
        let np = g.n_p();
        let m1: f64 = rho
            .iter()
            .enumerate()
            .map(|(i, d)| d * g.r()[i / np])
            .sum::<f64>()
            * g.cell();
        let want: f64 = rho
            .iter()
            .enumerate()
            .map(|(i, d)| d * ((g.r()[i / np] - m1).powi(2) + (g.p()[i % np] / (mu * w)).powi(2)))
            .sum::<f64>()
            * g.cell();
        assert!((b.weight_plus - want).abs() < 1e-8);
        assert!((b.mean_r - m1).abs() < 1e-12);
    }

    #[test]
    fn real_state_branches_are_mirror_images() {
        let (_, _, eq) = oscillator();
        let b = prepare_branch_states(&eq, 1.3, 1.0).unwrap();
        for (x, y) in b
            .plus
            .density()
            .unwrap()
            .iter()
            .zip(b.minus.density().unwrap())
        {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_branch_is_degenerate() {
        let g = small_grid();
        let mut amps = vec![Complex64::default(); g.len()];
        // A single node with P = 0 and R = <R>: Q = Pi = 0 there.
        let l = g.p_index(0.0).unwrap();
        amps[3 * g.n_p() + l] = Complex64::new(1.0, 0.0);
        let s = KvnState::from_amplitudes(g.clone(), Basis::Rp, amps).unwrap();
        assert!(matches!(
            prepare_branch_states(&s, 1.0, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn autocorrelation_of_the_oscillator() {
        let (_, pes, eq) = oscillator();
        let dt = 0.05;
        let c = kvn_autocorrelation(&eq, &pes, 1.0, dt, 160).unwrap();
        assert!(c[0].im.abs() < 1e-14 && c[0].re > 0.0);
        assert_relative_eq!(c[0].re, 1.0, max_relative = 1e-3);
        // First recurrence of Re C at the period 2 pi.
        let n = (100..160)
            .max_by(|&a, &b| c[a].re.total_cmp(&c[b].re))
            .unwrap();
        assert!((n as f64 * dt - 2.0 * PI).abs() <= dt, "{n}");
    }

    #[test]
    fn autocorrelation_spectrum_matches_readout() {
        let (_, pes, eq) = oscillator();
        let cfg = QpeConfig {
            m: 4,
            tau: 0.7,
            omega_shift: 0.0,
            substeps: 7,
        };
        let c = kvn_autocorrelation(&eq, &pes, 1.0, 0.1, 16 * 7 + 1).unwrap();
        let bins = binned_spectrum(&c, 0.1, &cfg, &ReferenceSettings::default()).unwrap();
        let peak = (0..16)
            .max_by(|&a, &b| bins[a].total_cmp(&bins[b]))
            .unwrap();
        let (p, _) = branch_spectra(&eq, &pes, 1.0, 1.0, &cfg).unwrap();
        assert_eq!(peak, p.peak_bin());
    }

    fn harmonic_trajectory(w0: f64, dt: f64, n: usize) -> Trajectory {
        let pes = PesModel::Harmonic {
            k: w0 * w0,
            r0: 0.0,
        };
        crate::oracles::verlet_strided(&pes, 1.0, 0.5, 0.0, dt, n, 1).unwrap()
    }

    #[test]
    fn single_trajectory_lands_in_its_bin() {
        let cfg = QpeConfig::new(5, 0.5);
        let w0 = cfg.bin_centers()[3] + 0.1 * cfg.bin_width();
        let ens = TrajectoryEnsemble {
            seed: 0,
            trajectories: vec![harmonic_trajectory(w0, 0.05, 400)],
        };
        let s = aimd_reference_spectrum(&ens, &cfg, &ReferenceSettings::default()).unwrap();
        assert_eq!(s.peak_bin(), 3);
        assert!((s.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aliased_line_wraps_into_the_same_bin() {
        let cfg = QpeConfig::new(4, 1.0);
        let w0 = cfg.bin_centers()[2];
        let h = 0.125;
        let n = 16 * 8 + 1;
        let line = |w: f64| -> Vec<Complex64> {
            (0..n)
                .map(|i| Complex64::new((w * i as f64 * h).cos(), 0.0))
                .collect()
        };
        let rs = ReferenceSettings::default();
        let a = binned_spectrum(&line(w0), h, &cfg, &rs).unwrap();
        let b = binned_spectrum(&line(w0 + cfg.window_width()), h, &cfg, &rs).unwrap();
        let peak = |v: &[f64]| (0..v.len()).max_by(|&x, &y| v[x].total_cmp(&v[y])).unwrap();
        assert_eq!(peak(&a), 2);
        assert_eq!(peak(&b), 2);
    }

    #[test]
    fn reference_rejects_empty_input() {
        let ens = TrajectoryEnsemble {
            seed: 0,
            trajectories: vec![],
        };
        assert!(aimd_reference_spectrum(
            &ens,
            &QpeConfig::new(4, 1.0),
            &ReferenceSettings::default()
        )
        .is_err());
    }

    #[test]
    fn trajectory_ensemble_and_readout_agree_on_morse() {
        let mu = 1.0;
        let pes = crate::electronic::morse_pes(5.0, 0.5, 4.0).unwrap();
        let w = (2.0 * 5.0 * 0.25 / mu as f64).sqrt();
        let cfg = QpeConfig {
            m: 4,
            tau: 2.0 * PI * 3.0 / (16.0 * w),
            omega_shift: 0.0,
            substeps: 8,
        };
        let g = PhaseSpaceGrid::new(6, 6, (0.0, 10.0), (-6.0, 6.0)).unwrap();
        let eq = analytic_canonical_state(&g, &pes, mu, 0.5).unwrap();
        let (p, _) = branch_spectra(&eq, &pes, mu, w, &cfg).unwrap();
        let samples =
            crate::oracles::canonical_sampler(&pes, mu, 0.5, 128, 4, (1.0, 10.0)).unwrap();
        let ens = nve_ensemble(&pes, mu, &samples.points(), cfg.tau / 32.0, 16 * 32, 32).unwrap();
        let r = aimd_reference_spectrum(&ens, &cfg, &ReferenceSettings::default()).unwrap();
        assert_eq!(p.peak_bin(), r.peak_bin());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn readout_is_normalized(seed in 0u64..1000, tau in 0.1f64..3.0, shift in -2.0f64..2.0) {
            let g = small_grid();
            let cfg = QpeConfig { m: 3, tau, omega_shift: shift, substeps: 1 };
            let omegas: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.731).sin() * 4.0).collect();
            let evo = DiagonalEvolution::new(&omegas, tau);
            for route in [QpeRoute::Direct, QpeRoute::Correlation] {
                let s = qpe_spectrum_via(&random_state(&g, seed), &evo, &cfg, route).unwrap();
                prop_assert!((s.total() - 1.0).abs() < 1e-10);
                prop_assert!(s.prob.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn branch_weights_are_equal(seed in 0u64..1000, w in 0.2f64..5.0, mu in 0.5f64..3.0) {
            let g = PhaseSpaceGrid::new(4, 4, (-2.0, 2.0), (-3.0, 3.0)).unwrap();
            let b = prepare_branch_states(&random_state(&g, seed), w, mu).unwrap();
            prop_assert!((b.weight_plus - b.weight_minus).abs() < 1e-10 * b.weight_plus.max(1.0));
        }
    }
}
