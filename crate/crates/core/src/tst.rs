//! Transition-state rates from the canonical state.
//!
//! `k_TST = Phi / P_R` with the positive flux through a smoothed dividing
//! surface `Phi = sum delta_sigma(R_j - R_dagger) Theta(P_l) (P_l / mu) p_jl`
//! and the reactant population `P_R = sum_{R_j < R_dagger} p_jl`, where
//! `p_jl = |psi_jl|^2 / sum |psi|^2`.

use num_complex::Complex64;
use serde::Serialize;

use crate::diagnostics::canonical_reference;
use crate::electronic::PesModel;
use crate::error::{Error, Result};
use crate::grid::{Basis, KvnState, PhaseSpaceGrid};
use crate::oracles::{canonical_sampler, verlet_step};
use crate::par;
use std::sync::Arc;

/// Default crossing-reference budget: trajectories, simulated time and
/// Verlet step (a.u.).
pub const DEFAULT_N_TRAJ: usize = 256;
pub const DEFAULT_T_SIM: f64 = 4000.0;
pub const DEFAULT_CROSSING_DT: f64 = 1.0;

/// Largest tolerated deviation of the smoothed delta's grid mass from one.
pub const DELTA_MASS_TOL: f64 = 0.01;

/// Dividing surface and smoothing. Temperatures in hartree.
#[derive(Clone, Debug, Serialize)]
pub struct TstConfig {
    pub r_dagger: f64,
    /// Width of the smoothed delta; `None` means two R spacings.
    pub sigma: Option<f64>,
    pub temperatures: Vec<f64>,
}

impl TstConfig {
    pub fn new(r_dagger: f64) -> Self {
        Self {
            r_dagger,
            sigma: None,
            temperatures: vec![],
        }
    }

    fn sigma_on(&self, grid: &PhaseSpaceGrid) -> f64 {
        self.sigma.unwrap_or(2.0 * grid.dr())
    }

    pub fn validate(&self, grid: &PhaseSpaceGrid) -> Result<()> {
        let (lo, hi) = grid.r_range();
        if !(self.r_dagger > lo && self.r_dagger < hi) {
            return Err(Error::Config(format!(
                "dividing surface R = {} outside the grid ({lo}, {hi})",
                self.r_dagger
            )));
        }
        let s = self.sigma_on(grid);
        if !(s >= grid.dr() * (1.0 - 1e-12)) {
            return Err(Error::Config(format!(
                "smoothing width {s} below dR = {}",
                grid.dr()
            )));
        }
        Ok(())
    }
}

/// Rate estimate at one temperature (atomic units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TstPoint {
    pub temperature: f64,
    pub flux: f64,
    pub population: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArrheniusFit {
    pub points: Vec<TstPoint>,
    pub ln_prefactor: f64,
    /// Activation energy (hartree) from `ln k = ln A - E_a / T`.
    pub activation_energy: f64,
}

/// Canonical state with real amplitudes `sqrt(rho_eq)`.
pub fn analytic_canonical_state(
    grid: &Arc<PhaseSpaceGrid>,
    pes: &PesModel,
    mu: f64,
    t: f64,
) -> Result<KvnState> {
    let rho = canonical_reference(grid, pes, mu, t)?;
    let amps = rho.iter().map(|x| Complex64::new(x.sqrt(), 0.0)).collect();
    Ok(KvnState::from_raw(grid.clone(), Basis::Rp, amps))
}

/// Gaussian of width `sigma` about `r_dagger` on the R nodes, rescaled to
/// unit grid mass.
pub fn smoothed_delta(grid: &PhaseSpaceGrid, r_dagger: f64, sigma: f64) -> Result<Vec<f64>> {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    let mut d: Vec<f64> = grid
        .r()
        .iter()
        .map(|r| norm * (-(r - r_dagger).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mass = d.iter().sum::<f64>() * grid.dr();
    if (mass - 1.0).abs() > DELTA_MASS_TOL {
        return Err(Error::SurfaceResolution(mass));
    }
    d.iter_mut().for_each(|x| *x /= mass);
    Ok(d)
}

fn probabilities(state: &KvnState) -> Result<Vec<f64>> {
    let rho = state.density()?;
    let z: f64 = rho.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Degenerate("zero-norm state".into()));
    }
    Ok(rho.into_iter().map(|x| x / z).collect())
}

/// Positive flux through the smoothed dividing surface (1/a.u. time).
pub fn tst_flux(state: &KvnState, mu: f64, cfg: &TstConfig) -> Result<f64> {
    let grid = state.grid();
    cfg.validate(grid)?;
    let delta = smoothed_delta(grid, cfg.r_dagger, cfg.sigma_on(grid))?;
    let p = probabilities(state)?;
    let np = grid.n_p();
    let pos: Vec<(usize, f64)> = grid
        .p()
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(l, &x)| (l, x / mu))
        .collect();
    Ok(p.chunks(np)
        .zip(&delta)
        .map(|(row, d)| d * pos.iter().map(|&(l, v)| v * row[l]).sum::<f64>())
        .sum())
}

/// Probability of `R < R_dagger`.
pub fn reactant_population(state: &KvnState, cfg: &TstConfig) -> Result<f64> {
    let grid = state.grid();
    cfg.validate(grid)?;
    let p = probabilities(state)?;
    let np = grid.n_p();
    Ok(p.chunks(np)
        .zip(grid.r())
        .filter(|(_, &r)| r < cfg.r_dagger)
        .map(|(row, _)| row.iter().sum::<f64>())
        .sum())
}

/// Flux, population and their ratio for one state.
pub fn tst_rate(state: &KvnState, mu: f64, t: f64, cfg: &TstConfig) -> Result<TstPoint> {
    let flux = tst_flux(state, mu, cfg)?;
    let population = reactant_population(state, cfg)?;
    if !(population > 0.0) {
        return Err(Error::Degenerate("empty reactant region".into()));
    }
    Ok(TstPoint {
        temperature: t,
        flux,
        population,
        rate: flux / population,
    })
}

/// Rates at every configured temperature plus a least-squares Arrhenius line.
pub fn arrhenius_sweep(
    grid: &Arc<PhaseSpaceGrid>,
    pes: &PesModel,
    mu: f64,
    cfg: &TstConfig,
) -> Result<ArrheniusFit> {
    if cfg.temperatures.len() < 3 {
        return Err(Error::Config(format!(
            "Arrhenius sweep needs at least 3 temperatures, got {}",
            cfg.temperatures.len()
        )));
    }
    cfg.validate(grid)?;
    let points = par::map_slice(&cfg.temperatures, |&t| {
        let state = analytic_canonical_state(grid, pes, mu, t)?;
        tst_rate(&state, mu, t, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for p in &points {
        if !(p.rate > 0.0) {
            return Err(Error::NonPositiveRate {
                rate: p.rate,
                temperature: p.temperature,
            });
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.temperature).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.rate.ln()).collect();
    let (slope, intercept) = least_squares(&xs, &ys);
    Ok(ArrheniusFit {
        points,
        ln_prefactor: intercept,
        activation_energy: -slope,
    })
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Settings of the trajectory-counting reference.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CrossingConfig {
    pub mu: f64,
    pub temperature: f64,
    pub n_traj: usize,
    pub t_sim: f64,
    pub dt: f64,
    pub seed: u64,
    pub r_dagger: f64,
    /// Lower edge of the reactant region used for initial conditions.
    pub r_min: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CrossingResult {
    pub n_cross: usize,
    pub k_cross: f64,
    /// Detection floor `1 / (N_traj t_sim)`.
    pub k_min: f64,
    /// Trajectories stopped early because they left the surface's domain.
    pub escaped: usize,
}

/// Count positive crossings of `R_dagger` in NVE trajectories started from
/// canonical reactant-side initial conditions.
pub fn crossing_reference(pes: &PesModel, cfg: &CrossingConfig) -> Result<CrossingResult> {
    if cfg.n_traj == 0 || !(cfg.t_sim > 0.0 && cfg.dt > 0.0) {
        return Err(Error::Config(
            "crossing reference needs N_traj > 0, t_sim > 0, dt > 0".into(),
        ));
    }
    let samples = canonical_sampler(
        pes,
        cfg.mu,
        cfg.temperature,
        cfg.n_traj,
        cfg.seed,
        (cfg.r_min, cfg.r_dagger),
    )?;
    let n_steps = (cfg.t_sim / cfg.dt).round() as usize;
    let (lo, hi) = pes.domain();
    let pts = samples.points();
    let counts = par::map_slice(&pts, |&(r0, p0)| -> Result<(usize, bool)> {
        let (mut r, mut p) = (r0, p0);
        let mut f = pes.force(r)?;
        let mut n = 0;
        for _ in 0..n_steps {
            let before = r;
            match verlet_step(pes, cfg.mu, cfg.dt, &mut r, &mut p, &mut f) {
                Ok(()) => {}
                Err(Error::Domain { .. }) => return Ok((n, true)),
                Err(e) => return Err(e),
            }
            if before < cfg.r_dagger && r >= cfg.r_dagger {
                n += 1;
            }
            if r <= lo || r >= hi {
                return Ok((n, true));
            }
        }
        Ok((n, false))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n_cross: usize = counts.iter().map(|c| c.0).sum();
    let escaped = counts.iter().filter(|c| c.1).count();
    let budget = cfg.n_traj as f64 * n_steps as f64 * cfg.dt;
    Ok(CrossingResult {
        n_cross,
        k_cross: n_cross as f64 / budget,
        k_min: 1.0 / budget,
        escaped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{kinetic_temperature, kl_divergence};
    use crate::propagator::{calibrate, LangevinStepper, ThermostatSettings};
    use crate::units;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const MU: f64 = units::H2_REDUCED_MASS_AU;

    fn well() -> PesModel {
        PesModel::DoubleWell {
            barrier: 0.01,
            center: 2.0,
            half_width: 0.8,
        }
    }

    /// `sqrt(1/(2 pi mu beta)) e^{-beta V_dagger} / int_reactant e^{-beta V} dR`
    /// by 8192-point trapezoid quadrature.
    fn toy_rate(pes: &PesModel, t: f64, lo: f64, rd: f64) -> f64 {
        let n = 8192;
        let h = (rd - lo) / (n - 1) as f64;
        let z: f64 = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * (-pes.energy(lo + i as f64 * h).unwrap() / t).exp()
            })
            .sum::<f64>()
            * h;
        (t / (2.0 * PI * MU)).sqrt() * (-pes.energy(rd).unwrap() / t).exp() / z
    }

    fn toy_grid(nr: u32) -> Arc<PhaseSpaceGrid> {
        let pmax = 7.0 * (MU * 0.004).sqrt();
        PhaseSpaceGrid::new(nr, 7, (0.4, 3.6), (-pmax, pmax)).unwrap()
    }

    #[test]
    fn encoded_state_reproduces_reference() {
        let g = toy_grid(7);
        let t = 0.002;
        let s = analytic_canonical_state(&g, &well(), MU, t).unwrap();
        let rho = canonical_reference(&g, &well(), MU, t).unwrap();
        for (a, b) in s.density().unwrap().iter().zip(&rho) {
            assert!((a - b).abs() <= 1e-14 * b.max(1.0));
        }
        assert!(s.amplitudes().iter().all(|a| a.im == 0.0 && a.re >= 0.0));
        assert_relative_eq!(kinetic_temperature(&s, MU).unwrap(), t, max_relative = 0.01);
    }

    #[test]
    fn encoded_state_is_nearly_stationary() {
        let pes = crate::electronic::morse_pes(0.1744, 1.02764, 1.4011).unwrap();
        let t = 0.004;
        let v = (MU * t).sqrt();
        let g = PhaseSpaceGrid::new(6, 6, (0.7, 3.2), (-7.0 * v, 7.0 * v)).unwrap();
        let mut s = analytic_canonical_state(&g, &pes, MU, t).unwrap();
        let rho_eq = canonical_reference(&g, &pes, MU, t).unwrap();
        let params = calibrate(
            ThermostatSettings {
                mu: MU,
                gamma: 0.02,
                dt: 2.0,
                t_phys: t,
            },
            t,
        )
        .unwrap();
        let mut st = LangevinStepper::new(&g, &pes, params).unwrap();
        for _ in 0..100 {
            st.step(&mut s).unwrap();
        }
        assert!(kl_divergence(&s.density().unwrap(), &rho_eq, g.cell()).unwrap() < 1e-2);
    }

    #[test]
    fn free_flux_is_the_maxwell_half_moment() {
        let t = 0.003;
        let v = (MU * t).sqrt();
        let g = PhaseSpaceGrid::new(6, 8, (0.0, 4.0), (-8.0 * v, 8.0 * v)).unwrap();
        let flat = PesModel::Linear { force: 0.0 };
        let s = analytic_canonical_state(&g, &flat, MU, t).unwrap();
        let cfg = TstConfig::new(2.0);
        let flux = tst_flux(&s, MU, &cfg).unwrap();
        // Uniform marginal 1/L at the surface times <Theta(P) P/mu> = 1/sqrt(2 pi mu beta).
        let exact = (t / (2.0 * PI * MU)).sqrt() / 4.0;
        assert_relative_eq!(flux, exact, max_relative = 0.01);
    }

    #[test]
    fn negative_momenta_carry_no_flux() {
        let g = toy_grid(6);
        let s = KvnState::gaussian(&g, 2.0, -8.0 * (MU * 0.004).sqrt() * 0.6, 0.2, 0.5).unwrap();
        let np = g.n_p();
        let amps: Vec<Complex64> = s
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if g.p()[i % np] < 0.0 {
                    *a
                } else {
                    Complex64::default()
                }
            })
            .collect();
        let s = KvnState::from_amplitudes(g.clone(), Basis::Rp, amps).unwrap();
        assert_eq!(tst_flux(&s, MU, &TstConfig::new(2.0)).unwrap(), 0.0);
    }

    #[test]
    fn toy_barrier_rate_matches_quadrature() {
        let g = toy_grid(9);
        let pes = well();
        let cfg = TstConfig::new(2.0);
        for t in [0.002, 0.003, 0.004] {
            let s = analytic_canonical_state(&g, &pes, MU, t).unwrap();
            let k = tst_rate(&s, MU, t, &cfg).unwrap().rate;
            let exact = toy_rate(&pes, t, 0.4, 2.0);
            assert_relative_eq!(k, exact, max_relative = 0.02);
        }
    }

    #[test]
    fn population_checks() {
        let g = toy_grid(7);
        let s = analytic_canonical_state(&g, &well(), MU, 0.003).unwrap();
        assert!(matches!(
            reactant_population(&s, &TstConfig::new(5.0)),
            Err(Error::Config(_))
        ));
        // The double well is symmetric about 2.0 and the grid is symmetric
        // about 2.0 as well (nodes at 2.0 +- k dR, with one extra at the low end).
        let pr = reactant_population(&s, &TstConfig::new(2.0 + 0.5 * g.dr())).unwrap();
        assert!((pr - 0.5).abs() < 0.02, "{pr}");
    }

    #[test]
    fn poorly_resolved_surface_is_rejected() {
        let g = toy_grid(6);
        let s = analytic_canonical_state(&g, &well(), MU, 0.003).unwrap();
        let cfg = TstConfig {
            r_dagger: 0.42,
            sigma: Some(g.dr()),
            temperatures: vec![],
        };
        assert!(matches!(
            tst_flux(&s, MU, &cfg),
            Err(Error::SurfaceResolution(_))
        ));
        let cfg = TstConfig {
            r_dagger: 2.0,
            sigma: Some(0.5 * g.dr()),
            temperatures: vec![],
        };
        assert!(matches!(tst_flux(&s, MU, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn arrhenius_fit_recovers_barrier() {
        let g = toy_grid(9);
        let cfg = TstConfig {
            r_dagger: 2.0,
            sigma: None,
            temperatures: vec![0.002, 0.003, 0.004],
        };
        let fit = arrhenius_sweep(&g, &well(), MU, &cfg).unwrap();
        assert_relative_eq!(fit.activation_energy, 0.01, max_relative = 0.1);
        assert!(arrhenius_sweep(
            &g,
            &well(),
            MU,
            &TstConfig {
                temperatures: vec![0.002, 0.003],
                ..cfg.clone()
            }
        )
        .is_err());
    }

    #[test]
    fn flat_surface_has_no_activation() {
        let g = toy_grid(8);
        let cfg = TstConfig {
            r_dagger: 2.0,
            sigma: None,
            temperatures: vec![0.002, 0.003, 0.004],
        };
        let fit = arrhenius_sweep(&g, &PesModel::Linear { force: 0.0 }, MU, &cfg).unwrap();
        // Flux grows like sqrt(T); the population is T-independent. The
        // exponential factor, which is what activation measures, is absent.
        for p in &fit.points {
            let scaled = p.rate / p.temperature.sqrt();
            let first = fit.points[0].rate / fit.points[0].temperature.sqrt();
            assert_relative_eq!(scaled, first, max_relative = 0.01);
        }
    }

    #[test]
    fn crossing_floor_scales_with_budget() {
        let pes = crate::electronic::morse_pes(0.1744, 1.02764, 1.4011).unwrap();
        let mut cfg = CrossingConfig {
            mu: MU,
            temperature: 0.002,
            n_traj: 64,
            t_sim: 200.0,
            dt: 0.5,
            seed: 1,
            r_dagger: 3.0,
            r_min: 0.8,
        };
        let a = crossing_reference(&pes, &cfg).unwrap();
        assert_eq!(a.n_cross, 0);
        assert_eq!(a.k_cross, 0.0);
        cfg.n_traj = 128;
        let b = crossing_reference(&pes, &cfg).unwrap();
        assert_eq!(b.k_min, a.k_min / 2.0);
    }

    #[test]
    fn hot_crossings_agree_with_tst() {
        // Shallow barrier at high temperature: nearly recrossing-free.
        let pes = PesModel::DoubleWell {
            barrier: 0.004,
            center: 2.0,
            half_width: 0.8,
        };
        let t = 0.004;
        let cfg = CrossingConfig {
            mu: MU,
            temperature: t,
            n_traj: 4096,
            t_sim: 100.0,
            dt: 0.5,
            seed: 7,
            r_dagger: 2.0,
            r_min: 0.4,
        };
        let c = crossing_reference(&pes, &cfg).unwrap();
        let g = toy_grid(9);
        let s = analytic_canonical_state(&g, &pes, MU, t).unwrap();
        let k = tst_rate(&s, MU, t, &TstConfig::new(2.0)).unwrap().rate;
        assert!(c.n_cross > 20);
        assert!(
            c.k_cross > 0.5 * k && c.k_cross < 2.0 * k,
            "{} vs {k}",
            c.k_cross
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn rate_ignores_normalization(scale in 0.01f64..100.0) {
            let g = toy_grid(7);
            let s = analytic_canonical_state(&g, &well(), MU, 0.003).unwrap();
            let amps = s.amplitudes().iter().map(|a| a * scale).collect();
            let u = KvnState::from_raw(g.clone(), Basis::Rp, amps);
            let cfg = TstConfig::new(2.0);
            let a = tst_rate(&s, MU, 0.003, &cfg).unwrap().rate;
            let b = tst_rate(&u, MU, 0.003, &cfg).unwrap().rate;
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }

        #[test]
        fn flux_is_boltzmann_suppressed(t1 in 0.0015f64..0.003, dt in 0.0005f64..0.002) {
            let g = toy_grid(8);
            let cfg = TstConfig::new(2.0);
            let f = |t: f64| tst_flux(&analytic_canonical_state(&g, &well(), MU, t).unwrap(), MU, &cfg).unwrap();
            prop_assert!(f(t1) < f(t1 + dt));
        }
    }

    #[test]
    fn halving_sigma_barely_moves_the_rate() {
        let g = toy_grid(9);
        let s = analytic_canonical_state(&g, &well(), MU, 0.003).unwrap();
        let k = |sigma: f64| {
            tst_rate(
                &s,
                MU,
                0.003,
                &TstConfig {
                    r_dagger: 2.0,
                    sigma: Some(sigma),
                    temperatures: vec![],
                },
            )
            .unwrap()
            .rate
        };
        let a = k(4.0 * g.dr());
        let b = k(2.0 * g.dr());
        assert!((a / b - 1.0).abs() < 0.02);
    }
}
