//! Run modes. Each returns a JSON summary for the manifest and writes its
//! CSVs through [`Outputs`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};

use kvn_langevin::diagnostics::{block_coarsen, relax_with, total_variation, TraceRecord};
use kvn_langevin::oracles::{
    canonical_sampler, cos_product_bias, histogram_density, langevin_ensemble, nve_ensemble,
    EnsembleConfig, Initial,
};
use kvn_langevin::propagator::{momentum_bias_experiment, LangevinParams, ThermostatSettings};
use kvn_langevin::tst::analytic_canonical_state;
use kvn_langevin::tst::{arrhenius_sweep, crossing_reference, CrossingConfig, TstConfig};
use kvn_langevin::units::{self, H2_REDUCED_MASS_AU};
use kvn_langevin::vdos::{
    aimd_reference_spectrum, branch_spectra, reference_frequency_with, ReferenceSettings,
};
use kvn_langevin::{Error, KvnState, PhaseSpaceGrid};

use crate::config::{Mode, RunConfig};
use crate::output::Outputs;

/// Relative tolerance of the bias-check verdict.
pub const BIAS_TOLERANCE: f64 = 0.10;

#[derive(Debug)]
pub enum RunError {
    /// Inputs rejected by the core after config validation.
    Config(String),
    /// Numerical failure of the run itself.
    Numerical(String),
    Io(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Csv(_) => RunError::Io(e.to_string()),
            e if e.is_numerical() => RunError::Numerical(e.to_string()),
            e => RunError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Mode outcome: summary for the manifest, plus a numerical failure that
/// stopped the run after partial outputs were written.
pub struct Report {
    pub results: Value,
    pub failure: Option<String>,
}

pub fn run(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    match cfg.mode {
        Mode::Relax => relax_mode(cfg, out),
        Mode::Vdos => vdos_mode(cfg, out),
        Mode::Tst => tst_mode(cfg, out),
        Mode::BiasCheck => bias_mode(cfg, out),
        Mode::Oracle => oracle_mode(cfg, out),
    }
}

fn grid(cfg: &RunConfig) -> Result<Arc<PhaseSpaceGrid>, RunError> {
    Ok(cfg.grid.as_ref().expect("validated grid").build()?)
}

fn density_rows(state: &KvnState) -> Result<Vec<(f64, f64, f64)>, RunError> {
    let g = state.grid();
    let rho = state.density()?;
    let (r, p, np) = (g.r(), g.p(), g.n_p());
    Ok(rho
        .iter()
        .enumerate()
        .map(|(i, &d)| (r[i / np], p[i % np], d))
        .collect())
}

fn trace_row(r: &TraceRecord) -> (f64, f64, f64, f64, f64) {
    (
        units::au_time_to_fs(r.time),
        units::bohr_to_angstrom(r.mean_r),
        units::hartree_to_kelvin(r.t_kin),
        r.d_kl,
        r.cumulative_success,
    )
}

const TRACE_HEADER: [&str; 5] = [
    "time_fs",
    "mean_R_angstrom",
    "T_kin_K",
    "D_KL_nats",
    "cum_success_prob",
];
const DENSITY_HEADER: [&str; 3] = ["R_bohr", "P_au", "rho"];

/// Recorded steps nearest to the requested snapshot times.
fn snapshot_steps(times_fs: &[f64], dt: f64, n_steps: usize, every: usize) -> Vec<usize> {
    let mut recorded: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if recorded.last() != Some(&n_steps) {
        recorded.push(n_steps);
    }
    let mut out: Vec<usize> = times_fs
        .iter()
        .map(|&t| {
            let target = units::fs_to_au_time(t) / dt;
            *recorded
                .iter()
                .min_by(|a, b| {
                    (**a as f64 - target)
                        .abs()
                        .total_cmp(&(**b as f64 - target).abs())
                })
                .unwrap()
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Langevin relaxation from a Gaussian packet. Returns the run and the
/// snapshot densities keyed by step.
fn run_relaxation(
    cfg: &RunConfig,
) -> Result<
    (
        kvn_langevin::diagnostics::Relaxation,
        BTreeMap<usize, Vec<(f64, f64, f64)>>,
    ),
    RunError,
> {
    let l = cfg.langevin.as_ref().expect("validated langevin");
    let pes = cfg.pes.as_ref().expect("validated pes").model();
    let g = grid(cfg)?;
    let init = l.initial.as_ref().expect("validated initial packet");
    let psi0 = KvnState::gaussian(&g, init.r0, init.p0, init.sigma_r, init.sigma_p)?;
    let wanted = snapshot_steps(&l.snapshot_fs, l.params.dt, l.n_steps, l.record_every);
    let mut snaps = BTreeMap::new();
    let mut snap_err = None;
    let run = relax_with(
        psi0,
        pes,
        &l.params,
        l.n_steps,
        l.record_every,
        |rec, state| {
            if wanted.binary_search(&rec.step).is_ok() {
                match density_rows(state) {
                    Ok(rows) => {
                        snaps.insert(rec.step, rows);
                    }
                    Err(e) => snap_err = Some(e),
                }
            }
        },
    )?;
    if let Some(e) = snap_err {
        return Err(e);
    }
    Ok((run, snaps))
}

fn relax_mode(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    let l = cfg.langevin.as_ref().expect("validated langevin");
    let (run, snaps) = run_relaxation(cfg)?;
    out.csv(
        "trace.csv",
        &TRACE_HEADER,
        run.trace.records.iter().map(trace_row),
    )?;
    let mut snapshots = vec![];
    for (step, rows) in &snaps {
        let name = format!("density_step{step:07}.csv");
        out.csv(&name, &DENSITY_HEADER, rows.iter().copied())?;
        snapshots.push(json!({
            "file": name,
            "step": step,
            "time_fs": units::au_time_to_fs(*step as f64 * l.params.dt),
        }));
    }
    let last = run.trace.last().expect("step 0 is always recorded");
    if let Some(e) = &run.failure {
        eprintln!("relaxation stopped at step {}: {e}", last.step);
    } else {
        println!(
            "relax: {} steps, <R> = {:.4} A, T_kin = {:.1} K, D_KL = {:.3e}",
            last.step,
            units::bohr_to_angstrom(last.mean_r),
            units::hartree_to_kelvin(last.t_kin),
            last.d_kl
        );
    }
    Ok(Report {
        results: json!({
            "final": last,
            "max_D_KL": run.trace.max_d_kl(),
            "boundary_leak_steps": run.boundary_leak_steps,
            "snapshots": snapshots,
        }),
        failure: run.failure.map(|e| e.to_string()),
    })
}

fn vdos_mode(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    let v = cfg.vdos.as_ref().expect("validated vdos");
    let pes_spec = cfg.pes.as_ref().expect("validated pes");
    let (pes, mu) = (pes_spec.model(), pes_spec.mu);
    let g = grid(cfg)?;
    let eq = analytic_canonical_state(&g, pes, mu, v.t)?;
    let w_ref = reference_frequency_with(pes, g.r(), mu, v.fit_half_width)?;
    let (plus, minus) = branch_spectra(&eq, pes, mu, w_ref, &v.qpe)?;
    drop(eq);

    let omega = plus.omega_cm1();
    let rows = [&plus, &minus].into_iter().flat_map(|s| {
        let label = s.branch.map(|b| b.label()).unwrap_or("");
        omega.iter().zip(&s.prob).map(move |(&w, &p)| (w, p, label))
    });
    out.csv("vdos.csv", &["omega_cm1", "prob", "branch"], rows)?;

    let mut results = json!({
        "m": v.qpe.m,
        "tau_au": v.qpe.tau,
        "substeps": v.qpe.substeps,
        "omega_shift_cm1": units::au_freq_to_cm1(v.qpe.omega_shift),
        "bin_width_cm1": v.bin_width_cm1,
        "omega_ref_cm1": units::au_freq_to_cm1(w_ref),
        "branch_weights": { "plus": plus.branch_weight, "minus": minus.branch_weight },
        "postselection_yield": plus.branch_weight.unwrap_or(0.0) + minus.branch_weight.unwrap_or(0.0),
        "peak_cm1": { "plus": units::au_freq_to_cm1(plus.peak_omega()), "minus": units::au_freq_to_cm1(minus.peak_omega()) },
    });
    println!(
        "vdos: plus-branch peak {:.2} cm^-1 (bin width {:.2} cm^-1), omega_ref {:.2} cm^-1",
        units::au_freq_to_cm1(plus.peak_omega()),
        v.bin_width_cm1,
        units::au_freq_to_cm1(w_ref)
    );

    if v.n_traj > 0 {
        let samples = canonical_sampler(pes, mu, v.t, v.n_traj, cfg.seed, g.r_range())?;
        let h = v.qpe.tau / v.qpe.substeps as f64;
        let n = v.qpe.registers() * v.qpe.substeps;
        let ens = nve_ensemble(pes, mu, &samples.points(), h, n, 1)?;
        let settings = ReferenceSettings {
            window: v.window,
            ..ReferenceSettings::default()
        };
        let reference = aimd_reference_spectrum(&ens, &v.qpe, &settings)?;
        out.csv(
            "vdos_reference.csv",
            &["omega_cm1", "prob"],
            omega.iter().copied().zip(reference.prob.iter().copied()),
        )?;
        results["reference_peak_cm1"] = json!(units::au_freq_to_cm1(reference.peak_omega()));
        results["reference_peak_bin"] = json!(reference.peak_bin());
        results["peak_bin"] = json!(plus.peak_bin());
        println!(
            "vdos: trajectory reference peak {:.2} cm^-1",
            units::au_freq_to_cm1(reference.peak_omega())
        );
    }
    Ok(Report {
        results,
        failure: None,
    })
}

fn tst_mode(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    let t = cfg.tst.as_ref().expect("validated tst");
    let pes_spec = cfg.pes.as_ref().expect("validated pes");
    let (pes, mu) = (pes_spec.model(), pes_spec.mu);
    let g = grid(cfg)?;
    let temps: Vec<f64> = t
        .temperatures_kelvin
        .iter()
        .map(|&k| units::kelvin_to_hartree(k))
        .collect();
    let tcfg = TstConfig {
        r_dagger: t.r_dagger,
        sigma: t.sigma,
        temperatures: temps.clone(),
    };
    let fit = arrhenius_sweep(&g, pes, mu, &tcfg)?;
    let rows = fit
        .points
        .iter()
        .zip(&t.temperatures_kelvin)
        .map(|(p, &tk)| {
            let k_s = units::rate_au_to_per_second(p.rate);
            (tk, 1.0 / tk, p.flux, p.population, p.rate, k_s, k_s.ln())
        });
    out.csv(
        "tst.csv",
        &[
            "T_kelvin",
            "inv_T",
            "flux_au",
            "population",
            "k_au",
            "k_per_second",
            "log_k",
        ],
        rows,
    )?;
    let ea_kelvin = units::hartree_to_kelvin(fit.activation_energy);
    println!(
        "tst: E_a = {:.6} hartree ({:.1} K), ln A = {:.4} (A in a.u.)",
        fit.activation_energy, ea_kelvin, fit.ln_prefactor
    );
    let mut results = json!({
        "R_dagger_bohr": t.r_dagger,
        "sigma_bohr": t.sigma.unwrap_or(2.0 * g.dr()),
        "activation_energy_hartree": fit.activation_energy,
        "ln_prefactor_au": fit.ln_prefactor,
        "points": fit.points,
    });
    if t.crossing {
        let mut crossings = vec![];
        for (i, (&th, &tk)) in temps.iter().zip(&t.temperatures_kelvin).enumerate() {
            let c = crossing_reference(
                pes,
                &CrossingConfig {
                    mu,
                    temperature: th,
                    n_traj: t.n_traj,
                    t_sim: t.t_sim,
                    dt: t.traj_dt,
                    seed: cfg.seed.wrapping_add(i as u64),
                    r_dagger: t.r_dagger,
                    r_min: g.r_range().0,
                },
            )?;
            crossings.push((tk, c));
        }
        out.csv(
            "tst_crossing.csv",
            &["T_kelvin", "N_cross", "k_cross", "k_min"],
            crossings.iter().map(|(tk, c)| {
                (
                    *tk,
                    c.n_cross,
                    units::rate_au_to_per_second(c.k_cross),
                    units::rate_au_to_per_second(c.k_min),
                )
            }),
        )?;
        for (tk, c) in &crossings {
            println!(
                "tst: {tk} K crossing reference {} crossings, k_cross = {:.3e} s^-1, floor k_min = {:.3e} s^-1",
                c.n_cross,
                units::rate_au_to_per_second(c.k_cross),
                units::rate_au_to_per_second(c.k_min)
            );
        }
        results["crossing"] = json!(crossings
            .iter()
            .map(|(tk, c)| json!({"T_kelvin": tk, "result": c}))
            .collect::<Vec<_>>());
    }
    Ok(Report {
        results,
        failure: None,
    })
}

fn bias_mode(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    let b = cfg.bias.as_ref().expect("validated bias");
    let mu = H2_REDUCED_MASS_AU;
    let pmax = b.p_max_sigmas * (mu * b.t).sqrt();
    // Without a force R never enters; a minimal R axis suffices.
    let g = PhaseSpaceGrid::new(3, b.n_p, (0.0, 1.0), (-pmax, pmax))?;
    let mut rows = vec![];
    let mut all_pass = true;
    for &s in &b.s {
        let params = LangevinParams::new(
            ThermostatSettings {
                mu,
                gamma: s / b.dt,
                dt: b.dt,
                t_phys: b.t,
            },
            false,
        )?;
        let m = momentum_bias_experiment(&g, &params, b.max_steps)?;
        let rel = m.measured / m.predicted - 1.0;
        let pass = rel.abs() < BIAS_TOLERANCE;
        all_pass &= pass;
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "s = {s}: measured {:.6e}, predicted tanh(s)/2 = {:.6e}, rel. error {:+.2}%: {verdict}",
            m.measured,
            m.predicted,
            100.0 * rel
        );
        rows.push((
            s,
            m.measured,
            m.predicted,
            cos_product_bias(s),
            rel,
            units::hartree_to_kelvin(m.t_kin),
            m.steps,
            verdict,
        ));
    }
    out.csv(
        "bias.csv",
        &[
            "s",
            "measured",
            "predicted",
            "product_prediction",
            "rel_error",
            "T_kin_K",
            "steps",
            "verdict",
        ],
        rows.iter().cloned(),
    )?;
    Ok(Report {
        results: json!({
            "tolerance": BIAS_TOLERANCE,
            "all_pass": all_pass,
            "measurements": rows.iter().map(|r| json!({"s": r.0, "measured": r.1, "predicted": r.2, "verdict": r.7})).collect::<Vec<_>>(),
        }),
        failure: None,
    })
}

fn oracle_mode(cfg: &RunConfig, out: &mut Outputs) -> Result<Report, RunError> {
    let o = cfg.oracle.as_ref().expect("validated oracle");
    let pes_spec = cfg.pes.as_ref().expect("validated pes");
    let (pes, mu) = (pes_spec.model(), pes_spec.mu);
    let (run, _) = run_relaxation(cfg)?;
    out.csv(
        "trace.csv",
        &TRACE_HEADER,
        run.trace.records.iter().map(trace_row),
    )?;
    if let Some(e) = &run.failure {
        return Ok(Report {
            results: json!({}),
            failure: Some(format!("grid relaxation stopped early: {e}")),
        });
    }
    let g = run.state.grid().clone();
    let rho = run.state.density()?;

    let init = canonical_sampler(pes, mu, o.t, o.n_traj, cfg.seed, g.r_range())?;
    let ens_cfg = EnsembleConfig {
        mu,
        gamma: o.gamma,
        t: o.t,
        dt: o.dt,
        n_steps: o.n_steps,
        n_traj: o.n_traj,
        seed: cfg.seed.wrapping_add(1),
        stride: o.n_steps,
        initial: Initial::Samples(init.points()),
    };
    let ens = langevin_ensemble(pes, &ens_cfg)?;
    let hist = histogram_density(&ens.final_points(), &g)?;
    drop(ens);

    let (nr, np) = (g.n_r(), g.n_p());
    let f = o.coarsen.min(nr).min(np);
    let tv_full = total_variation(&rho, &hist, g.cell())?;
    let tv = total_variation(
        &block_coarsen(&rho, nr, np, f)?,
        &block_coarsen(&hist, nr, np, f)?,
        g.cell() * (f * f) as f64,
    )?;

    let marginal = |d: &[f64], along_r: bool| -> Vec<f64> {
        let (n, w) = if along_r { (nr, g.dp()) } else { (np, g.dr()) };
        (0..n)
            .map(|k| {
                let s: f64 = if along_r {
                    d[k * np..(k + 1) * np].iter().sum()
                } else {
                    (0..nr).map(|j| d[j * np + k]).sum()
                };
                s * w
            })
            .collect()
    };
    let (gr, hr) = (marginal(&rho, true), marginal(&hist, true));
    let (gp, hp) = (marginal(&rho, false), marginal(&hist, false));
    out.csv(
        "marginal_R.csv",
        &["R_bohr", "grid_density", "ensemble_density"],
        (0..nr).map(|j| (g.r()[j], gr[j], hr[j])),
    )?;
    out.csv(
        "marginal_P.csv",
        &["P_au", "grid_density", "ensemble_density"],
        (0..np).map(|k| (g.p()[k], gp[k], hp[k])),
    )?;

    if o.dump_trajectories > 0 {
        // Streams are keyed by trajectory index, so a prefix reproduces the
        // same paths as the full ensemble.
        let k = o.dump_trajectories.min(o.n_traj);
        let pts = init.points()[..k].to_vec();
        let dump = langevin_ensemble(
            pes,
            &EnsembleConfig {
                n_traj: k,
                stride: o.dump_stride,
                initial: Initial::Samples(pts),
                ..ens_cfg
            },
        )?;
        let rows = dump.trajectories.iter().enumerate().flat_map(|(i, tr)| {
            tr.times()
                .zip(tr.r.iter().zip(&tr.p))
                .map(move |(t, (&r, &p))| (i, t, r, p))
        });
        out.csv(
            "trajectories.csv",
            &["traj_id", "t_au", "R_bohr", "P_au"],
            rows,
        )?;
    }
    println!(
        "oracle: TV = {tv:.4} on {f}x{f} blocks (uncoarsened {tv_full:.4}, N = {})",
        o.n_traj
    );
    Ok(Report {
        results: json!({
            "tv_coarsened": tv,
            "tv_uncoarsened": tv_full,
            "coarsen_factor": f,
            "n_traj": o.n_traj,
            "final": run.trace.last(),
            "sampler_acceptance_warning": init.acceptance_warning,
        }),
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_snap_to_recorded_steps() {
        let dt = units::fs_to_au_time(1.0);
        assert_eq!(
            snapshot_steps(&[0.0, 2.4, 2.6, 1000.0], dt, 20, 5),
            vec![0, 5, 20]
        );
        assert_eq!(snapshot_steps(&[13.0], dt, 13, 5), vec![13]);
    }
}
