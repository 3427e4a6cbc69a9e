#![allow(non_snake_case)]

//! Run configuration: TOML with dotted sections, unknown keys rejected.
//!
//! Parsing keeps every field optional so that validation can report all
//! missing or out-of-range keys at once, each with its key path.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use kvn_langevin::electronic::{morse_pes, PauliCoefficientTable, RawPesTable};
use kvn_langevin::grid::{GridMetadata, MAX_QUBITS, MIN_QUBITS};
use kvn_langevin::propagator::{LangevinParams, ThermostatSettings};
use kvn_langevin::units::{self, H2_REDUCED_MASS_AU};
use kvn_langevin::vdos::{QpeConfig, Window};
use kvn_langevin::{PesModel, PhaseSpaceGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Relax,
    Vdos,
    Tst,
    BiasCheck,
    Oracle,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "relax" => Mode::Relax,
            "vdos" => Mode::Vdos,
            "tst" => Mode::Tst,
            "bias-check" => Mode::BiasCheck,
            "oracle" => Mode::Oracle,
            _ => return None,
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub grid: Option<RawGrid>,
    pub pes: Option<RawPes>,
    pub langevin: Option<RawLangevin>,
    pub vdos: Option<RawVdos>,
    pub tst: Option<RawTst>,
    pub bias: Option<RawBias>,
    pub oracle: Option<RawOracle>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub n_R: Option<u32>,
    pub n_P: Option<u32>,
    pub R_min_angstrom: Option<f64>,
    pub R_max_angstrom: Option<f64>,
    /// Half-width of the momentum range in a.u.
    pub P_max: Option<f64>,
    /// Half-width in units of `sqrt(mu T)` at the mode's temperature.
    pub P_max_sigmas: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMorse {
    pub De: Option<f64>,
    pub alpha: Option<f64>,
    pub Re: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDoubleWell {
    pub barrier: Option<f64>,
    pub center: Option<f64>,
    pub half_width: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPes {
    pub kind: Option<String>,
    pub path: Option<PathBuf>,
    pub morse: Option<RawMorse>,
    pub double_well: Option<RawDoubleWell>,
    pub mu: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInitial {
    pub R0_angstrom: Option<f64>,
    pub P0: Option<f64>,
    pub sigma_R_angstrom: Option<f64>,
    pub sigma_P: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLangevin {
    pub gamma: Option<f64>,
    pub dt: Option<f64>,
    pub T_phys_kelvin: Option<f64>,
    pub correction: Option<String>,
    pub n_steps: Option<usize>,
    pub record_every: Option<usize>,
    pub snapshot_fs: Option<Vec<f64>>,
    pub initial: Option<RawInitial>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVdos {
    pub m: Option<u32>,
    pub tau: Option<f64>,
    pub substeps: Option<usize>,
    pub omega_shift_cm1: Option<f64>,
    pub T_kelvin: Option<f64>,
    pub window: Option<String>,
    pub n_traj: Option<usize>,
    pub fit_half_width: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTst {
    pub R_dagger_angstrom: Option<f64>,
    pub sigma_bohr: Option<f64>,
    pub temperatures_kelvin: Option<Vec<f64>>,
    pub crossing: Option<bool>,
    pub n_traj: Option<usize>,
    pub t_sim: Option<f64>,
    pub traj_dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBias {
    pub s: Option<Vec<f64>>,
    pub n_P: Option<u32>,
    pub T_kelvin: Option<f64>,
    pub dt: Option<f64>,
    pub max_steps: Option<usize>,
    pub P_max_sigmas: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOracle {
    pub n_traj: Option<usize>,
    pub n_steps: Option<usize>,
    pub dt: Option<f64>,
    pub T_kelvin: Option<f64>,
    pub gamma: Option<f64>,
    pub coarsen: Option<usize>,
    pub dump_trajectories: Option<usize>,
    pub dump_stride: Option<usize>,
}

/// Parse TOML text. Unknown keys and type errors fail here.
pub fn parse(text: &str) -> Result<RawConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, Serialize)]
pub struct GridSpec {
    pub n_r: u32,
    pub n_p: u32,
    pub r_min: f64,
    pub r_max: f64,
    pub p_max: f64,
    pub metadata: GridMetadata,
    pub dR: f64,
    pub dP: f64,
}

impl GridSpec {
    pub fn build(&self) -> kvn_langevin::Result<Arc<PhaseSpaceGrid>> {
        PhaseSpaceGrid::new(
            self.n_r,
            self.n_p,
            (self.r_min, self.r_max),
            (-self.p_max, self.p_max),
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PesSpec {
    pub kind: String,
    pub path: Option<PathBuf>,
    pub description: String,
    pub mu: f64,
    #[serde(skip)]
    pub model: Option<PesModel>,
}

impl PesSpec {
    pub fn model(&self) -> &PesModel {
        self.model.as_ref().expect("validated surface")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InitialSpec {
    pub r0: f64,
    pub p0: f64,
    pub sigma_r: f64,
    pub sigma_p: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LangevinSpec {
    pub params: LangevinParams,
    pub s: f64,
    pub correction: bool,
    pub T_int_kelvin: f64,
    pub n_steps: usize,
    pub record_every: usize,
    pub snapshot_fs: Vec<f64>,
    pub initial: Option<InitialSpec>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VdosSpec {
    pub qpe: QpeConfig,
    pub t: f64,
    pub window: Window,
    pub n_traj: usize,
    pub fit_half_width: usize,
    pub bin_width_cm1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TstSpec {
    pub r_dagger: f64,
    pub sigma: Option<f64>,
    pub temperatures_kelvin: Vec<f64>,
    pub crossing: bool,
    pub n_traj: usize,
    pub t_sim: f64,
    pub traj_dt: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasSpec {
    pub s: Vec<f64>,
    pub n_p: u32,
    pub t: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub p_max_sigmas: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleSpec {
    pub n_traj: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub t: f64,
    pub gamma: f64,
    pub coarsen: usize,
    pub dump_trajectories: usize,
    pub dump_stride: usize,
}

/// Fully validated run description, echoed into the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output: PathBuf,
    pub grid: Option<GridSpec>,
    pub pes: Option<PesSpec>,
    pub langevin: Option<LangevinSpec>,
    pub vdos: Option<VdosSpec>,
    pub tst: Option<TstSpec>,
    pub bias: Option<BiasSpec>,
    pub oracle: Option<OracleSpec>,
}

/// Command-line overrides.
#[derive(Debug, Default)]
pub struct Overrides {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

struct Errors(Vec<String>);

impl Errors {
    fn push(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{key}: {msg}"));
    }

    fn req<T: Copy>(&mut self, key: &str, v: Option<T>) -> Option<T> {
        if v.is_none() {
            self.push(key, "missing");
        }
        v
    }

    fn positive(&mut self, key: &str, v: Option<f64>) -> Option<f64> {
        match self.req(key, v) {
            Some(x) if x > 0.0 && x.is_finite() => Some(x),
            Some(x) => {
                self.push(key, format!("must be positive, got {x}"));
                None
            }
            None => None,
        }
    }

    fn positive_or(&mut self, key: &str, v: Option<f64>, default: f64) -> Option<f64> {
        self.positive(key, Some(v.unwrap_or(default)))
    }

    fn count(&mut self, key: &str, v: Option<usize>, default: Option<usize>) -> Option<usize> {
        match v.or(default) {
            Some(0) => {
                self.push(key, "must be at least 1");
                None
            }
            Some(n) => Some(n),
            None => {
                self.push(key, "missing");
                None
            }
        }
    }
}

/// Resolve a parsed config against overrides. `base` is the directory that
/// relative table paths are taken from.
pub fn validate(raw: RawConfig, ov: Overrides, base: &Path) -> Result<RunConfig, Vec<String>> {
    let mut e = Errors(vec![]);
    let mode_s = ov.mode.or(raw.mode);
    let mode = match mode_s.as_deref() {
        Some(s) => Mode::parse(s).or_else(|| {
            e.push(
                "mode",
                format!("unknown mode '{s}' (relax, vdos, tst, bias-check, oracle)"),
            );
            None
        }),
        None => {
            e.push("mode", "missing");
            None
        }
    };
    let seed = ov.seed.or(raw.seed).unwrap_or(0);
    let output = ov
        .output
        .or(raw.output)
        .unwrap_or_else(|| PathBuf::from("kvnmd-out"));

    let needs = |m: Mode| -> [bool; 7] {
        // grid, pes, langevin, vdos, tst, bias, oracle
        match m {
            Mode::Relax => [true, true, true, false, false, false, false],
            Mode::Vdos => [true, true, false, true, false, false, false],
            Mode::Tst => [true, true, false, false, true, false, false],
            Mode::BiasCheck => [false, false, false, false, false, true, false],
            Mode::Oracle => [true, true, true, false, false, false, true],
        }
    };
    let Some(mode) = mode else {
        return Err(e.0);
    };
    let need = needs(mode);
    let names = ["grid", "pes", "langevin", "vdos", "tst", "bias", "oracle"];
    let present = [
        raw.grid.is_some(),
        raw.pes.is_some(),
        raw.langevin.is_some(),
        raw.vdos.is_some(),
        raw.tst.is_some(),
        raw.bias.is_some() || mode == Mode::BiasCheck,
        raw.oracle.is_some(),
    ];
    for i in 0..7 {
        if need[i] && !present[i] {
            e.push(
                names[i],
                format!(
                    "section required by mode {mode_s:?}",
                    mode_s = mode_s.as_deref().unwrap_or("")
                ),
            );
        }
    }

    let pes = raw
        .pes
        .as_ref()
        .filter(|_| need[1])
        .and_then(|p| resolve_pes(p, base, &mut e));
    let mu = pes.as_ref().map(|p| p.mu).unwrap_or(H2_REDUCED_MASS_AU);

    let langevin = raw
        .langevin
        .as_ref()
        .filter(|_| need[2])
        .and_then(|l| resolve_langevin(l, mu, mode, &mut e));
    let vdos = raw
        .vdos
        .as_ref()
        .filter(|_| need[3])
        .and_then(|v| resolve_vdos(v, &mut e));
    let tst = raw
        .tst
        .as_ref()
        .filter(|_| need[4])
        .and_then(|t| resolve_tst(t, &mut e));
    let bias = if need[5] {
        resolve_bias(raw.bias.as_ref().unwrap_or(&RawBias::default()), &mut e)
    } else {
        None
    };
    let oracle = raw
        .oracle
        .as_ref()
        .filter(|_| need[6])
        .and_then(|o| resolve_oracle(o, langevin.as_ref(), &mut e));

    // Temperature that sets the momentum range.
    let t_ref = match mode {
        Mode::Relax => langevin.as_ref().map(|l| l.params.t_phys),
        Mode::Vdos => vdos.as_ref().map(|v| v.t),
        Mode::Tst => tst
            .as_ref()
            .and_then(|t| t.temperatures_kelvin.iter().cloned().reduce(f64::max))
            .map(units::kelvin_to_hartree),
        Mode::Oracle => oracle.as_ref().map(|o| o.t),
        Mode::BiasCheck => None,
    };
    let grid = raw
        .grid
        .as_ref()
        .filter(|_| need[0])
        .and_then(|g| resolve_grid(g, mu, t_ref, &mut e));

    if let (Some(g), Some(p)) = (&grid, &pes) {
        let (lo, hi) = p.model().domain();
        if g.r_min < lo || g.r_max > hi {
            e.push(
                "grid",
                format!(
                    "R range [{}, {}] A exceeds the surface's domain [{:.4}, {:.4}] A",
                    units::bohr_to_angstrom(g.r_min),
                    units::bohr_to_angstrom(g.r_max),
                    units::bohr_to_angstrom(lo),
                    units::bohr_to_angstrom(hi)
                ),
            );
        }
    }
    if let (Some(g), Some(t)) = (&grid, &tst) {
        if !(t.r_dagger > g.r_min && t.r_dagger < g.r_max) {
            e.push(
                "tst.R_dagger_angstrom",
                "must lie strictly inside the grid R range",
            );
        }
        if let Some(s) = t.sigma {
            if s < g.dR {
                e.push("tst.sigma_bohr", format!("must be at least dR = {}", g.dR));
            }
        }
    }
    if let (Some(l), Some(g)) = (&langevin, &grid) {
        if let Some(i) = &l.initial {
            if !(i.r0 >= g.r_min && i.r0 <= g.r_max) {
                e.push("langevin.initial.R0_angstrom", "outside the grid R range");
            }
            if i.sigma_r < 2.0 * g.dR {
                e.push(
                    "langevin.initial.sigma_R_angstrom",
                    "below two R grid spacings",
                );
            }
            if i.sigma_p < 2.0 * g.dP {
                e.push("langevin.initial.sigma_P", "below two P grid spacings");
            }
        }
    }
    if mode == Mode::Relax && langevin.as_ref().is_some_and(|l| l.initial.is_none()) {
        e.push("langevin.initial", "section required by mode \"relax\"");
    }

    if !e.0.is_empty() {
        return Err(e.0);
    }
    Ok(RunConfig {
        mode,
        seed,
        output,
        grid,
        pes,
        langevin,
        vdos,
        tst,
        bias,
        oracle,
    })
}

fn resolve_grid(g: &RawGrid, mu: f64, t_ref: Option<f64>, e: &mut Errors) -> Option<GridSpec> {
    let mut qubits = |key: &str, v: Option<u32>| match e.req(key, v) {
        Some(n) if (MIN_QUBITS..=MAX_QUBITS).contains(&n) => Some(n),
        Some(n) => {
            e.push(
                key,
                format!("must be in {MIN_QUBITS}..={MAX_QUBITS}, got {n}"),
            );
            None
        }
        None => None,
    };
    let n_r = qubits("grid.n_R", g.n_R);
    let n_p = qubits("grid.n_P", g.n_P);
    let r_min = e.positive("grid.R_min_angstrom", g.R_min_angstrom);
    let r_max = e.positive("grid.R_max_angstrom", g.R_max_angstrom);
    if let (Some(a), Some(b)) = (r_min, r_max) {
        if a >= b {
            e.push("grid.R_max_angstrom", "must exceed grid.R_min_angstrom");
        }
    }
    let p_max = match (g.P_max, g.P_max_sigmas) {
        (Some(_), Some(_)) => {
            e.push("grid", "give either P_max or P_max_sigmas, not both");
            None
        }
        (Some(p), None) => e.positive("grid.P_max", Some(p)),
        (None, s) => {
            let s = e.positive_or("grid.P_max_sigmas", s, 6.0);
            match (s, t_ref) {
                (Some(s), Some(t)) => Some(s * (mu * t).sqrt()),
                _ => None,
            }
        }
    };
    let (n_r, n_p, r_min, r_max, p_max) = (n_r?, n_p?, r_min?, r_max?, p_max?);
    if r_min >= r_max {
        return None;
    }
    let (r_min, r_max) = (
        units::angstrom_to_bohr(r_min),
        units::angstrom_to_bohr(r_max),
    );
    let grid = PhaseSpaceGrid::new(n_r, n_p, (r_min, r_max), (-p_max, p_max)).ok()?;
    Some(GridSpec {
        n_r,
        n_p,
        r_min,
        r_max,
        p_max,
        metadata: grid.metadata(),
        dR: grid.dr(),
        dP: grid.dp(),
    })
}

fn resolve_pes(p: &RawPes, base: &Path, e: &mut Errors) -> Option<PesSpec> {
    let mu = e.positive_or("pes.mu", p.mu, H2_REDUCED_MASS_AU);
    let kind = match p.kind.as_deref() {
        Some(k) => k.to_string(),
        None => {
            e.push("pes.kind", "missing");
            return None;
        }
    };
    let path = p.path.as_ref().map(|x| {
        if x.is_absolute() {
            x.clone()
        } else {
            base.join(x)
        }
    });
    let model = match kind.as_str() {
        "pauli_table" | "raw_table" => {
            let Some(path) = path.clone() else {
                e.push("pes.path", format!("required when pes.kind = \"{kind}\""));
                return None;
            };
            let file = match std::fs::File::open(&path) {
                Ok(f) => f,
                Err(err) => {
                    e.push("pes.path", format!("cannot open {}: {err}", path.display()));
                    return None;
                }
            };
            let r = if kind == "pauli_table" {
                PauliCoefficientTable::read(file).map(PesModel::PauliTable)
            } else {
                RawPesTable::read(file).map(PesModel::RawTable)
            };
            match r {
                Ok(m) => m,
                Err(err) => {
                    e.push("pes.path", err);
                    return None;
                }
            }
        }
        "bundled_h2" => PesModel::bundled_h2(),
        "morse" => {
            let Some(m) = &p.morse else {
                e.push("pes.morse", "required when pes.kind = \"morse\"");
                return None;
            };
            let de = e.positive("pes.morse.De", m.De);
            let a = e.positive("pes.morse.alpha", m.alpha);
            let re = e.positive("pes.morse.Re", m.Re);
            morse_pes(de?, a?, re?).ok()?
        }
        "double_well" => {
            let Some(d) = &p.double_well else {
                e.push(
                    "pes.double_well",
                    "required when pes.kind = \"double_well\"",
                );
                return None;
            };
            let barrier = e.positive("pes.double_well.barrier", d.barrier);
            let center = e.req("pes.double_well.center", d.center);
            let half_width = e.positive("pes.double_well.half_width", d.half_width);
            PesModel::DoubleWell {
                barrier: barrier?,
                center: center?,
                half_width: half_width?,
            }
        }
        other => {
            e.push(
                "pes.kind",
                format!("unknown kind '{other}' (pauli_table, raw_table, bundled_h2, morse, double_well)"),
            );
            return None;
        }
    };
    Some(PesSpec {
        kind,
        path,
        description: model.describe(),
        mu: mu?,
        model: Some(model),
    })
}

fn resolve_langevin(l: &RawLangevin, mu: f64, mode: Mode, e: &mut Errors) -> Option<LangevinSpec> {
    let gamma = match e.req("langevin.gamma", l.gamma) {
        Some(g) if g >= 0.0 && g.is_finite() => Some(g),
        Some(g) => {
            e.push("langevin.gamma", format!("must be non-negative, got {g}"));
            None
        }
        None => None,
    };
    let dt = e.positive("langevin.dt", l.dt);
    let t = e.positive("langevin.T_phys_kelvin", l.T_phys_kelvin);
    let correction = match l.correction.as_deref().unwrap_or("on") {
        "on" => Some(true),
        "off" => Some(false),
        other => {
            e.push(
                "langevin.correction",
                format!("must be \"on\" or \"off\", got '{other}'"),
            );
            None
        }
    };
    let n_steps = if mode == Mode::Relax {
        e.count("langevin.n_steps", l.n_steps, None)
    } else {
        l.n_steps.or(Some(0))
    };
    let record_every = e.count("langevin.record_every", l.record_every, Some(10));
    let snapshot_fs = l.snapshot_fs.clone().unwrap_or_default();
    for s in &snapshot_fs {
        if !(*s >= 0.0) {
            e.push(
                "langevin.snapshot_fs",
                format!("times must be non-negative, got {s}"),
            );
        }
    }
    let initial = l.initial.as_ref().and_then(|i| {
        let r0 = e.positive("langevin.initial.R0_angstrom", i.R0_angstrom);
        let sr = e.positive("langevin.initial.sigma_R_angstrom", i.sigma_R_angstrom);
        let sp = match (i.sigma_P, t) {
            (Some(v), _) => e.positive("langevin.initial.sigma_P", Some(v)),
            (None, Some(t)) => Some((mu * units::kelvin_to_hartree(t)).sqrt()),
            _ => None,
        };
        Some(InitialSpec {
            r0: units::angstrom_to_bohr(r0?),
            p0: i.P0.unwrap_or(0.0),
            sigma_r: units::angstrom_to_bohr(sr?),
            sigma_p: sp?,
        })
    });
    let settings = ThermostatSettings {
        mu,
        gamma: gamma?,
        dt: dt?,
        t_phys: units::kelvin_to_hartree(t?),
    };
    let correction = correction?;
    let params = match LangevinParams::new(settings, correction) {
        Ok(p) => p,
        Err(err) => {
            e.push("langevin", err);
            return None;
        }
    };
    Some(LangevinSpec {
        s: params.s(),
        T_int_kelvin: units::hartree_to_kelvin(params.t_int),
        params,
        correction,
        n_steps: n_steps?,
        record_every: record_every?,
        snapshot_fs,
        initial,
    })
}

fn resolve_vdos(v: &RawVdos, e: &mut Errors) -> Option<VdosSpec> {
    let m = match e.req("vdos.m", v.m) {
        Some(m) if (1..=14).contains(&m) => Some(m),
        Some(m) => {
            e.push("vdos.m", format!("must be in 1..=14, got {m}"));
            None
        }
        None => None,
    };
    let tau = e.positive("vdos.tau", v.tau);
    let substeps = e.count("vdos.substeps", v.substeps, Some(1));
    let t = e.positive("vdos.T_kelvin", v.T_kelvin);
    let shift = v.omega_shift_cm1.unwrap_or(0.0);
    let window = match v.window.as_deref().unwrap_or("hann") {
        "hann" => Some(Window::Hann),
        "rect" => Some(Window::Rect),
        other => {
            e.push(
                "vdos.window",
                format!("must be \"hann\" or \"rect\", got '{other}'"),
            );
            None
        }
    };
    let fit_half_width = e.count("vdos.fit_half_width", v.fit_half_width, Some(5));
    let qpe = QpeConfig {
        m: m?,
        tau: tau?,
        omega_shift: units::cm1_to_au_freq(shift),
        substeps: substeps?,
    };
    Some(VdosSpec {
        qpe,
        t: units::kelvin_to_hartree(t?),
        window: window?,
        n_traj: v.n_traj.unwrap_or(256),
        fit_half_width: fit_half_width?,
        bin_width_cm1: units::au_freq_to_cm1(qpe.bin_width()),
    })
}

fn resolve_tst(t: &RawTst, e: &mut Errors) -> Option<TstSpec> {
    let rd = e.positive("tst.R_dagger_angstrom", t.R_dagger_angstrom);
    let sigma = match t.sigma_bohr {
        Some(s) => Some(e.positive("tst.sigma_bohr", Some(s))?),
        None => None,
    };
    let temps = match &t.temperatures_kelvin {
        Some(v) if v.len() >= 3 && v.iter().all(|x| *x > 0.0 && x.is_finite()) => Some(v.clone()),
        Some(v) => {
            e.push(
                "tst.temperatures_kelvin",
                format!("need at least 3 positive temperatures, got {v:?}"),
            );
            None
        }
        None => {
            e.push("tst.temperatures_kelvin", "missing");
            None
        }
    };
    let n_traj = e.count(
        "tst.n_traj",
        t.n_traj,
        Some(kvn_langevin::tst::DEFAULT_N_TRAJ),
    );
    let t_sim = e.positive_or("tst.t_sim", t.t_sim, kvn_langevin::tst::DEFAULT_T_SIM);
    let traj_dt = e.positive_or(
        "tst.traj_dt",
        t.traj_dt,
        kvn_langevin::tst::DEFAULT_CROSSING_DT,
    );
    Some(TstSpec {
        r_dagger: units::angstrom_to_bohr(rd?),
        sigma,
        temperatures_kelvin: temps?,
        crossing: t.crossing.unwrap_or(true),
        n_traj: n_traj?,
        t_sim: t_sim?,
        traj_dt: traj_dt?,
    })
}

fn resolve_bias(b: &RawBias, e: &mut Errors) -> Option<BiasSpec> {
    let s = b.s.clone().unwrap_or_else(|| vec![0.005, 0.01, 0.05]);
    if s.is_empty() || s.iter().any(|x| !(*x > 0.0 && *x < 5.0)) {
        e.push("bias.s", format!("values must lie in (0, 5), got {s:?}"));
    }
    let n_p = match b.n_P.unwrap_or(10) {
        n if (MIN_QUBITS..=MAX_QUBITS).contains(&n) => Some(n),
        n => {
            e.push(
                "bias.n_P",
                format!("must be in {MIN_QUBITS}..={MAX_QUBITS}, got {n}"),
            );
            None
        }
    };
    let t = e.positive_or("bias.T_kelvin", b.T_kelvin, 947.0);
    let dt = e.positive_or("bias.dt", b.dt, 0.5);
    let max_steps = e.count("bias.max_steps", b.max_steps, Some(200_000));
    let sig = e.positive_or("bias.P_max_sigmas", b.P_max_sigmas, 8.0);
    Some(BiasSpec {
        s,
        n_p: n_p?,
        t: units::kelvin_to_hartree(t?),
        dt: dt?,
        max_steps: max_steps?,
        p_max_sigmas: sig?,
    })
}

fn resolve_oracle(o: &RawOracle, l: Option<&LangevinSpec>, e: &mut Errors) -> Option<OracleSpec> {
    let n_traj = e.count("oracle.n_traj", o.n_traj, Some(100_000));
    let n_steps = e.count("oracle.n_steps", o.n_steps, Some(1000));
    let dt = e.positive_or("oracle.dt", o.dt, 1.0);
    let t = match (o.T_kelvin, l) {
        (Some(t), _) => e
            .positive("oracle.T_kelvin", Some(t))
            .map(units::kelvin_to_hartree),
        (None, Some(l)) => Some(l.params.t_phys),
        (None, None) => None,
    };
    let gamma = match (o.gamma, l) {
        (Some(g), _) => e.positive("oracle.gamma", Some(g)),
        (None, Some(l)) => Some(l.params.gamma),
        (None, None) => None,
    };
    let coarsen = e.count("oracle.coarsen", o.coarsen, Some(8));
    let dump_stride = e.count("oracle.dump_stride", o.dump_stride, Some(10));
    Some(OracleSpec {
        n_traj: n_traj?,
        n_steps: n_steps?,
        dt: dt?,
        t: t?,
        gamma: gamma?,
        coarsen: coarsen?,
        dump_trajectories: o.dump_trajectories.unwrap_or(0),
        dump_stride: dump_stride?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(text: &str) -> Result<RunConfig, Vec<String>> {
        validate(parse(text).unwrap(), Overrides::default(), Path::new("."))
    }

    const RELAX: &str = r#"
mode = "relax"
[grid]
n_R = 7
n_P = 7
R_min_angstrom = 0.3
R_max_angstrom = 4.0
[pes]
kind = "bundled_h2"
[langevin]
gamma = 0.02
dt = 0.5
T_phys_kelvin = 947
n_steps = 10
[langevin.initial]
R0_angstrom = 1.82
sigma_R_angstrom = 0.1
"#;

    #[test]
    fn echoes_derived_quantities() {
        let c = check(RELAX).unwrap();
        let l = c.langevin.unwrap();
        assert!((l.s - 0.01).abs() < 1e-15);
        let t_int = 947.0 / (1.0 + 0.5 * 0.01f64.tanh());
        assert!((l.T_int_kelvin - t_int).abs() < 1e-9);
        let t = units::kelvin_to_hartree(t_int);
        let sigma = (2.0 * H2_REDUCED_MASS_AU * t * (1.0 - (-0.02f64).exp())).sqrt();
        assert!((l.params.sigma_h - sigma).abs() < 1e-12 * sigma);
    }

    #[test]
    fn correction_off_keeps_physical_temperature() {
        let c =
            check(&RELAX.replace("n_steps = 10", "n_steps = 10\ncorrection = \"off\"")).unwrap();
        let l = c.langevin.unwrap();
        assert_eq!(l.params.t_int, l.params.t_phys);
    }

    #[test]
    fn missing_path_names_the_key() {
        let err =
            check(&RELAX.replace("kind = \"bundled_h2\"", "kind = \"pauli_table\"")).unwrap_err();
        assert!(err.iter().any(|m| m.starts_with("pes.path:")), "{err:?}");
    }

    #[test]
    fn errors_are_aggregated() {
        let text = RELAX
            .replace("gamma = 0.02", "gamma = -1")
            .replace("dt = 0.5", "dt = 0")
            .replace("n_R = 7", "n_R = 30");
        let err = check(&text).unwrap_err();
        for key in ["langevin.gamma", "langevin.dt", "grid.n_R"] {
            assert!(
                err.iter().any(|m| m.starts_with(key)),
                "{key} not in {err:?}"
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(&RELAX.replace("gamma = 0.02", "gamma = 0.02\ngama = 1")).is_err());
    }

    #[test]
    fn mode_sections_are_required() {
        let err = check("mode = \"vdos\"").unwrap_err();
        for key in ["grid", "pes", "vdos"] {
            assert!(
                err.iter().any(|m| m.starts_with(&format!("{key}:"))),
                "{err:?}"
            );
        }
        assert!(check("mode = \"bias-check\"").is_ok());
        assert!(check("mode = \"warp\"").is_err());
    }
}
