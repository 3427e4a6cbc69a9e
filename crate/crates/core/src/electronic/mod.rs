//! Born-Oppenheimer potentials: the one-qubit Pauli H2 model built from a
//! coefficient table, splined raw energy tables, and analytic model surfaces.

mod spline;
mod table;

pub use spline::CubicSpline;
pub use table::{PauliCoefficientTable, RawPesTable, MIN_ROWS, PAULI_HEADER, RAW_HEADER};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::PhaseSpaceGrid;

/// Level-degeneracy guard on `Omega = sqrt(b^2 + c^2)` (hartree).
pub const OMEGA_EPS: f64 = 1e-12;

const BUNDLED_H2: &str = include_str!("../../data/h2_sto3g_pauli.csv");

/// Where a surface came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PesKind {
    PauliTable,
    RawTable,
    Morse,
    Analytic,
}

/// `V = D_e (1 - exp(-alpha (R - R_e)))^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Morse {
    pub de: f64,
    pub alpha: f64,
    pub re: f64,
}

/// A potential energy surface with consistent force and curvature (a.u.).
#[derive(Clone, Debug)]
pub enum PesModel {
    PauliTable(PauliCoefficientTable),
    RawTable(RawPesTable),
    Morse(Morse),
    /// `V = k (R - r0)^2 / 2`.
    Harmonic {
        k: f64,
        r0: f64,
    },
    /// Constant force `F = force`, `V = -force * R`. Zero force gives a flat surface.
    Linear {
        force: f64,
    },
    /// Symmetric quartic double well `V = barrier ((x/a)^2 - 1)^2` with
    /// `x = R - center`: minima at `center +- a`, barrier top at `center`.
    DoubleWell {
        barrier: f64,
        center: f64,
        half_width: f64,
    },
}

/// Validated Morse surface.
pub fn morse_pes(de: f64, alpha: f64, re: f64) -> Result<PesModel> {
    if !(de > 0.0 && alpha > 0.0 && re > 0.0) || ![de, alpha, re].iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!(
            "Morse parameters must be positive: De={de}, alpha={alpha}, Re={re}"
        )));
    }
    Ok(PesModel::Morse(Morse { de, alpha, re }))
}

/// `a(R) - Omega(R)` from spline-interpolated coefficients.
pub fn ground_state_energy(table: &PauliCoefficientTable, r: f64) -> Result<f64> {
    let [(a, ..), (b, ..), (c, ..)] = table.coefficients(r)?;
    Ok(a - b.hypot(c))
}

/// Hellmann-Feynman force `-a' + (b b' + c c') / Omega`.
pub fn hf_force(table: &PauliCoefficientTable, r: f64) -> Result<f64> {
    let [(_, da, _), (b, db, _), (c, dc, _)] = table.coefficients(r)?;
    let omega = b.hypot(c);
    if omega <= OMEGA_EPS {
        return Err(Error::Singularity { r, omega });
    }
    Ok(-da + (b * db + c * dc) / omega)
}

fn pauli_curvature(table: &PauliCoefficientTable, r: f64) -> Result<f64> {
    let [(_, _, d2a), (b, db, d2b), (c, dc, d2c)] = table.coefficients(r)?;
    let omega = b.hypot(c);
    if omega <= OMEGA_EPS {
        return Err(Error::Singularity { r, omega });
    }
    let g = b * db + c * dc;
    let d2omega = (db * db + b * d2b + dc * dc + c * d2c) / omega - g * g / omega.powi(3);
    Ok(d2a - d2omega)
}

impl PesModel {
    /// The H2 FCI/STO-3G coefficient table shipped with the crate.
    pub fn bundled_h2() -> Self {
        PesModel::PauliTable(
            PauliCoefficientTable::read(BUNDLED_H2.as_bytes()).expect("bundled table is valid"),
        )
    }

    pub fn kind(&self) -> PesKind {
        match self {
            PesModel::PauliTable(_) => PesKind::PauliTable,
            PesModel::RawTable(_) => PesKind::RawTable,
            PesModel::Morse(_) => PesKind::Morse,
            _ => PesKind::Analytic,
        }
    }

    /// Interval on which the model may be evaluated.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            PesModel::PauliTable(t) => t.domain(),
            PesModel::RawTable(t) => t.domain(),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn energy(&self, r: f64) -> Result<f64> {
        match self {
            PesModel::PauliTable(t) => ground_state_energy(t, r),
            PesModel::RawTable(t) => t.spline().eval(r),
            PesModel::Morse(m) => Ok(m.de * (1.0 - (-m.alpha * (r - m.re)).exp()).powi(2)),
            PesModel::Harmonic { k, r0 } => Ok(0.5 * k * (r - r0).powi(2)),
            PesModel::Linear { force } => Ok(-force * r),
            PesModel::DoubleWell {
                barrier,
                center,
                half_width,
            } => {
                let u = ((r - center) / half_width).powi(2);
                Ok(barrier * (u - 1.0).powi(2))
            }
        }
    }

    /// `F = -dV/dR`.
    pub fn force(&self, r: f64) -> Result<f64> {
        match self {
            PesModel::PauliTable(t) => hf_force(t, r),
            PesModel::RawTable(t) => t.spline().derivative(r).map(|d| -d),
            PesModel::Morse(m) => {
                let e = (-m.alpha * (r - m.re)).exp();
                Ok(-2.0 * m.de * m.alpha * e * (1.0 - e))
            }
            PesModel::Harmonic { k, r0 } => Ok(-k * (r - r0)),
            PesModel::Linear { force } => Ok(*force),
            PesModel::DoubleWell {
                barrier,
                center,
                half_width,
            } => {
                let x = r - center;
                let a2 = half_width * half_width;
                Ok(-4.0 * barrier * x * (x * x / a2 - 1.0) / a2)
            }
        }
    }

    /// `d^2 V / dR^2`.
    pub fn curvature(&self, r: f64) -> Result<f64> {
        match self {
            PesModel::PauliTable(t) => pauli_curvature(t, r),
            PesModel::RawTable(t) => t.spline().eval_all(r).map(|v| v.2),
            PesModel::Morse(m) => {
                let e = (-m.alpha * (r - m.re)).exp();
                Ok(2.0 * m.de * m.alpha * m.alpha * e * (2.0 * e - 1.0))
            }
            PesModel::Harmonic { k, .. } => Ok(*k),
            PesModel::Linear { .. } => Ok(0.0),
            PesModel::DoubleWell {
                barrier,
                center,
                half_width,
            } => {
                let x = r - center;
                let a2 = half_width * half_width;
                Ok(4.0 * barrier * (3.0 * x * x / a2 - 1.0) / a2)
            }
        }
    }

    /// Short description for logs and manifests.
    pub fn describe(&self) -> String {
        match self {
            PesModel::PauliTable(t) => format!("pauli-table ({} rows)", t.len()),
            PesModel::RawTable(t) => format!("raw-table ({} rows)", t.len()),
            PesModel::Morse(m) => format!("morse (De={}, alpha={}, Re={})", m.de, m.alpha, m.re),
            PesModel::Harmonic { k, r0 } => format!("harmonic (k={k}, r0={r0})"),
            PesModel::Linear { force } => format!("linear (F={force})"),
            PesModel::DoubleWell {
                barrier,
                center,
                half_width,
            } => {
                format!("double-well (V={barrier}, center={center}, a={half_width})")
            }
        }
    }
}

/// Potential and force at every R node of `grid`.
pub fn tabulate_pes(model: &PesModel, grid: &PhaseSpaceGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = model.domain();
    let r = grid.r();
    for &x in [r[0], r[r.len() - 1]].iter() {
        if x < lo || x > hi {
            return Err(Error::Domain { r: x, lo, hi });
        }
    }
    let v = r
        .iter()
        .map(|&x| model.energy(x))
        .collect::<Result<Vec<_>>>()?;
    let f = r
        .iter()
        .map(|&x| model.force(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((v, f))
}
