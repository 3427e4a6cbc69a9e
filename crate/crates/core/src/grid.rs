//! Phase-space discretization and the KvN amplitude container.
//!
//! Both axes are uniform periodic grids, `x_j = x_min + j * dx` with
//! `dx = (x_max - x_min) / N`; the upper end is excluded. Conjugate wavenumber
//! arrays are kept in FFT-natural order (`0, 1, ..., N/2-1, -N/2, ..., -1`
//! times `2 pi / (N dx)`), so they cover `[-pi/dx, pi/dx)`. Accessors that
//! hand wavenumbers to callers return them sorted ascending instead.
//!
//! Amplitudes are stored row-major with the R index slow and the P index
//! fast. A state in `(k_R, P)` or `(R, k_P)` keeps the same layout with the
//! transformed axis re-indexed in FFT-natural order. All transforms are
//! unitary: `sum |psi|^2` is preserved exactly.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;

pub const MIN_QUBITS: u32 = 3;
pub const MAX_QUBITS: u32 = 14;

/// Which representation a [`KvnState`] currently holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Basis {
    /// Phase space `(R, P)`; `|psi|^2` is the density.
    Rp,
    /// `(k_R, P)`: R axis Fourier transformed.
    KrP,
    /// `(R, k_P)`: P axis Fourier transformed.
    RKp,
}

#[derive(Clone)]
struct FftPlans {
    fwd_r: Arc<dyn Fft<f64>>,
    inv_r: Arc<dyn Fft<f64>>,
    fwd_p: Arc<dyn Fft<f64>>,
    inv_p: Arc<dyn Fft<f64>>,
}

/// Uniform `(R, P)` grid with conjugate wavenumber axes.
#[derive(Clone)]
pub struct PhaseSpaceGrid {
    n_r_qubits: u32,
    n_p_qubits: u32,
    r_min: f64,
    r_max: f64,
    p_min: f64,
    p_max: f64,
    dr: f64,
    dp: f64,
    r: Vec<f64>,
    p: Vec<f64>,
    k_r: Vec<f64>,
    k_p: Vec<f64>,
    plans: FftPlans,
}

impl fmt::Debug for PhaseSpaceGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseSpaceGrid")
            .field("n_r_qubits", &self.n_r_qubits)
            .field("n_p_qubits", &self.n_p_qubits)
            .field("r_range", &(self.r_min, self.r_max))
            .field("p_range", &(self.p_min, self.p_max))
            .finish()
    }
}

/// Grid description as written to run metadata (atomic units).
#[derive(Clone, Debug, Serialize)]
#[allow(non_snake_case)]
pub struct GridMetadata {
    pub n_R: u32,
    pub n_P: u32,
    pub R_min: f64,
    pub R_max: f64,
    pub P_min: f64,
    pub P_max: f64,
}

fn natural_wavenumbers(n: usize, dx: f64) -> Vec<f64> {
    let dk = 2.0 * PI / (n as f64 * dx);
    (0..n)
        .map(|i| {
            let m = if i < n / 2 {
                i as i64
            } else {
                i as i64 - n as i64
            };
            m as f64 * dk
        })
        .collect()
}

fn check_axis(name: &str, qubits: u32, lo: f64, hi: f64) -> Result<()> {
    if !(MIN_QUBITS..=MAX_QUBITS).contains(&qubits) {
        return Err(Error::Config(format!(
            "{name}: qubit count {qubits} outside [{MIN_QUBITS}, {MAX_QUBITS}]"
        )));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::Config(format!(
            "{name}: range ({lo}, {hi}) must be finite and strictly ordered"
        )));
    }
    Ok(())
}

impl PhaseSpaceGrid {
    /// Build a grid with `2^n_r x 2^n_p` points over the given ranges (a.u.).
    pub fn new(n_r: u32, n_p: u32, r_range: (f64, f64), p_range: (f64, f64)) -> Result<Arc<Self>> {
        check_axis("R axis", n_r, r_range.0, r_range.1)?;
        check_axis("P axis", n_p, p_range.0, p_range.1)?;
        let nr = 1usize << n_r;
        let np = 1usize << n_p;
        let dr = (r_range.1 - r_range.0) / nr as f64;
        let dp = (p_range.1 - p_range.0) / np as f64;
        let mut planner = FftPlanner::new();
        let plans = FftPlans {
            fwd_r: planner.plan_fft_forward(nr),
            inv_r: planner.plan_fft_inverse(nr),
            fwd_p: planner.plan_fft_forward(np),
            inv_p: planner.plan_fft_inverse(np),
        };
        Ok(Arc::new(Self {
            n_r_qubits: n_r,
            n_p_qubits: n_p,
            r_min: r_range.0,
            r_max: r_range.1,
            p_min: p_range.0,
            p_max: p_range.1,
            dr,
            dp,
            r: (0..nr).map(|j| r_range.0 + j as f64 * dr).collect(),
            p: (0..np).map(|l| p_range.0 + l as f64 * dp).collect(),
            k_r: natural_wavenumbers(nr, dr),
            k_p: natural_wavenumbers(np, dp),
            plans,
        }))
    }

    pub fn n_r_qubits(&self) -> u32 {
        self.n_r_qubits
    }
    pub fn n_p_qubits(&self) -> u32 {
        self.n_p_qubits
    }
    pub fn n_r(&self) -> usize {
        self.r.len()
    }
    pub fn n_p(&self) -> usize {
        self.p.len()
    }
    pub fn len(&self) -> usize {
        self.r.len() * self.p.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn r_range(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }
    pub fn p_range(&self) -> (f64, f64) {
        (self.p_min, self.p_max)
    }
    pub fn dr(&self) -> f64 {
        self.dr
    }
    pub fn dp(&self) -> f64 {
        self.dp
    }
    /// Phase-space cell area `dR * dP`, the quadrature weight.
    pub fn cell(&self) -> f64 {
        self.dr * self.dp
    }
    pub fn r(&self) -> &[f64] {
        &self.r
    }
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// `k_R` in FFT-natural order, matching the storage layout.
    pub fn k_r_natural(&self) -> &[f64] {
        &self.k_r
    }
    /// `k_P` in FFT-natural order, matching the storage layout.
    pub fn k_p_natural(&self) -> &[f64] {
        &self.k_p
    }
    /// `k_R` sorted ascending.
    pub fn k_r(&self) -> Vec<f64> {
        fftshift(&self.k_r)
    }
    /// `k_P` sorted ascending.
    pub fn k_p(&self) -> Vec<f64> {
        fftshift(&self.k_p)
    }

    /// Wavenumbers used for first-derivative generators: the unpaired
    /// Nyquist mode is set to zero so real functions stay real under
    /// `exp(-i t a(x) k)`.
    pub(crate) fn derivative_wavenumbers(k: &[f64]) -> Vec<f64> {
        let mut out = k.to_vec();
        out[k.len() / 2] = 0.0;
        out
    }

    pub fn metadata(&self) -> GridMetadata {
        GridMetadata {
            n_R: self.n_r_qubits,
            n_P: self.n_p_qubits,
            R_min: self.r_min,
            R_max: self.r_max,
            P_min: self.p_min,
            P_max: self.p_max,
        }
    }

    /// Index of the grid node nearest to `r`, if it lies in a grid cell.
    pub fn r_index(&self, r: f64) -> Option<usize> {
        nearest(r, self.r_min, self.dr, self.n_r())
    }
    pub fn p_index(&self, p: f64) -> Option<usize> {
        nearest(p, self.p_min, self.dp, self.n_p())
    }
}

fn nearest(x: f64, lo: f64, dx: f64, n: usize) -> Option<usize> {
    let i = ((x - lo) / dx).round();
    if i >= 0.0 && (i as usize) < n {
        Some(i as usize)
    } else {
        None
    }
}

/// Reorder an FFT-natural array into ascending-frequency order.
pub fn fftshift<T: Copy>(x: &[T]) -> Vec<T> {
    let h = x.len() / 2;
    x[h..].iter().chain(x[..h].iter()).copied().collect()
}

/// Complex amplitude over a [`PhaseSpaceGrid`].
#[derive(Clone, Debug)]
pub struct KvnState {
    grid: Arc<PhaseSpaceGrid>,
    basis: Basis,
    amps: Vec<Complex64>,
}

impl KvnState {
    /// Wrap raw amplitudes. The state is normalized on the way in.
    pub fn from_amplitudes(
        grid: Arc<PhaseSpaceGrid>,
        basis: Basis,
        amps: Vec<Complex64>,
    ) -> Result<Self> {
        if amps.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                found: amps.len(),
            });
        }
        let mut s = Self { grid, basis, amps };
        let n = s.normalize();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate(format!("amplitude norm {n}")));
        }
        Ok(s)
    }

    /// Same as [`KvnState::from_amplitudes`] without renormalizing.
    pub(crate) fn from_raw(grid: Arc<PhaseSpaceGrid>, basis: Basis, amps: Vec<Complex64>) -> Self {
        debug_assert_eq!(amps.len(), grid.len());
        Self { grid, basis, amps }
    }

    /// Normalized Gaussian packet whose density has standard deviations
    /// `s_r`, `s_p` about `(r0, p0)`.
    pub fn gaussian(
        grid: &Arc<PhaseSpaceGrid>,
        r0: f64,
        p0: f64,
        s_r: f64,
        s_p: f64,
    ) -> Result<Self> {
        let (rl, rh) = grid.r_range();
        let (pl, ph) = grid.p_range();
        if !(rl..rh).contains(&r0) || !(pl..ph).contains(&p0) {
            return Err(Error::Config(format!(
                "packet center ({r0}, {p0}) outside the grid"
            )));
        }
        if s_r < 2.0 * grid.dr() || s_p < 2.0 * grid.dp() {
            return Err(Error::Resolution(format!(
                "packet widths ({s_r}, {s_p}) below two grid spacings ({}, {})",
                2.0 * grid.dr(),
                2.0 * grid.dp()
            )));
        }
        let fr: Vec<f64> = grid
            .r()
            .iter()
            .map(|&r| -(r - r0).powi(2) / (4.0 * s_r * s_r))
            .collect();
        let fp: Vec<f64> = grid
            .p()
            .iter()
            .map(|&p| -(p - p0).powi(2) / (4.0 * s_p * s_p))
            .collect();
        let amps = fr
            .iter()
            .flat_map(|a| fp.iter().map(move |b| Complex64::new((a + b).exp(), 0.0)))
            .collect();
        Self::from_amplitudes(grid.clone(), Basis::Rp, amps)
    }

    pub fn grid(&self) -> &Arc<PhaseSpaceGrid> {
        &self.grid
    }
    pub fn basis(&self) -> Basis {
        self.basis
    }
    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }
    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }
    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amps
    }

    pub fn require(&self, basis: Basis) -> Result<()> {
        if self.basis == basis {
            Ok(())
        } else {
            Err(Error::Basis {
                expected: basis,
                found: self.basis,
            })
        }
    }

    /// `sum |psi|^2 dR dP`.
    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.cell()
    }

    /// Rescale to unit norm; returns the squared norm beforehand.
    pub fn normalize(&mut self) -> f64 {
        let n = self.norm_sq();
        if n > 0.0 && n.is_finite() {
            let s = 1.0 / n.sqrt();
            self.amps.iter_mut().for_each(|a| *a *= s);
        }
        n
    }

    /// `<self|other> = sum conj(self) other dR dP`.
    pub fn inner(&self, other: &KvnState) -> Result<Complex64> {
        other.require(self.basis)?;
        if other.amps.len() != self.amps.len() {
            return Err(Error::Shape {
                expected: self.amps.len(),
                found: other.amps.len(),
            });
        }
        let s: Complex64 = self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(s * self.grid.cell())
    }

    /// Multiply every amplitude by `exp(i phi)`.
    pub fn apply_global_phase(&mut self, phi: f64) {
        let z = Complex64::from_polar(1.0, phi);
        self.amps.iter_mut().for_each(|a| *a *= z);
    }

    /// Phase-space density `|psi|^2`, integrating to one with `dR dP` weights.
    pub fn density(&self) -> Result<Vec<f64>> {
        self.require(Basis::Rp)?;
        Ok(self.amps.iter().map(|a| a.norm_sqr()).collect())
    }

    /// Amplitudes with any transformed axis reordered to ascending wavenumber.
    pub fn sorted_amplitudes(&self) -> Vec<Complex64> {
        let (nr, np) = (self.grid.n_r(), self.grid.n_p());
        match self.basis {
            Basis::Rp => self.amps.clone(),
            Basis::RKp => self.amps.chunks(np).flat_map(fftshift).collect(),
            Basis::KrP => {
                let h = nr / 2;
                (0..nr)
                    .flat_map(|i| {
                        let src = (i + h) % nr;
                        self.amps[src * np..(src + 1) * np].iter().copied()
                    })
                    .collect()
            }
        }
    }

    /// `(R, P) -> (R, k_P)`.
    pub fn fourier_p(&mut self) -> Result<()> {
        self.require(Basis::Rp)?;
        self.rows_fft(false);
        self.basis = Basis::RKp;
        Ok(())
    }

    /// `(R, k_P) -> (R, P)`.
    pub fn inverse_fourier_p(&mut self) -> Result<()> {
        self.require(Basis::RKp)?;
        self.rows_fft(true);
        self.basis = Basis::Rp;
        Ok(())
    }

    /// `(R, P) -> (k_R, P)`.
    pub fn fourier_r(&mut self) -> Result<()> {
        self.require(Basis::Rp)?;
        self.columns_fft(false);
        self.basis = Basis::KrP;
        Ok(())
    }

    /// `(k_R, P) -> (R, P)`.
    pub fn inverse_fourier_r(&mut self) -> Result<()> {
        self.require(Basis::KrP)?;
        self.columns_fft(true);
        self.basis = Basis::Rp;
        Ok(())
    }

    fn rows_fft(&mut self, inverse: bool) {
        let np = self.grid.n_p();
        let fft = if inverse {
            &self.grid.plans.inv_p
        } else {
            &self.grid.plans.fwd_p
        };
        let scale = 1.0 / (np as f64).sqrt();
        let rows = rows_per_chunk(self.grid.n_r(), np);
        par::for_each_chunk(&mut self.amps, rows * np, |_, chunk| {
            let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
            fft.process_with_scratch(chunk, &mut scratch);
            chunk.iter_mut().for_each(|a| *a *= scale);
        });
    }

    fn columns_fft(&mut self, inverse: bool) {
        let (nr, np) = (self.grid.n_r(), self.grid.n_p());
        let fft = if inverse {
            &self.grid.plans.inv_r
        } else {
            &self.grid.plans.fwd_r
        };
        let scale = 1.0 / (nr as f64).sqrt();
        let mut t = transpose(&self.amps, nr, np);
        par::for_each_chunk(&mut t, rows_per_chunk(np, nr) * nr, |_, chunk| {
            let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
            fft.process_with_scratch(chunk, &mut scratch);
            chunk.iter_mut().for_each(|a| *a *= scale);
        });
        self.amps = transpose(&t, np, nr);
    }

    /// Transform each P row to `k_P`, let `f(j, row)` act on it, and
    /// transform back. The state stays in `(R, P)`.
    pub(crate) fn map_p_spectrum<F>(&mut self, f: F) -> Result<()>
    where
        F: Fn(usize, &mut [Complex64]) + Sync + Send,
    {
        self.require(Basis::Rp)?;
        let np = self.grid.n_p();
        let plans = &self.grid.plans;
        let scale = 1.0 / np as f64;
        let rows = rows_per_chunk(self.grid.n_r(), np);
        par::for_each_chunk(&mut self.amps, rows * np, |c, chunk| {
            let mut scratch = vec![
                Complex64::default();
                plans
                    .fwd_p
                    .get_inplace_scratch_len()
                    .max(plans.inv_p.get_inplace_scratch_len())
            ];
            plans.fwd_p.process_with_scratch(chunk, &mut scratch);
            for (i, row) in chunk.chunks_mut(np).enumerate() {
                f(c * rows + i, row);
            }
            plans.inv_p.process_with_scratch(chunk, &mut scratch);
            chunk.iter_mut().for_each(|a| *a *= scale);
        });
        Ok(())
    }

    /// Transform each R column to `k_R`, let `f(l, column)` act on it, and
    /// transform back. The state stays in `(R, P)`.
    pub(crate) fn map_r_spectrum<F>(&mut self, f: F) -> Result<()>
    where
        F: Fn(usize, &mut [Complex64]) + Sync + Send,
    {
        self.require(Basis::Rp)?;
        let (nr, np) = (self.grid.n_r(), self.grid.n_p());
        let plans = &self.grid.plans;
        let scale = 1.0 / nr as f64;
        let rows = rows_per_chunk(np, nr);
        let mut t = transpose(&self.amps, nr, np);
        par::for_each_chunk(&mut t, rows * nr, |c, chunk| {
            let mut scratch = vec![
                Complex64::default();
                plans
                    .fwd_r
                    .get_inplace_scratch_len()
                    .max(plans.inv_r.get_inplace_scratch_len())
            ];
            plans.fwd_r.process_with_scratch(chunk, &mut scratch);
            for (i, col) in chunk.chunks_mut(nr).enumerate() {
                f(c * rows + i, col);
            }
            plans.inv_r.process_with_scratch(chunk, &mut scratch);
            chunk.iter_mut().for_each(|a| *a *= scale);
        });
        transpose_into(&t, np, nr, &mut self.amps);
        Ok(())
    }

    /// Apply `f(j, row)` to every P row in the `(R, P)` basis.
    pub(crate) fn map_rows<F>(&mut self, f: F) -> Result<()>
    where
        F: Fn(usize, &mut [Complex64]) + Sync + Send,
    {
        self.require(Basis::Rp)?;
        let np = self.grid.n_p();
        par::for_each_chunk(&mut self.amps, np, f);
        Ok(())
    }
}

/// Group short rows so each parallel task does a reasonable amount of work.
fn rows_per_chunk(rows: usize, row_len: usize) -> usize {
    let target = (1usize << 14) / row_len.max(1);
    let mut r = target.clamp(1, rows);
    while rows % r != 0 {
        r -= 1;
    }
    r
}

fn transpose(a: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); a.len()];
    transpose_into(a, rows, cols, &mut out);
    out
}

/// `out[c][r] = a[r][c]` for an `rows x cols` row-major input.
fn transpose_into(a: &[Complex64], rows: usize, cols: usize, out: &mut [Complex64]) {
    par::for_each_chunk(out, rows, |c, out_row| {
        for (r, o) in out_row.iter_mut().enumerate() {
            *o = a[r * cols + c];
        }
    });
}
