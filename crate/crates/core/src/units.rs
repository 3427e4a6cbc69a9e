//! Physical constants (CODATA 2018) and unit conversions.
//!
//! The library works in Hartree atomic units throughout; conversions only
//! happen at the edges (configuration input and CSV output).

/// 1 bohr in ångström.
pub const BOHR_ANGSTROM: f64 = 0.529177210903;
/// 1 atomic unit of time in femtoseconds.
pub const AU_TIME_FS: f64 = 0.02418884254;
/// Boltzmann constant in hartree per kelvin.
pub const KB_HARTREE_PER_K: f64 = 3.166811563e-6;
/// 1 hartree in wavenumbers.
pub const HARTREE_CM1: f64 = 219474.6313632;
/// Proton mass in electron masses.
pub const PROTON_MASS_AU: f64 = 1836.15267343;
/// Reduced mass of two protons (H2 stretch), electron masses.
pub const H2_REDUCED_MASS_AU: f64 = PROTON_MASS_AU / 2.0;

pub fn angstrom_to_bohr(x: f64) -> f64 {
    x / BOHR_ANGSTROM
}

pub fn bohr_to_angstrom(x: f64) -> f64 {
    x * BOHR_ANGSTROM
}

pub fn kelvin_to_hartree(t: f64) -> f64 {
    t * KB_HARTREE_PER_K
}

pub fn hartree_to_kelvin(t: f64) -> f64 {
    t / KB_HARTREE_PER_K
}

pub fn au_time_to_fs(t: f64) -> f64 {
    t * AU_TIME_FS
}

pub fn fs_to_au_time(t: f64) -> f64 {
    t / AU_TIME_FS
}

/// Angular frequency in a.u. (hartree) to wavenumber.
pub fn au_freq_to_cm1(w: f64) -> f64 {
    w * HARTREE_CM1
}

pub fn cm1_to_au_freq(w: f64) -> f64 {
    w / HARTREE_CM1
}

/// Rate in inverse atomic time units to inverse seconds.
pub fn rate_au_to_per_second(k: f64) -> f64 {
    k / (AU_TIME_FS * 1e-15)
}
