//! Particle-level reference engines: velocity Verlet, BAOAB Langevin
//! ensembles, a Metropolis canonical sampler, grid histograms, and the
//! infinite-product formula for the stationary cosine-filter state.
//!
//! Every trajectory or chain draws from its own ChaCha8 stream
//! `seed_from_u64(seed)` + `set_stream(index)`, so results do not depend on
//! how the work is scheduled.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::electronic::PesModel;
use crate::error::{Error, Result};
use crate::grid::PhaseSpaceGrid;
use crate::par;

/// Largest admissible `dt * sqrt(|V''(R0)| / mu)`.
pub const MAX_STEP_PHASE: f64 = 0.1;

pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Positions and momenta sampled every `stride` steps of size `dt`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub dt: f64,
    pub stride: usize,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.r.len()
    }
    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.dt * self.stride as f64;
        (0..self.r.len()).map(move |n| n as f64 * h)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryEnsemble {
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryEnsemble {
    /// `(R, P)` of every trajectory at its last frame.
    pub fn final_points(&self) -> Vec<(f64, f64)> {
        self.trajectories
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| (t.r[t.len() - 1], t.p[t.len() - 1]))
            .collect()
    }
}

fn check_step(pes: &PesModel, mu: f64, r0: f64, dt: f64) -> Result<()> {
    let phase = dt * (pes.curvature(r0)?.abs() / mu).sqrt();
    if phase >= MAX_STEP_PHASE {
        return Err(Error::StepTooLarge(phase));
    }
    Ok(())
}

/// One velocity-Verlet step written as half kick, two half drifts, half kick.
/// `f` is the force at `r` on entry and is updated in place.
#[inline]
pub(crate) fn verlet_step(
    pes: &PesModel,
    mu: f64,
    dt: f64,
    r: &mut f64,
    p: &mut f64,
    f: &mut f64,
) -> Result<()> {
    let h = 0.5 * dt;
    *p += h * *f;
    *r += h * *p / mu;
    *r += h * *p / mu;
    *f = pes.force(*r)?;
    *p += h * *f;
    Ok(())
}

/// `n` velocity-Verlet steps from `(r0, p0)`; returns `n + 1` frames.
pub fn verlet_trajectory(
    pes: &PesModel,
    mu: f64,
    r0: f64,
    p0: f64,
    dt: f64,
    n: usize,
) -> Result<Trajectory> {
    verlet_strided(pes, mu, r0, p0, dt, n, 1)
}

/// Like [`verlet_trajectory`] but stores every `stride`-th frame.
pub fn verlet_strided(
    pes: &PesModel,
    mu: f64,
    r0: f64,
    p0: f64,
    dt: f64,
    n: usize,
    stride: usize,
) -> Result<Trajectory> {
    check_step(pes, mu, r0, dt)?;
    let stride = stride.max(1);
    let (mut r, mut p) = (r0, p0);
    let mut f = pes.force(r)?;
    let mut tr = Trajectory {
        dt,
        stride,
        r: vec![r],
        p: vec![p],
    };
    for i in 1..=n {
        verlet_step(pes, mu, dt, &mut r, &mut p, &mut f)?;
        if i % stride == 0 {
            tr.r.push(r);
            tr.p.push(p);
        }
    }
    Ok(tr)
}

/// Verlet trajectories from each initial point, in parallel.
pub fn nve_ensemble(
    pes: &PesModel,
    mu: f64,
    initial: &[(f64, f64)],
    dt: f64,
    n: usize,
    stride: usize,
) -> Result<TrajectoryEnsemble> {
    if initial.is_empty() {
        return Err(Error::Config("empty initial-condition set".into()));
    }
    let trajectories = par::map_slice(initial, |&(r, p)| {
        verlet_strided(pes, mu, r, p, dt, n, stride)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble {
        seed: 0,
        trajectories,
    })
}

/// Initial conditions for [`langevin_ensemble`].
#[derive(Clone, Debug)]
pub enum Initial {
    /// Every trajectory starts from the same point.
    Point(f64, f64),
    /// One start per trajectory.
    Samples(Vec<(f64, f64)>),
}

/// Settings for [`langevin_ensemble`]. Temperature in hartree.
#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub mu: f64,
    pub gamma: f64,
    pub t: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    pub seed: u64,
    /// Store every `stride`-th frame; `n_steps` keeps only start and end.
    pub stride: usize,
    pub initial: Initial,
}

/// BAOAB-discretized Langevin trajectories. With `gamma = 0` each step is
/// bit-identical to [`verlet_trajectory`].
pub fn langevin_ensemble(pes: &PesModel, cfg: &EnsembleConfig) -> Result<TrajectoryEnsemble> {
    if !(cfg.mu > 0.0 && cfg.t > 0.0 && cfg.dt > 0.0 && cfg.gamma >= 0.0) {
        return Err(Error::Config(format!(
            "ensemble needs mu, T, dt > 0 and gamma >= 0 (mu={}, T={}, dt={}, gamma={})",
            cfg.mu, cfg.t, cfg.dt, cfg.gamma
        )));
    }
    if let Initial::Samples(s) = &cfg.initial {
        if s.len() != cfg.n_traj {
            return Err(Error::Shape {
                expected: cfg.n_traj,
                found: s.len(),
            });
        }
    }
    let c1 = (-cfg.gamma * cfg.dt).exp();
    let c2 = (-(-2.0 * cfg.gamma * cfg.dt).exp_m1()).sqrt() * (cfg.mu * cfg.t).sqrt();
    let stride = cfg.stride.max(1);
    let h = 0.5 * cfg.dt;
    let mu = cfg.mu;
    let run = |i: usize| -> Result<Trajectory> {
        let (mut r, mut p) = match &cfg.initial {
            Initial::Point(r, p) => (*r, *p),
            Initial::Samples(s) => s[i],
        };
        let mut rng = stream(cfg.seed, i as u64);
        let mut f = pes.force(r)?;
        let mut tr = Trajectory {
            dt: cfg.dt,
            stride,
            r: vec![r],
            p: vec![p],
        };
        for n in 1..=cfg.n_steps {
            p += h * f;
            r += h * p / mu;
            let xi: f64 = rng.sample(StandardNormal);
            p = c1 * p + c2 * xi;
            r += h * p / mu;
            f = pes.force(r)?;
            p += h * f;
            if n % stride == 0 {
                tr.r.push(r);
                tr.p.push(p);
            }
        }
        Ok(tr)
    };
    let trajectories = par::map_indexed(cfg.n_traj, run)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble {
        seed: cfg.seed,
        trajectories,
    })
}

/// Metropolis settings; the defaults are used by [`canonical_sampler`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SamplerSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub thinning: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 8,
            burn_in: 1000,
            thinning: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CanonicalSamples {
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    /// Post-burn-in acceptance rate of each chain.
    pub acceptance: Vec<f64>,
    /// Some chain accepted outside `[0.1, 0.9]` after adaptation.
    pub acceptance_warning: bool,
}

impl CanonicalSamples {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.r.iter().copied().zip(self.p.iter().copied()).collect()
    }
}

/// `N` canonical samples at temperature `t` (hartree): exact Maxwell momenta
/// and Metropolis positions on `exp(-V/t)` restricted to `range`.
pub fn canonical_sampler(
    pes: &PesModel,
    mu: f64,
    t: f64,
    n: usize,
    seed: u64,
    range: (f64, f64),
) -> Result<CanonicalSamples> {
    canonical_sampler_with(pes, mu, t, n, seed, range, SamplerSettings::default())
}

pub fn canonical_sampler_with(
    pes: &PesModel,
    mu: f64,
    t: f64,
    n: usize,
    seed: u64,
    range: (f64, f64),
    settings: SamplerSettings,
) -> Result<CanonicalSamples> {
    if !(t > 0.0 && mu > 0.0) || n == 0 || range.0 >= range.1 {
        return Err(Error::Config(format!(
            "sampler needs T, mu > 0, N > 0 and an ordered range (T={t}, N={n})"
        )));
    }
    let (lo, hi) = range;
    let (dlo, dhi) = pes.domain();
    if lo < dlo || hi > dhi {
        return Err(Error::Domain {
            r: if lo < dlo { lo } else { hi },
            lo: dlo,
            hi: dhi,
        });
    }
    // Start every chain at the lowest point of a coarse scan.
    let start = (0..=256)
        .map(|i| lo + (hi - lo) * i as f64 / 256.0)
        .map(|r| pes.energy(r).map(|v| (r, v)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|x| x.0)
        .unwrap();
    let chains = settings.chains.max(1);
    let per_chain: Vec<usize> = (0..chains)
        .map(|c| n / chains + usize::from(c < n % chains))
        .collect();
    let pstd = (mu * t).sqrt();
    let results = par::map_indexed(chains, |c| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let mut rng = stream(seed, c as u64);
        let mut r = start;
        let mut v = pes.energy(r)?;
        let mut step = 0.1 * (hi - lo);
        let propose = |rng: &mut ChaCha8Rng, r: &mut f64, v: &mut f64, step: f64| -> Result<bool> {
            let x: f64 = rng.sample(StandardNormal);
            let cand = *r + step * x;
            let u: f64 = rng.random();
            if cand < lo || cand >= hi {
                return Ok(false);
            }
            let vc = pes.energy(cand)?;
            if u < (-(vc - *v) / t).exp() {
                *r = cand;
                *v = vc;
                return Ok(true);
            }
            Ok(false)
        };
        let mut acc = 0usize;
        for i in 1..=settings.burn_in {
            acc += propose(&mut rng, &mut r, &mut v, step)? as usize;
            if i % 100 == 0 {
                let rate = acc as f64 / 100.0;
                step = (step * (rate / 0.5).clamp(0.2, 5.0)).min(hi - lo);
                acc = 0;
            }
        }
        let want = per_chain[c];
        let mut rs = Vec::with_capacity(want);
        let mut ps = Vec::with_capacity(want);
        let mut accepted = 0usize;
        let mut tried = 0usize;
        while rs.len() < want {
            for _ in 0..settings.thinning.max(1) {
                accepted += propose(&mut rng, &mut r, &mut v, step)? as usize;
                tried += 1;
            }
            rs.push(r);
            let z: f64 = rng.sample(StandardNormal);
            ps.push(pstd * z);
        }
        Ok((rs, ps, accepted as f64 / tried.max(1) as f64))
    });
    let mut out = CanonicalSamples {
        r: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        acceptance: vec![],
        acceptance_warning: false,
    };
    for res in results {
        let (rs, ps, a) = res?;
        out.r.extend(rs);
        out.p.extend(ps);
        out.acceptance.push(a);
    }
    if out.acceptance.iter().any(|a| !(0.1..=0.9).contains(a)) {
        warn!(
            "Metropolis acceptance outside [0.1, 0.9]: {:?}",
            out.acceptance
        );
        out.acceptance_warning = true;
    }
    Ok(out)
}

/// Mean and batch-means standard error of a correlated series.
pub fn batch_mean(x: &[f64], batches: usize) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let b = batches.clamp(2, n.max(2));
    let len = n / b;
    if len == 0 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..b)
        .map(|k| x[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (mean, (var / b as f64).sqrt())
}

/// Normalized histogram on the grid's nearest-node cells; samples outside
/// every cell still count toward the total, so the histogram carries their
/// mass as a deficit.
pub fn histogram_density(samples: &[(f64, f64)], grid: &PhaseSpaceGrid) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("no samples".into()));
    }
    let np = grid.n_p();
    let mut h = vec![0.0; grid.len()];
    for &(r, p) in samples {
        if let (Some(j), Some(l)) = (grid.r_index(r), grid.p_index(p)) {
            h[j * np + l] += 1.0;
        }
    }
    let w = 1.0 / (samples.len() as f64 * grid.cell());
    h.iter_mut().for_each(|x| *x *= w);
    Ok(h)
}

/// Relative kinetic-temperature bias of the stationary cosine-filter state,
/// `<P^2>/(mu T_int) - 1`, from the product
/// `psi~(kappa) = prod_r cos(sigma_H y^r kappa)`, `y = e^{-s}`.
///
/// Computed in units where `mu T_int = 1`, so `sigma_H^2 = 2 (1 - e^{-2s})`.
/// The product is truncated once `y^r < e^{-20}`, and never before 200 terms.
pub fn cos_product_bias(s: f64) -> f64 {
    assert!(s > 0.0, "s must be positive");
    let y = (-s).exp();
    let sigma = (-2.0 * (-2.0 * s).exp_m1()).sqrt();
    let terms = 200usize.max((20.0 / s).ceil() as usize);
    let scales: Vec<f64> = (0..terms).map(|r| sigma * y.powi(r as i32)).collect();
    let half = 8.0;
    let n = 4001;
    let h = 2.0 * half / (n - 1) as f64;
    let point = |i: usize| -> (f64, f64) {
        let k = -half + i as f64 * h;
        let c: Vec<f64> = scales.iter().map(|a| (a * k).cos()).collect();
        let mut suffix = vec![1.0; terms + 1];
        for r in (0..terms).rev() {
            suffix[r] = suffix[r + 1] * c[r];
        }
        let mut prefix = 1.0;
        let mut d = 0.0;
        for r in 0..terms {
            d -= scales[r] * (scales[r] * k).sin() * prefix * suffix[r + 1];
            prefix *= c[r];
        }
        (prefix * prefix, d * d)
    };
    let vals = par::map_indexed(n, point);
    let (mut z, mut m2) = (0.0, 0.0);
    for (i, (a, b)) in vals.iter().enumerate() {
        let w = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        z += w * a;
        m2 += w * b;
    }
    m2 / z - 1.0
}
