//! Multipath channel data model and the Monte Carlo side of the beam RSRP
//! statistics: per-path conditional powers, instantaneous received power under
//! random phases, and the empirical mean/std estimator.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{arv, dft_weight, ArrayConfig, BeamSpec};
use crate::geom::{element_gain_in_basis, Vec3};
use crate::num::{phase_at, real, Real};

/// Floor added before dB conversion so zero power stays finite.
pub const DB_FLOOR_EPS: f64 = 1e-18;

/// Linear power to dB with the zero-power floor.
pub fn power_to_db<R: Real>(p: R) -> R {
    (p + real(DB_FLOOR_EPS)).log10() * real(10.0)
}

/// dB to linear power.
pub fn db_to_power<R: Real>(db: R) -> R {
    real::<R>(10.0).powf(db / real(10.0))
}

/// One propagation path: 7-D condition (departure and arrival directions,
/// delay) plus its conditional power `p = α²` and an existence flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScpEntry<R> {
    /// Unit direction of departure at the panel.
    pub u_tx: Vec3<R>,
    /// Unit direction of arrival at the user.
    pub u_rx: Vec3<R>,
    /// Propagation delay, seconds.
    pub tau: R,
    /// Linear conditional power (amplitude squared).
    pub p: R,
    pub exists: bool,
}

impl<R: Real> ScpEntry<R> {
    pub fn new(u_tx: Vec3<R>, u_rx: Vec3<R>, tau: R, p: R) -> Self {
        ScpEntry {
            u_tx,
            u_rx,
            tau,
            p,
            exists: true,
        }
    }
}

/// Multi-path conditional power profile: an (unordered) set of paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mcpp<R> {
    pub paths: Vec<ScpEntry<R>>,
}

impl<R: Real> Mcpp<R> {
    pub fn new(paths: Vec<ScpEntry<R>>) -> Self {
        Mcpp { paths }
    }

    pub fn empty() -> Self {
        Mcpp { paths: Vec::new() }
    }

    /// Paths with `exists` set, in stored order.
    pub fn existing(&self) -> impl Iterator<Item = &ScpEntry<R>> {
        self.paths.iter().filter(|p| p.exists)
    }

    pub fn n_existing(&self) -> usize {
        self.existing().count()
    }

    /// Total conditional power over existing paths.
    pub fn total_power(&self) -> R {
        self.existing().fold(R::zero(), |acc, s| acc + s.p)
    }

    /// Copy with existing paths in canonical order (descending power, ties by
    /// delay then lexicographic departure direction). All reductions over a
    /// profile run in this order so results do not depend on storage order.
    pub fn canonicalized(&self) -> Mcpp<R> {
        let mut paths: Vec<ScpEntry<R>> = self.existing().copied().collect();
        paths.sort_by(|a, b| canonical_cmp(a, b));
        Mcpp { paths }
    }
}

/// Canonical path comparison: descending p, then ascending τ, then
/// lexicographic u_tx components.
pub fn canonical_cmp<R: Real>(a: &ScpEntry<R>, b: &ScpEntry<R>) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let ord = |x: R, y: R| x.partial_cmp(&y).unwrap_or(Ordering::Equal);
    ord(b.p, a.p)
        .then(ord(a.tau, b.tau))
        .then(ord(a.u_tx.x, b.u_tx.x))
        .then(ord(a.u_tx.y, b.u_tx.y))
        .then(ord(a.u_tx.z, b.u_tx.z))
}

/// Random channel phases, one per existing path, radians in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector<R> {
    pub phi: Vec<R>,
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("phase vector has {got} entries but the profile has {expected} existing paths")]
    PhaseCountMismatch { expected: usize, got: usize },
}

/// Draw i.i.d. uniform `[0, 2π)` phases for every existing path, in stored
/// path order. Counter-addressed: the draw for path j depends only on
/// `(seed, sample_index, j)`.
pub fn sample_phases_at<R: Real>(mcpp: &Mcpp<R>, seed: u64, sample_index: u64) -> PhaseVector<R> {
    PhaseVector {
        phi: (0..mcpp.n_existing())
            .map(|j| real(phase_at(seed, sample_index, j as u64)))
            .collect(),
    }
}

/// [`sample_phases_at`] for the first sample of the stream.
pub fn sample_phases<R: Real>(mcpp: &Mcpp<R>, seed: u64) -> PhaseVector<R> {
    sample_phases_at(mcpp, seed, 0)
}

/// Per-path complex amplitude seen through a beam, excluding the random
/// phase: √(G·p)·e^{-j2π f_c τ}·(aᵀw).
fn path_amplitude<R: Real>(
    scp: &ScpEntry<R>,
    cfg: &ArrayConfig<R>,
    weight: &[Complex<R>],
) -> Complex<R> {
    let basis = cfg.basis();
    let gain = element_gain_in_basis(&scp.u_tx, &basis, &cfg.erp);
    let amp = (gain * scp.p).sqrt();
    let a = arv(cfg, &scp.u_tx);
    let factor: Complex<R> = a.iter().zip(weight).map(|(x, w)| x * w).sum();
    let delay_phase = -(R::PI() + R::PI()) * cfg.f_c * scp.tau;
    let rotation = Complex::new(delay_phase.cos(), delay_phase.sin());
    factor * rotation * amp
}

/// Instantaneous normalized beam RSRP for one phase realization:
/// |Σ_l √(G_l p_l)·e^{jΦ_l}·e^{-j2π f_c τ_l}·(aᵀ(u_l)·w)|².
///
/// Paths and phases are paired by index, then summed in canonical path order
/// so any joint permutation of the pairing reproduces the same value bit for
/// bit.
pub fn instant_rsrp<R: Real>(
    mcpp: &Mcpp<R>,
    phases: &PhaseVector<R>,
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
) -> Result<R, ChannelError> {
    let existing: Vec<&ScpEntry<R>> = mcpp.existing().collect();
    if existing.len() != phases.phi.len() {
        return Err(ChannelError::PhaseCountMismatch {
            expected: existing.len(),
            got: phases.phi.len(),
        });
    }
    let mut paired: Vec<(&ScpEntry<R>, R)> =
        existing.into_iter().zip(phases.phi.iter().copied()).collect();
    paired.sort_by(|a, b| canonical_cmp(a.0, b.0));

    let weight = dft_weight(beam, cfg);
    let mut sum = Complex::new(R::zero(), R::zero());
    for (scp, phi) in paired {
        let amp = path_amplitude(scp, cfg, &weight);
        sum = sum + amp * Complex::new(phi.cos(), phi.sin());
    }
    Ok(sum.norm_sqr())
}

/// Empirical mean and unbiased standard deviation of the instantaneous RSRP
/// over `n_mc` independent phase realizations.
///
/// Per-path amplitudes are constant across realizations and computed once;
/// each realization then reduces over paths in canonical order, giving the
/// same values as `instant_rsrp` would per realization.
pub fn mc_stats<R: Real>(
    mcpp: &Mcpp<R>,
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
    n_mc: usize,
    seed: u64,
) -> (R, R) {
    assert!(n_mc >= 2, "mc_stats needs n_mc >= 2, got {n_mc}");
    let canonical = mcpp.canonicalized();
    if canonical.paths.is_empty() {
        return (R::zero(), R::zero());
    }
    let weight = dft_weight(beam, cfg);
    let amps: Vec<Complex<R>> = canonical
        .paths
        .iter()
        .map(|scp| path_amplitude(scp, cfg, &weight))
        .collect();

    let mut samples = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        let mut sum = Complex::new(R::zero(), R::zero());
        for (j, amp) in amps.iter().enumerate() {
            let phi: R = real(phase_at(seed, i as u64, j as u64));
            sum = sum + *amp * Complex::new(phi.cos(), phi.sin());
        }
        samples.push(sum.norm_sqr());
    }

    let n = real::<R>(n_mc as f64);
    let mean = samples.iter().fold(R::zero(), |a, &x| a + x) / n;
    let ss = samples
        .iter()
        .fold(R::zero(), |a, &x| a + (x - mean) * (x - mean));
    let std = (ss / (n - R::one())).sqrt();
    (mean, std)
}

/// Convenience: mean/std via `instant_rsrp` on explicitly sampled phase
/// vectors. Slower than [`mc_stats`]; used to cross-check it.
pub fn mc_stats_reference<R: Real>(
    mcpp: &Mcpp<R>,
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
    n_mc: usize,
    seed: u64,
) -> (R, R) {
    assert!(n_mc >= 2);
    let canonical = mcpp.canonicalized();
    if canonical.paths.is_empty() {
        return (R::zero(), R::zero());
    }
    let samples: Vec<R> = (0..n_mc)
        .map(|i| {
            let phases = sample_phases_at(&canonical, seed, i as u64);
            instant_rsrp(&canonical, &phases, cfg, beam).expect("matched phase count")
        })
        .collect();
    let n = real::<R>(n_mc as f64);
    let mean = samples.iter().fold(R::zero(), |a, &x| a + x) / n;
    let ss = samples
        .iter()
        .fold(R::zero(), |a, &x| a + (x - mean) * (x - mean));
    (mean, (ss / (n - R::one())).sqrt())
}

/// Deterministic pseudo-random MCPP for tests and validation sweeps.
pub fn random_mcpp<R: Real>(n_paths: usize, seed: u64) -> Mcpp<R> {
    let mut rng = crate::num::Stream::keyed(seed, 0x4D43);
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let theta = rng.next_range(0.2, std::f64::consts::PI - 0.2);
        let phi = rng.next_range(-std::f64::consts::PI, std::f64::consts::PI);
        let u_tx = crate::geom::unit_direction(real::<R>(theta), real::<R>(phi));
        let theta_r = rng.next_range(0.2, std::f64::consts::PI - 0.2);
        let phi_r = rng.next_range(-std::f64::consts::PI, std::f64::consts::PI);
        let u_rx = crate::geom::unit_direction(real::<R>(theta_r), real::<R>(phi_r));
        let tau = real::<R>(rng.next_range(1e-8, 2e-6));
        let p = real::<R>(rng.next_range(0.05, 1.0));
        paths.push(ScpEntry::new(u_tx, u_rx, tau, p));
    }
    Mcpp::new(paths)
}
