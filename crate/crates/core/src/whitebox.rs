//! Closed-form beam RSRP statistics over a multipath profile, and their exact
//! gradients with respect to the per-path parameters.
//!
//! For independent uniform path phases the normalized beam RSRP has
//!   mean     μ  = Σ_l γ_l
//!   variance σ² = (Σ_l γ_l)² − Σ_l γ_l²
//! with per-path average power gain γ_l = G(u_l)·p_l·|Δ_l|², where the array
//! factor power |Δ_l|² = (1/N)·|S_{N_y}(ζ_y+ξ_y)|²·|S_{N_z}(ζ_z+ξ_z)|²
//! factorizes into geometric phase sums over the two panel axes. This module
//! is the fixed differentiable physics head: it has no trainable state, and
//! every output is an analytic function of the profile.

use num_complex::Complex;

use crate::array::{ArrayConfig, BeamSpec};
use crate::channel::{Mcpp, ScpEntry};
use crate::geom::{element_gain_grad, element_gain_in_basis, wrap_angle, PanelBasis, Vec3};
use crate::num::{real, Real};

/// Mean and variance of the normalized beam RSRP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsrpStats<R> {
    pub mean: R,
    pub variance: R,
}

/// Per-path average power gain γ and its array-factor part |Δ|² ∈ [0, N].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGain<R> {
    pub gamma: R,
    pub delta_sq: R,
}

/// Gradient of the RSRP mean with respect to one path's parameters.
///
/// The mean does not depend on delay or arrival direction, so those entries
/// are identically zero; they are kept explicit because callers differentiate
/// through the full 7-D path description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGradient<R> {
    pub d_p: R,
    pub d_u_tx: Vec3<R>,
    pub d_tau: R,
    pub d_u_rx: Vec3<R>,
    /// Gradient with respect to a soft existence gate (equals γ_l).
    pub d_gate: R,
}

impl<R: Real> PathGradient<R> {
    fn zero() -> Self {
        PathGradient {
            d_p: R::zero(),
            d_u_tx: Vec3::zero(),
            d_tau: R::zero(),
            d_u_rx: Vec3::zero(),
            d_gate: R::zero(),
        }
    }
}

/// Switch point between the closed ratio form and the Taylor form of the
/// phase-sum kernels. The ratio form divides by sin(ψ/2).
const SIN_HALF_TOL: f64 = 1e-6;

/// Geometric phase sum S_N(ψ) = Σ_{k=0}^{N-1} e^{jkψ}.
///
/// Evaluated as sin(Nψ/2)/sin(ψ/2)·e^{j(N-1)ψ/2}, switching to a three-term
/// series near ψ ≡ 0 (mod 2π) so that S_N(0) = N exactly.
pub fn phase_sum<R: Real>(psi: R, n: usize) -> Complex<R> {
    let nf = real::<R>(n as f64);
    let w = wrap_angle(psi);
    let half = w / real(2.0);
    if half.sin().abs() < real(SIN_HALF_TOL) {
        // Σ (1 + jkψ - k²ψ²/2): Σk = N(N-1)/2, Σk² = N(N-1)(2N-1)/6.
        let nm1 = nf - R::one();
        let sum_k = nf * nm1 / real(2.0);
        let sum_k2 = nf * nm1 * (real::<R>(2.0) * nf - R::one()) / real(6.0);
        return Complex::new(nf - w * w * sum_k2 / real(2.0), w * sum_k);
    }
    let mag = (nf * half).sin() / half.sin();
    let arg = (nf - R::one()) * half;
    Complex::new(mag * arg.cos(), mag * arg.sin())
}

/// |S_N(ψ)|², the per-axis array-factor power kernel.
pub fn phase_sum_gain<R: Real>(psi: R, n: usize) -> R {
    let nf = real::<R>(n as f64);
    let w = wrap_angle(psi);
    let half = w / real(2.0);
    let s = half.sin();
    if s.abs() < real(SIN_HALF_TOL) {
        // N²·(1 - (N²-1)ψ²/12)
        return nf * nf * (R::one() - (nf * nf - R::one()) * w * w / real(12.0));
    }
    let sn = (nf * half).sin();
    (sn * sn) / (s * s)
}

/// d|S_N(ψ)|²/dψ.
pub fn phase_sum_gain_deriv<R: Real>(psi: R, n: usize) -> R {
    let nf = real::<R>(n as f64);
    let w = wrap_angle(psi);
    let half = w / real(2.0);
    let s = half.sin();
    if s.abs() < real(SIN_HALF_TOL) {
        return -nf * nf * (nf * nf - R::one()) * w / real(6.0);
    }
    let c = half.cos();
    let sn = (nf * half).sin();
    let cn = (nf * half).cos();
    sn * (nf * cn * s - sn * c) / (s * s * s)
}

/// Shared per-path context: local basis and wavenumbers of the panel.
struct PanelCtx<R: Real> {
    basis: PanelBasis<R>,
    kappa_y: R,
    kappa_z: R,
    n_y: usize,
    n_z: usize,
    inv_n: R,
}

impl<R: Real> PanelCtx<R> {
    fn new(cfg: &ArrayConfig<R>) -> Self {
        let (kappa_y, kappa_z) = cfg.wavenumbers();
        PanelCtx {
            basis: cfg.basis(),
            kappa_y,
            kappa_z,
            n_y: cfg.n_y,
            n_z: cfg.n_z,
            inv_n: real::<R>(1.0) / real(cfg.n_tx() as f64),
        }
    }

    fn delta_sq(&self, u: &Vec3<R>, beam: &BeamSpec<R>) -> (R, R, R) {
        let zeta_y = self.kappa_y * self.basis.h.dot(u);
        let zeta_z = self.kappa_z * self.basis.v.dot(u);
        let fy = phase_sum_gain(zeta_y + beam.xi_y, self.n_y);
        let fz = phase_sum_gain(zeta_z + beam.xi_z, self.n_z);
        (self.inv_n * fy * fz, fy, fz)
    }
}

/// Average power gain of one path through one beam:
/// γ = G(u_tx)·p·|Δ|², with |Δ|² = (1/N)|S_{N_y}(ζ_y+ξ_y)|²|S_{N_z}(ζ_z+ξ_z)|².
pub fn path_gain<R: Real>(scp: &ScpEntry<R>, cfg: &ArrayConfig<R>, beam: &BeamSpec<R>) -> PathGain<R> {
    let ctx = PanelCtx::new(cfg);
    let (delta_sq, _, _) = ctx.delta_sq(&scp.u_tx, beam);
    let g = element_gain_in_basis(&scp.u_tx, &ctx.basis, &cfg.erp);
    PathGain {
        gamma: g * scp.p * delta_sq,
        delta_sq,
    }
}

fn gammas<R: Real>(mcpp: &Mcpp<R>, cfg: &ArrayConfig<R>, beam: &BeamSpec<R>) -> Vec<R> {
    let ctx = PanelCtx::new(cfg);
    mcpp.canonicalized()
        .paths
        .iter()
        .map(|scp| {
            let (delta_sq, _, _) = ctx.delta_sq(&scp.u_tx, beam);
            element_gain_in_basis(&scp.u_tx, &ctx.basis, &cfg.erp) * scp.p * delta_sq
        })
        .collect()
}

/// Mean normalized beam RSRP: Σ_l γ_l over existing paths, accumulated in
/// canonical path order.
pub fn rsrp_mean<R: Real>(mcpp: &Mcpp<R>, cfg: &ArrayConfig<R>, beam: &BeamSpec<R>) -> R {
    gammas(mcpp, cfg, beam).iter().fold(R::zero(), |a, &g| a + g)
}

/// Variance of the normalized beam RSRP: (Σγ)² − Σγ², clamped at zero
/// against floating-point cancellation.
pub fn rsrp_variance<R: Real>(mcpp: &Mcpp<R>, cfg: &ArrayConfig<R>, beam: &BeamSpec<R>) -> R {
    let gs = gammas(mcpp, cfg, beam);
    let sum = gs.iter().fold(R::zero(), |a, &g| a + g);
    let sum_sq = gs.iter().fold(R::zero(), |a, &g| a + g * g);
    (sum * sum - sum_sq).max(R::zero())
}

/// Mean and variance in one pass.
pub fn rsrp_stats<R: Real>(mcpp: &Mcpp<R>, cfg: &ArrayConfig<R>, beam: &BeamSpec<R>) -> RsrpStats<R> {
    let gs = gammas(mcpp, cfg, beam);
    let sum = gs.iter().fold(R::zero(), |a, &g| a + g);
    let sum_sq = gs.iter().fold(R::zero(), |a, &g| a + g * g);
    RsrpStats {
        mean: sum,
        variance: (sum * sum - sum_sq).max(R::zero()),
    }
}

/// Soft-gated mean: Σ_l g_l·γ_l with per-path weights g_l ∈ [0, 1] aligned
/// with `mcpp.paths` by index (summed in index order). Used during training,
/// where existence probabilities gate the physics head; hard 0/1 gates
/// reproduce [`rsrp_mean`] up to summation order.
pub fn rsrp_mean_gated<R: Real>(
    mcpp: &Mcpp<R>,
    gates: &[R],
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
) -> R {
    assert_eq!(
        gates.len(),
        mcpp.paths.len(),
        "one gate per path ({} gates, {} paths)",
        gates.len(),
        mcpp.paths.len()
    );
    let ctx = PanelCtx::new(cfg);
    let mut sum = R::zero();
    for (scp, &g) in mcpp.paths.iter().zip(gates) {
        let (delta_sq, _, _) = ctx.delta_sq(&scp.u_tx, beam);
        sum += g * element_gain_in_basis(&scp.u_tx, &ctx.basis, &cfg.erp) * scp.p * delta_sq;
    }
    sum
}

fn path_gradient<R: Real>(
    scp: &ScpEntry<R>,
    gate: R,
    ctx: &PanelCtx<R>,
    erp: &crate::geom::ErpConfig<R>,
    beam: &BeamSpec<R>,
) -> (R, PathGradient<R>) {
    let u = &scp.u_tx;
    let zeta_y = ctx.kappa_y * ctx.basis.h.dot(u);
    let zeta_z = ctx.kappa_z * ctx.basis.v.dot(u);
    let fy = phase_sum_gain(zeta_y + beam.xi_y, ctx.n_y);
    let fz = phase_sum_gain(zeta_z + beam.xi_z, ctx.n_z);
    let dfy = phase_sum_gain_deriv(zeta_y + beam.xi_y, ctx.n_y);
    let dfz = phase_sum_gain_deriv(zeta_z + beam.xi_z, ctx.n_z);
    let delta_sq = ctx.inv_n * fy * fz;
    let g = element_gain_in_basis(u, &ctx.basis, erp);
    let dg = element_gain_grad(u, &ctx.basis, erp);

    let gamma = g * scp.p * delta_sq;
    // ∂Δ²/∂u = (1/N)(F'_y κ_y F_z h + F'_z κ_z F_y v)
    let ddelta_du = ctx
        .basis
        .h
        .scale(ctx.inv_n * dfy * ctx.kappa_y * fz)
        .add(&ctx.basis.v.scale(ctx.inv_n * dfz * ctx.kappa_z * fy));
    let d_u_tx = dg
        .scale(scp.p * delta_sq)
        .add(&ddelta_du.scale(g * scp.p))
        .scale(gate);
    (
        gamma,
        PathGradient {
            d_p: gate * g * delta_sq,
            d_u_tx,
            d_tau: R::zero(),
            d_u_rx: Vec3::zero(),
            d_gate: gamma,
        },
    )
}

/// Exact gradient of [`rsrp_mean`] with respect to every path's parameters,
/// aligned with `mcpp.paths` by index. Non-existing paths get zero gradients.
pub fn rsrp_mean_grad<R: Real>(
    mcpp: &Mcpp<R>,
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
) -> Vec<PathGradient<R>> {
    let ctx = PanelCtx::new(cfg);
    mcpp.paths
        .iter()
        .map(|scp| {
            if scp.exists {
                path_gradient(scp, R::one(), &ctx, &cfg.erp, beam).1
            } else {
                PathGradient::zero()
            }
        })
        .collect()
}

/// Gated mean together with its gradients (including ∂μ/∂gate = γ).
pub fn rsrp_mean_gated_grad<R: Real>(
    mcpp: &Mcpp<R>,
    gates: &[R],
    cfg: &ArrayConfig<R>,
    beam: &BeamSpec<R>,
) -> (R, Vec<PathGradient<R>>) {
    assert_eq!(gates.len(), mcpp.paths.len());
    let ctx = PanelCtx::new(cfg);
    let mut mean = R::zero();
    let mut grads = Vec::with_capacity(mcpp.paths.len());
    for (scp, &gate) in mcpp.paths.iter().zip(gates) {
        let (gamma, grad) = path_gradient(scp, gate, &ctx, &cfg.erp, beam);
        mean += gate * gamma;
        grads.push(grad);
    }
    (mean, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{arv, dft_codebook, dft_weight, spatial_freq};
    use crate::channel::{mc_stats, random_mcpp};
    use crate::geom::{unit_direction, ErpConfig, PanelOrientation};
    use crate::num::Stream;

    fn cfg_8x4_iso() -> ArrayConfig<f64> {
        ArrayConfig::half_wavelength(
            8,
            4,
            3.5e9,
            PanelOrientation::new(0.0, 0.0, 0.0),
            ErpConfig::isotropic(),
        )
    }

    fn cfg_directional() -> ArrayConfig<f64> {
        ArrayConfig::half_wavelength(
            8,
            4,
            3.5e9,
            PanelOrientation::new(0.0, 15f64.to_radians(), 0.4),
            ErpConfig::directional(),
        )
    }

    #[test]
    fn phase_sum_limit_and_known_values() {
        let s = phase_sum(0.0_f64, 8);
        assert_eq!(s.re, 8.0);
        assert_eq!(s.im, 0.0);
        // 1 - 1 + 1 - 1 = 0
        assert!(phase_sum(std::f64::consts::PI, 4).norm() < 1e-12);
        // |1 + j| = √2
        let s = phase_sum(std::f64::consts::FRAC_PI_2, 2);
        assert!((s.norm() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn phase_sum_matches_direct_summation() {
        let mut rng = Stream::new(8);
        for _ in 0..200 {
            let psi = rng.next_range(-10.0, 10.0);
            let n = 1 + rng.next_index(12);
            let direct: num_complex::Complex<f64> = (0..n)
                .map(|k| num_complex::Complex::new((k as f64 * psi).cos(), (k as f64 * psi).sin()))
                .sum();
            let fast = phase_sum(psi, n);
            assert!((fast - direct).norm() < 1e-9, "psi={psi} n={n}");
            assert!((phase_sum_gain(psi, n) - direct.norm_sqr()).abs() < 1e-8);
        }
    }

    #[test]
    fn phase_sum_magnitude_continuity_bound_near_zero() {
        // ||S_N(ψ)| - N| ≤ N·ψ²·N²/8 for |ψ| ≤ 1e-4.
        for n in [1usize, 2, 4, 8, 16] {
            for k in 1..=20 {
                let psi = 1e-4 * k as f64 / 20.0;
                for sign in [-1.0, 1.0] {
                    let mag = phase_sum(sign * psi, n).norm();
                    let bound = n as f64 * psi * psi * (n * n) as f64 / 8.0;
                    assert!(
                        (mag - n as f64).abs() <= bound + 1e-15,
                        "n={n} psi={psi}: |{mag} - {n}| > {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn phase_sum_gain_deriv_matches_finite_differences() {
        let mut rng = Stream::new(4);
        let h = 1e-7;
        for _ in 0..300 {
            let psi = rng.next_range(-9.0, 9.0);
            let n = 1 + rng.next_index(10);
            // Stay off the kernel's nulls where the relative scale vanishes.
            let fd = (phase_sum_gain(psi + h, n) - phase_sum_gain(psi - h, n)) / (2.0 * h);
            let an = phase_sum_gain_deriv(psi, n);
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!((fd - an).abs() / scale < 1e-5, "psi={psi} n={n}: {fd} vs {an}");
        }
        // And straight through the series switchover.
        for psi in [-1e-5, -1e-7, 0.0, 1e-7, 1e-5] {
            let fd = (phase_sum_gain(psi + h, 8) - phase_sum_gain(psi - h, 8)) / (2.0 * h);
            let an = phase_sum_gain_deriv(psi, 8);
            assert!((fd - an).abs() < 1e-2 * 8f64.powi(4), "psi={psi}");
        }
    }

    #[test]
    fn path_gain_matched_beam_reaches_n_tx() {
        let cfg = cfg_8x4_iso();
        let u = unit_direction(1.2, 0.4);
        let (zy, zz) = spatial_freq(&cfg, &u);
        let beam = BeamSpec::new(-zy, -zz);
        let scp = ScpEntry::new(u, u, 1e-7, 1.0);
        let pg = path_gain(&scp, &cfg, &beam);
        assert!((pg.gamma - 32.0).abs() < 1e-9, "gamma {}", pg.gamma);
        assert!((pg.delta_sq - 32.0).abs() < 1e-9);
    }

    #[test]
    fn path_gain_zero_power() {
        let cfg = cfg_8x4_iso();
        let scp = ScpEntry::new(unit_direction(1.0, 1.0), unit_direction(1.0, 1.0), 0.0, 0.0);
        assert_eq!(path_gain(&scp, &cfg, &BeamSpec::new(0.3, 0.3)).gamma, 0.0);
    }

    #[test]
    fn path_gain_matches_brute_force_inner_product() {
        // γ must equal |aᵀw|²·G·p computed from the raw vectors.
        for cfg in [cfg_8x4_iso(), cfg_directional()] {
            let mut rng = Stream::new(31);
            for _ in 0..100 {
                let u = unit_direction(
                    rng.next_range(0.1, std::f64::consts::PI - 0.1),
                    rng.next_range(-std::f64::consts::PI, std::f64::consts::PI),
                );
                let beam = BeamSpec::new(rng.next_range(-3.0, 3.0), rng.next_range(-3.0, 3.0));
                let p = rng.next_range(0.0, 2.0);
                let scp = ScpEntry::new(u, u.scale(-1.0), 1e-7, p);

                let a = arv(&cfg, &u);
                let w = dft_weight(&beam, &cfg);
                let af: num_complex::Complex<f64> = a.iter().zip(&w).map(|(x, y)| x * y).sum();
                let g = crate::geom::element_gain(&u, &cfg.orientation, &cfg.erp);
                let want = af.norm_sqr() * g * p;

                let got = path_gain(&scp, &cfg, &beam).gamma;
                let scale = want.abs().max(1e-12);
                assert!((got - want).abs() / scale < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn rsrp_mean_examples() {
        let cfg = cfg_8x4_iso();
        let beam = BeamSpec::new(0.0, 0.0);
        assert_eq!(rsrp_mean(&Mcpp::empty(), &cfg, &beam), 0.0);

        let u = Vec3::new(1.0, 0.0, 0.0); // ζ = 0, matched by ξ = 0
        let m = Mcpp::new(vec![ScpEntry::new(u, u, 0.0, 1.0)]);
        assert!((rsrp_mean(&m, &cfg, &beam) - 32.0).abs() < 1e-9);
    }

    #[test]
    fn variance_identities() {
        let cfg = cfg_8x4_iso();
        let beam = BeamSpec::new(0.4, -0.2);

        // L = 1 → variance 0.
        let m = random_mcpp::<f64>(1, 5);
        assert_eq!(rsrp_variance(&m, &cfg, &beam), 0.0);

        // Two equal-γ paths → 2γ².
        let u = unit_direction(1.3, 0.2);
        let scp = ScpEntry::new(u, u, 1e-7, 0.7);
        let m = Mcpp::new(vec![scp, scp]);
        let gamma = path_gain(&scp, &cfg, &beam).gamma;
        let var = rsrp_variance(&m, &cfg, &beam);
        assert!((var - 2.0 * gamma * gamma).abs() <= 1e-12 * var.max(1e-30));
    }

    #[test]
    fn variance_bounded_by_mean_squared() {
        let cfg = cfg_directional();
        for seed in 0..200 {
            let m = random_mcpp::<f64>(1 + (seed as usize % 10), seed);
            let beam = BeamSpec::new(
                Stream::keyed(seed, 1).next_range(-3.0, 3.0),
                Stream::keyed(seed, 2).next_range(-3.0, 3.0),
            );
            let stats = rsrp_stats(&m, &cfg, &beam);
            assert!(stats.variance >= 0.0);
            assert!(stats.variance <= stats.mean * stats.mean * (1.0 + 1e-12));
        }
    }

    #[test]
    fn mean_and_variance_are_permutation_bit_invariant() {
        let cfg = cfg_directional();
        let m = random_mcpp::<f64>(7, 12);
        let beam = BeamSpec::new(0.9, -1.4);
        let mean = rsrp_mean(&m, &cfg, &beam);
        let var = rsrp_variance(&m, &cfg, &beam);
        for shift in 1..7 {
            let mut paths = m.paths.clone();
            paths.rotate_left(shift);
            let pm = Mcpp::new(paths);
            assert_eq!(rsrp_mean(&pm, &cfg, &beam).to_bits(), mean.to_bits());
            assert_eq!(rsrp_variance(&pm, &cfg, &beam).to_bits(), var.to_bits());
        }
    }

    #[test]
    fn mean_is_additive_over_disjoint_path_sets() {
        let cfg = cfg_8x4_iso();
        let beam = BeamSpec::new(-0.7, 0.1);
        let a = random_mcpp::<f64>(4, 100);
        let b = random_mcpp::<f64>(5, 101);
        let mut both = a.paths.clone();
        both.extend(b.paths.iter().copied());
        let lhs = rsrp_mean(&Mcpp::new(both), &cfg, &beam);
        let rhs = rsrp_mean(&a, &cfg, &beam) + rsrp_mean(&b, &cfg, &beam);
        assert!((lhs - rhs).abs() / rhs.abs() < 1e-12);
    }

    #[test]
    fn mc_estimator_agrees_with_closed_form() {
        let cfg = cfg_8x4_iso();
        let n_mc = 20_000;
        let m = random_mcpp::<f64>(5, 2025);
        let beam = BeamSpec::new(0.5, -0.8);
        let stats = rsrp_stats(&m, &cfg, &beam);
        let (mc_mean, mc_std) = mc_stats(&m, &cfg, &beam, n_mc, 7);

        let tol = 4.0 * stats.variance.sqrt() / (n_mc as f64).sqrt() + 1e-12;
        assert!(
            (mc_mean - stats.mean).abs() <= tol,
            "mean {mc_mean} vs {} (tol {tol})",
            stats.mean
        );
        let sd = stats.variance.sqrt();
        assert!(
            (mc_std - sd).abs() / sd <= 0.05,
            "std {mc_std} vs {sd}"
        );
    }

    #[test]
    fn mc_error_shrinks_with_sample_count() {
        let cfg = cfg_directional();
        let beam = BeamSpec::new(0.2, 0.6);
        // Average absolute mean-error over several seeds at growing n_mc.
        let mut errs = Vec::new();
        for &n_mc in &[100usize, 1_000, 10_000] {
            let mut total = 0.0;
            for seed in 0..8u64 {
                let m = random_mcpp::<f64>(6, 300 + seed);
                let mu = rsrp_mean(&m, &cfg, &beam);
                let (mc_mean, _) = mc_stats(&m, &cfg, &beam, n_mc, seed);
                total += ((mc_mean - mu) / mu.max(1e-30)).abs();
            }
            errs.push(total / 8.0);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors {errs:?}");
    }

    #[test]
    fn matched_codeword_is_nearest_on_the_grid() {
        let cfg = cfg_8x4_iso();
        let codebook = dft_codebook(&cfg, 1, 1);
        let circ = |a: f64, b: f64| wrap_angle(a - b).abs();
        // ζ grid chosen off the codebook midpoints to avoid exact ties.
        for iy in 0..12 {
            for iz in 0..8 {
                let zeta_y = -3.0 + 6.0 * iy as f64 / 12.0 + 0.013;
                let zeta_z = -3.0 + 6.0 * iz as f64 / 8.0 + 0.017;
                // Direction with these spatial frequencies: h·u = ζ_y/κ_y, v·u = ζ_z/κ_z.
                let (ky, kz) = cfg.wavenumbers();
                let (uy, uz) = (zeta_y / ky, zeta_z / kz);
                let ux2 = 1.0 - uy * uy - uz * uz;
                if ux2 <= 1e-6 {
                    continue;
                }
                let u = Vec3::new(ux2.sqrt(), uy, uz);
                let m = Mcpp::new(vec![ScpEntry::new(u, u.scale(-1.0), 1e-7, 1.0)]);

                let best_by_mean = codebook
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        rsrp_mean(&m, &cfg, a)
                            .partial_cmp(&rsrp_mean(&m, &cfg, b))
                            .unwrap()
                    })
                    .unwrap()
                    .0;
                let best_by_distance = codebook
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = circ(a.xi_y, -zeta_y) + circ(a.xi_z, -zeta_z);
                        let db = circ(b.xi_y, -zeta_y) + circ(b.xi_z, -zeta_z);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                assert_eq!(best_by_mean, best_by_distance, "ζ=({zeta_y},{zeta_z})");
            }
        }
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let h = 1e-6;
        for (case, cfg) in [(0, cfg_8x4_iso()), (1, cfg_directional())] {
            let mut rng = Stream::new(900 + case);
            for rep in 0..10 {
                let m = random_mcpp::<f64>(3, 40 + case * 100 + rep);
                let beam = BeamSpec::new(rng.next_range(-3.0, 3.0), rng.next_range(-3.0, 3.0));
                let grads = rsrp_mean_grad(&m, &cfg, &beam);
                let base_mu = rsrp_mean(&m, &cfg, &beam);

                for (l, grad) in grads.iter().enumerate() {
                    // ∂μ/∂p
                    let mut up = m.clone();
                    let mut dn = m.clone();
                    up.paths[l].p += h;
                    dn.paths[l].p -= h;
                    let fd = (rsrp_mean(&up, &cfg, &beam) - rsrp_mean(&dn, &cfg, &beam)) / (2.0 * h);
                    let scale = fd.abs().max(grad.d_p.abs()).max(1e-4 * base_mu.max(1e-9));
                    assert!((fd - grad.d_p).abs() / scale < 1e-5, "d_p path {l}");

                    // ∂μ/∂u_tx componentwise
                    for axis in 0..3 {
                        let mut up = m.clone();
                        let mut dn = m.clone();
                        let bump = |v: &mut Vec3<f64>, s: f64| match axis {
                            0 => v.x += s,
                            1 => v.y += s,
                            _ => v.z += s,
                        };
                        bump(&mut up.paths[l].u_tx, h);
                        bump(&mut dn.paths[l].u_tx, -h);
                        let fd =
                            (rsrp_mean(&up, &cfg, &beam) - rsrp_mean(&dn, &cfg, &beam)) / (2.0 * h);
                        let an = match axis {
                            0 => grad.d_u_tx.x,
                            1 => grad.d_u_tx.y,
                            _ => grad.d_u_tx.z,
                        };
                        let scale = fd.abs().max(an.abs()).max(1e-4 * base_mu.max(1e-9));
                        assert!(
                            (fd - an).abs() / scale < 1e-5,
                            "d_u axis {axis} path {l}: {fd} vs {an}"
                        );
                    }

                    // ∂μ/∂τ is identically zero.
                    assert_eq!(grad.d_tau, 0.0);
                    let mut up = m.clone();
                    up.paths[l].tau += 1e-9;
                    assert_eq!(rsrp_mean(&up, &cfg, &beam), base_mu);

                    // ∂μ/∂u_rx is identically zero.
                    assert_eq!(grad.d_u_rx, Vec3::zero());
                }
            }
        }
    }

    #[test]
    fn gated_mean_and_gradients() {
        let cfg = cfg_directional();
        let m = random_mcpp::<f64>(4, 77);
        let beam = BeamSpec::new(1.1, 0.3);
        let gates = [1.0, 0.5, 0.0, 0.25];

        let (mu, grads) = rsrp_mean_gated_grad(&m, &gates, &cfg, &beam);
        assert!((mu - rsrp_mean_gated(&m, &gates, &cfg, &beam)).abs() < 1e-15);

        // ∂μ/∂gate_l = γ_l.
        for (l, grad) in grads.iter().enumerate() {
            let gamma = path_gain(&m.paths[l], &cfg, &beam).gamma;
            assert!((grad.d_gate - gamma).abs() <= 1e-12 * gamma.max(1e-30));
        }

        // All-ones gates reproduce the ungated mean.
        let ones = [1.0; 4];
        let mu1 = rsrp_mean_gated(&m, &ones, &cfg, &beam);
        assert!((mu1 - rsrp_mean(&m, &cfg, &beam)).abs() < 1e-12 * mu1);

        // Matched-beam ∂μ/∂p = N for an isotropic panel.
        let iso = cfg_8x4_iso();
        let u = unit_direction(1.2, -0.4);
        let (zy, zz) = spatial_freq(&iso, &u);
        let m1 = Mcpp::new(vec![ScpEntry::new(u, u, 0.0, 0.5)]);
        let g = rsrp_mean_grad(&m1, &iso, &BeamSpec::new(-zy, -zz));
        assert!((g[0].d_p - 32.0).abs() < 1e-9);
    }
}
