//! Uniform planar array: response vectors, DFT beamforming weights, codebook
//! enumeration and the spatial-frequency map between directions and beams.
//!
//! Element (k_y, k_z) of the N_y × N_z panel lives at index `k_y·N_z + k_z`
//! (y-major Kronecker order); `arv` and `dft_weight` share this layout so
//! their inner product is the physical array factor.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::geom::{panel_basis, wrap_angle, ErpConfig, PanelBasis, PanelOrientation, Vec3};
use crate::num::{real, Real, SPEED_OF_LIGHT};

/// Geometry and element pattern of one antenna panel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArrayConfig<R> {
    /// Elements along the panel's horizontal axis.
    pub n_y: usize,
    /// Elements along the panel's vertical axis.
    pub n_z: usize,
    /// Element spacing along the horizontal axis, meters.
    pub d_y: R,
    /// Element spacing along the vertical axis, meters.
    pub d_z: R,
    /// Carrier frequency, Hz.
    pub f_c: R,
    pub orientation: PanelOrientation<R>,
    pub erp: ErpConfig<R>,
}

impl<R: Real> ArrayConfig<R> {
    /// Total element count N = N_y · N_z.
    pub fn n_tx(&self) -> usize {
        self.n_y * self.n_z
    }

    /// Carrier wavelength, meters.
    pub fn wavelength(&self) -> R {
        real::<R>(SPEED_OF_LIGHT) / self.f_c
    }

    /// Rotated panel basis (n, h, v).
    pub fn basis(&self) -> PanelBasis<R> {
        panel_basis(&self.orientation)
    }

    /// Per-axis phase constants 2π f_c d / c for (y, z).
    pub fn wavenumbers(&self) -> (R, R) {
        let k = (R::PI() + R::PI()) * self.f_c / real(SPEED_OF_LIGHT);
        (k * self.d_y, k * self.d_z)
    }

    /// Half-wavelength-spaced panel with the given element counts.
    pub fn half_wavelength(
        n_y: usize,
        n_z: usize,
        f_c: R,
        orientation: PanelOrientation<R>,
        erp: ErpConfig<R>,
    ) -> Self {
        let d = real::<R>(0.5) * real::<R>(SPEED_OF_LIGHT) / f_c;
        ArrayConfig {
            n_y,
            n_z,
            d_y: d,
            d_z: d,
            f_c,
            orientation,
            erp,
        }
    }
}

/// DFT beam, identified by its spatial-frequency pair in `[-π, π)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec<R> {
    pub xi_y: R,
    pub xi_z: R,
}

impl<R: Real> BeamSpec<R> {
    /// Spatial frequencies are wrapped into `[-π, π)`.
    pub fn new(xi_y: R, xi_z: R) -> Self {
        BeamSpec {
            xi_y: wrap_angle(xi_y),
            xi_z: wrap_angle(xi_z),
        }
    }
}

/// One axis of the array response: entry k = exp(j·(2π f_c/c)·k·spacing·(axis·u)).
pub fn arv_axis<R: Real>(
    n: usize,
    spacing: R,
    axis_basis: &Vec3<R>,
    u: &Vec3<R>,
    f_c: R,
) -> Vec<Complex<R>> {
    let phase_step = (R::PI() + R::PI()) * f_c / real::<R>(SPEED_OF_LIGHT) * spacing * axis_basis.dot(u);
    (0..n)
        .map(|k| {
            let phase = real::<R>(k as f64) * phase_step;
            Complex::new(phase.cos(), phase.sin())
        })
        .collect()
}

/// Full array response vector a = a_y ⊗ a_z for departure direction `u`.
pub fn arv<R: Real>(cfg: &ArrayConfig<R>, u: &Vec3<R>) -> Vec<Complex<R>> {
    let basis = cfg.basis();
    let ay = arv_axis(cfg.n_y, cfg.d_y, &basis.h, u, cfg.f_c);
    let az = arv_axis(cfg.n_z, cfg.d_z, &basis.v, u, cfg.f_c);
    kron(&ay, &az)
}

/// Power-normalized DFT beamforming vector w = (1/√N)·w_y(ξ_y) ⊗ w_z(ξ_z).
pub fn dft_weight<R: Real>(beam: &BeamSpec<R>, cfg: &ArrayConfig<R>) -> Vec<Complex<R>> {
    let wy = axis_weight(cfg.n_y, beam.xi_y);
    let wz = axis_weight(cfg.n_z, beam.xi_z);
    let scale = (real::<R>(cfg.n_tx() as f64)).sqrt().recip();
    kron(&wy, &wz)
        .into_iter()
        .map(|c| c * scale)
        .collect()
}

fn axis_weight<R: Real>(n: usize, xi: R) -> Vec<Complex<R>> {
    (0..n)
        .map(|k| {
            let phase = real::<R>(k as f64) * xi;
            Complex::new(phase.cos(), phase.sin())
        })
        .collect()
}

fn kron<R: Real>(a: &[Complex<R>], b: &[Complex<R>]) -> Vec<Complex<R>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        for &bi in b {
            out.push(ai * bi);
        }
    }
    out
}

/// Spatial frequencies (ζ_y, ζ_z) of a departure direction on this panel:
/// ζ_y = (2π f_c d_y / c)·(h·u) and ζ_z analogously with v.
pub fn spatial_freq<R: Real>(cfg: &ArrayConfig<R>, u: &Vec3<R>) -> (R, R) {
    let basis = cfg.basis();
    let (ky, kz) = cfg.wavenumbers();
    (ky * basis.h.dot(u), kz * basis.v.dot(u))
}

/// Uniform ξ grid over `[-π, π)²`, ξ_y-major, with optional oversampling.
///
/// At oversampling 1 the grid is the critical DFT codebook (orthogonal
/// beams); oversampling > 1 inserts intermediate, non-orthogonal beams.
pub fn dft_codebook<R: Real>(
    cfg: &ArrayConfig<R>,
    oversample_y: usize,
    oversample_z: usize,
) -> Vec<BeamSpec<R>> {
    assert!(oversample_y >= 1 && oversample_z >= 1, "oversampling must be >= 1");
    let my = cfg.n_y * oversample_y;
    let mz = cfg.n_z * oversample_z;
    let tau = R::PI() + R::PI();
    let mut beams = Vec::with_capacity(my * mz);
    for iy in 0..my {
        let xi_y = -R::PI() + tau * real::<R>(iy as f64) / real(my as f64);
        for iz in 0..mz {
            let xi_z = -R::PI() + tau * real::<R>(iz as f64) / real(mz as f64);
            beams.push(BeamSpec::new(xi_y, xi_z));
        }
    }
    beams
}
