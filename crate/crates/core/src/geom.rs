//! Coordinate geometry: rotations, panel basis vectors, unit directions and
//! the antenna element radiation pattern.
//!
//! Conventions: right-handed global frame, `y = R x` column-vector rotation,
//! composite rotation `R = Rz(ρz)·Ry(ρy)·Rx(ρx)`. The unrotated panel sits in
//! the Y-O-Z plane with boresight `n0 = +x`, horizontal axis `h0 = +y` and
//! vertical axis `v0 = +z`, so sector rotations are plain `ρz` turns and a
//! positive `ρy` is a mechanical down-tilt.

use crate::num::{real, Real};

// ── Vectors and matrices ─────────────────────────────────────────────────────

/// 3-D vector; unit length when used as a direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Vec3<R> {
    pub x: R,
    pub y: R,
    pub z: R,
}

impl<R: Real> Vec3<R> {
    pub fn new(x: R, y: R, z: R) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(R::zero(), R::zero(), R::zero())
    }

    #[inline]
    pub fn dot(&self, o: &Vec3<R>) -> R {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm(&self) -> R {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: R) -> Vec3<R> {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, o: &Vec3<R>) -> Vec3<R> {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &Vec3<R>) -> Vec3<R> {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    /// Unit vector in the same direction. Zero-length input is left unchanged.
    pub fn normalized(&self) -> Vec3<R> {
        let n = self.norm();
        if n > R::zero() {
            self.scale(R::one() / n)
        } else {
            *self
        }
    }

    pub fn to_f64(&self) -> Vec3<f64> {
        Vec3::new(
            crate::num::to_f64(self.x),
            crate::num::to_f64(self.y),
            crate::num::to_f64(self.z),
        )
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<R>(pub [[R; 3]; 3]);

impl<R: Real> Mat3<R> {
    pub fn identity() -> Self {
        let (o, z) = (R::one(), R::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn apply(&self, v: &Vec3<R>) -> Vec3<R> {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul(&self, o: &Mat3<R>) -> Mat3<R> {
        let (a, b) = (&self.0, &o.0);
        let mut out = [[R::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3<R> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> R {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

// ── Panel orientation ────────────────────────────────────────────────────────

/// Counterclockwise panel rotations about the global x, y, z axes, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PanelOrientation<R> {
    pub rho_x: R,
    pub rho_y: R,
    pub rho_z: R,
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle<R: Real>(a: R) -> R {
    let tau = R::PI() + R::PI();
    let mut w = (a + R::PI()) % tau;
    if w < R::zero() {
        w += tau;
    }
    w - R::PI()
}

impl<R: Real> PanelOrientation<R> {
    /// Angles are wrapped into `[-π, π)`.
    pub fn new(rho_x: R, rho_y: R, rho_z: R) -> Self {
        PanelOrientation {
            rho_x: wrap_angle(rho_x),
            rho_y: wrap_angle(rho_y),
            rho_z: wrap_angle(rho_z),
        }
    }
}

/// Orthonormal local frame of a rotated panel.
#[derive(Debug, Clone, Copy)]
pub struct PanelBasis<R> {
    /// Boresight normal (rotated +x).
    pub n: Vec3<R>,
    /// Horizontal array axis (rotated +y).
    pub h: Vec3<R>,
    /// Vertical array axis (rotated +z).
    pub v: Vec3<R>,
}

fn rot_x<R: Real>(a: R) -> Mat3<R> {
    let (s, c, o, z) = (a.sin(), a.cos(), R::one(), R::zero());
    Mat3([[o, z, z], [z, c, -s], [z, s, c]])
}

fn rot_y<R: Real>(a: R) -> Mat3<R> {
    let (s, c, o, z) = (a.sin(), a.cos(), R::one(), R::zero());
    Mat3([[c, z, s], [z, o, z], [-s, z, c]])
}

fn rot_z<R: Real>(a: R) -> Mat3<R> {
    let (s, c, o, z) = (a.sin(), a.cos(), R::one(), R::zero());
    Mat3([[c, -s, z], [s, c, z], [z, z, o]])
}

/// Composite rotation `Rz(ρz)·Ry(ρy)·Rx(ρx)`.
pub fn rotation_matrix<R: Real>(o: &PanelOrientation<R>) -> Mat3<R> {
    rot_z(o.rho_z).mul(&rot_y(o.rho_y)).mul(&rot_x(o.rho_x))
}

/// Rotated panel basis `(n, h, v)` from the default `(+x, +y, +z)` frame.
pub fn panel_basis<R: Real>(o: &PanelOrientation<R>) -> PanelBasis<R> {
    let r = rotation_matrix(o);
    let (one, zero) = (R::one(), R::zero());
    PanelBasis {
        n: r.apply(&Vec3::new(one, zero, zero)),
        h: r.apply(&Vec3::new(zero, one, zero)),
        v: r.apply(&Vec3::new(zero, zero, one)),
    }
}

/// Unit direction from zenith angle `theta ∈ [0, π]` and azimuth
/// `phi ∈ [-π, π)`: `[cosφ sinθ, sinφ sinθ, cosθ]`.
pub fn unit_direction<R: Real>(theta: R, phi: R) -> Vec3<R> {
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (phi.sin(), phi.cos());
    Vec3::new(cp * st, sp * st, ct)
}

// ── Element radiation pattern ────────────────────────────────────────────────

/// Element pattern family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErpKind {
    /// Unit gain in every direction.
    Isotropic,
    /// Single-element directional pattern per 3GPP TR 38.901.
    Directional38901,
}

/// Element radiation pattern parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErpConfig<R> {
    pub kind: ErpKind,
    /// Peak element gain at boresight, dBi.
    pub peak_gain_dbi: R,
    /// Vertical 3 dB beamwidth, radians.
    pub theta_3db: R,
    /// Horizontal 3 dB beamwidth, radians.
    pub phi_3db: R,
    /// Vertical sidelobe attenuation limit, dB.
    pub sla_v: R,
    /// Maximum (front-to-back) attenuation, dB.
    pub a_max: R,
}

impl<R: Real> ErpConfig<R> {
    pub fn isotropic() -> Self {
        ErpConfig {
            kind: ErpKind::Isotropic,
            peak_gain_dbi: R::zero(),
            theta_3db: real(65.0_f64.to_radians()),
            phi_3db: real(65.0_f64.to_radians()),
            sla_v: real(30.0),
            a_max: real(30.0),
        }
    }

    /// TR 38.901 single element: 65° beamwidths, 30 dB limits, 8 dBi peak.
    pub fn directional() -> Self {
        ErpConfig {
            kind: ErpKind::Directional38901,
            peak_gain_dbi: real(8.0),
            ..ErpConfig::isotropic()
        }
    }

    /// Peak linear gain, the upper bound of the pattern.
    pub fn peak_linear(&self) -> R {
        real::<R>(10.0).powf(self.peak_gain_dbi / real(10.0))
    }
}

/// Local-frame angles of a direction: (zenith from local +v, azimuth from
/// local boresight). Defined for near-unit `u` as well so finite-difference
/// probes stay smooth.
fn local_angles<R: Real>(u: &Vec3<R>, basis: &PanelBasis<R>) -> (R, R) {
    let xl = basis.n.dot(u);
    let yl = basis.h.dot(u);
    let zl = basis.v.dot(u).max(-R::one()).min(R::one());
    (zl.acos(), yl.atan2(xl))
}

fn attenuation_db<R: Real>(theta_l: R, phi_l: R, erp: &ErpConfig<R>) -> R {
    let twelve = real::<R>(12.0);
    let half_pi = R::FRAC_PI_2();
    let av = (twelve * ((theta_l - half_pi) / erp.theta_3db).powi(2)).min(erp.sla_v);
    let ah = (twelve * (phi_l / erp.phi_3db).powi(2)).min(erp.a_max);
    (av + ah).min(erp.a_max)
}

/// Linear element power gain for direction `u` in a panel's local frame.
pub fn element_gain_in_basis<R: Real>(u: &Vec3<R>, basis: &PanelBasis<R>, erp: &ErpConfig<R>) -> R {
    match erp.kind {
        ErpKind::Isotropic => R::one(),
        ErpKind::Directional38901 => {
            let (theta_l, phi_l) = local_angles(u, basis);
            let g_db = erp.peak_gain_dbi - attenuation_db(theta_l, phi_l, erp);
            real::<R>(10.0).powf(g_db / real(10.0))
        }
    }
}

/// Linear element power gain for direction `u` (|u| = 1) on a rotated panel.
pub fn element_gain<R: Real>(u: &Vec3<R>, panel: &PanelOrientation<R>, erp: &ErpConfig<R>) -> R {
    element_gain_in_basis(u, &panel_basis(panel), erp)
}

/// Gradient of [`element_gain_in_basis`] with respect to the components of `u`.
///
/// Piecewise-smooth: inside clamped regions of the pattern the gradient is
/// zero; on the clamp boundaries the inner branch is used.
pub fn element_gain_grad<R: Real>(
    u: &Vec3<R>,
    basis: &PanelBasis<R>,
    erp: &ErpConfig<R>,
) -> Vec3<R> {
    match erp.kind {
        ErpKind::Isotropic => Vec3::zero(),
        ErpKind::Directional38901 => {
            let xl = basis.n.dot(u);
            let yl = basis.h.dot(u);
            let zl = basis.v.dot(u).max(-R::one()).min(R::one());
            let theta_l = zl.acos();
            let phi_l = yl.atan2(xl);

            let twelve = real::<R>(12.0);
            let half_pi = R::FRAC_PI_2();
            let av = twelve * ((theta_l - half_pi) / erp.theta_3db).powi(2);
            let ah = twelve * (phi_l / erp.phi_3db).powi(2);
            let av_c = av.min(erp.sla_v);
            let ah_c = ah.min(erp.a_max);
            let total = av_c + ah_c;

            if total >= erp.a_max {
                return Vec3::zero();
            }
            let gain = {
                let g_db = erp.peak_gain_dbi - total;
                real::<R>(10.0).powf(g_db / real(10.0))
            };
            // dG/datt = -ln(10)/10 · G
            let datt = -R::LN_10() / real::<R>(10.0) * gain;

            let mut grad = Vec3::zero();
            if av < erp.sla_v {
                // dav/dθ' · dθ'/du, with dθ'/du = -v/√(1-z'²)
                let dav_dtheta =
                    real::<R>(24.0) * (theta_l - half_pi) / (erp.theta_3db * erp.theta_3db);
                let denom = (R::one() - zl * zl).sqrt();
                if denom > real(1e-12) {
                    grad = grad.add(&basis.v.scale(-dav_dtheta / denom * datt));
                }
            }
            if ah < erp.a_max {
                // dah/dφ' · dφ'/du, with dφ'/du = (x'·h - y'·n)/(x'²+y'²)
                let dah_dphi = real::<R>(24.0) * phi_l / (erp.phi_3db * erp.phi_3db);
                let denom = xl * xl + yl * yl;
                if denom > real(1e-12) {
                    let dphi_du = basis.h.scale(xl / denom).sub(&basis.n.scale(yl / denom));
                    grad = grad.add(&dphi_du.scale(dah_dphi * datt));
                }
            }
            grad
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Stream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn zero_rotation_is_identity() {
        let r = rotation_matrix(&PanelOrientation::<f64>::new(0.0, 0.0, 0.0));
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = rotation_matrix(&PanelOrientation::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let v = r.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert_close(v.x, 0.0, 1e-12);
        assert_close(v.y, 1.0, 1e-12);
        assert_close(v.z, 0.0, 1e-12);
    }

    #[test]
    fn quarter_turn_about_y_maps_x_down() {
        // Ry(π/2)·[1,0,0] = [0,0,-1] under the stated axis-rotation convention.
        let r = rotation_matrix(&PanelOrientation::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        let v = r.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert_close(v.x, 0.0, 1e-12);
        assert_close(v.y, 0.0, 1e-12);
        assert_close(v.z, -1.0, 1e-12);
    }

    #[test]
    fn rotation_matrices_are_orthonormal_with_unit_det() {
        let mut rng = Stream::new(2024);
        for _ in 0..1000 {
            let o = PanelOrientation::new(
                rng.next_range(-std::f64::consts::PI, std::f64::consts::PI),
                rng.next_range(-std::f64::consts::PI, std::f64::consts::PI),
                rng.next_range(-std::f64::consts::PI, std::f64::consts::PI),
            );
            let r = rotation_matrix(&o);
            let rtr = r.transpose().mul(&r);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_close(rtr.0[i][j], want, 1e-12);
                }
            }
            assert_close(r.det(), 1.0, 1e-12);
        }
    }

    #[test]
    fn panel_basis_default_and_sector_rotation() {
        let b = panel_basis(&PanelOrientation::<f64>::new(0.0, 0.0, 0.0));
        assert_eq!(b.n, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(b.h, Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(b.v, Vec3::new(0.0, 0.0, 1.0));

        // 120° sector turn moves h exactly as Rz applied to +y.
        let a = 2.0 * std::f64::consts::PI / 3.0;
        let b = panel_basis(&PanelOrientation::new(0.0, 0.0, a));
        assert_close(b.h.x, -a.sin(), 1e-12);
        assert_close(b.h.y, a.cos(), 1e-12);
        assert_close(b.h.z, 0.0, 1e-12);
    }

    #[test]
    fn down_tilt_fixes_h_and_tilts_v() {
        let tilt = 15.0_f64.to_radians();
        let b = panel_basis(&PanelOrientation::new(0.0, tilt, 0.0));
        // Rotation about y leaves h = +y unchanged; v picks up a +x component.
        assert_close(b.h.x, 0.0, 1e-12);
        assert_close(b.h.y, 1.0, 1e-12);
        assert_close(b.v.x, tilt.sin(), 1e-12);
        assert_close(b.v.z, tilt.cos(), 1e-12);
    }

    #[test]
    fn panel_basis_stays_orthonormal() {
        let mut rng = Stream::new(7);
        for _ in 0..1000 {
            let o = PanelOrientation::new(
                rng.next_range(-3.0, 3.0),
                rng.next_range(-3.0, 3.0),
                rng.next_range(-3.0, 3.0),
            );
            let b = panel_basis(&o);
            for (v, w, want) in [
                (&b.n, &b.n, 1.0),
                (&b.h, &b.h, 1.0),
                (&b.v, &b.v, 1.0),
                (&b.n, &b.h, 0.0),
                (&b.n, &b.v, 0.0),
                (&b.h, &b.v, 0.0),
            ] {
                assert_close(v.dot(w), want, 1e-12);
            }
        }
    }

    #[test]
    fn unit_direction_axes() {
        let z = unit_direction(0.0_f64, 0.3);
        assert_close(z.x, 0.0, 1e-12);
        assert_close(z.z, 1.0, 1e-12);
        let x = unit_direction(std::f64::consts::FRAC_PI_2, 0.0);
        assert_close(x.x, 1.0, 1e-12);
        let y = unit_direction(std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
        assert_close(y.y, 1.0, 1e-12);
    }

    #[test]
    fn unit_direction_has_unit_norm_on_sweep() {
        for it in 0..100 {
            for ip in 0..100 {
                let theta = std::f64::consts::PI * it as f64 / 99.0;
                let phi = -std::f64::consts::PI + std::f64::consts::TAU * ip as f64 / 100.0;
                let u = unit_direction(theta, phi);
                assert_close(u.norm(), 1.0, 1e-15);
            }
        }
    }

    #[test]
    fn isotropic_gain_is_one() {
        let erp = ErpConfig::<f64>::isotropic();
        let panel = PanelOrientation::new(0.2, -0.4, 1.0);
        let u = unit_direction(1.1, 0.3);
        assert_eq!(element_gain(&u, &panel, &erp), 1.0);
    }

    #[test]
    fn directional_boresight_hits_peak_gain() {
        let erp = ErpConfig::<f64>::directional();
        let panel = PanelOrientation::new(0.0, 0.0, 0.0);
        let g = element_gain(&Vec3::new(1.0, 0.0, 0.0), &panel, &erp);
        assert_close(g, 10f64.powf(0.8), 1e-12);

        // Rotated panel: boresight follows the basis.
        let panel = PanelOrientation::new(0.0, 0.3, 2.0);
        let b = panel_basis(&panel);
        let g = element_gain(&b.n, &panel, &erp);
        assert_close(g, 10f64.powf(0.8), 1e-12);
    }

    #[test]
    fn directional_azimuth_cut_attenuations() {
        let erp = ErpConfig::<f64>::directional();
        let panel = PanelOrientation::new(0.0, 0.0, 0.0);
        // 90° off boresight in azimuth: A_H = min(12·(90/65)², 30) = 23.06 dB.
        let g = element_gain(&Vec3::new(0.0, 1.0, 0.0), &panel, &erp);
        let att = 12.0 * (90.0f64 / 65.0).powi(2);
        assert_close(g, 10f64.powf((8.0 - att) / 10.0), 1e-12);
        // Beyond 65°·√(30/12) ≈ 102.8° the 30 dB floor clamps the pattern.
        let az = 120f64.to_radians();
        let g = element_gain(&Vec3::new(az.cos(), az.sin(), 0.0), &panel, &erp);
        assert_close(g, 10f64.powf((8.0 - 30.0) / 10.0), 1e-12);
    }

    #[test]
    fn gain_never_exceeds_peak() {
        let erp = ErpConfig::<f64>::directional();
        let panel = PanelOrientation::new(0.1, 0.25, -0.7);
        let peak = erp.peak_linear();
        let mut rng = Stream::new(3);
        for _ in 0..2000 {
            let u = unit_direction(
                rng.next_range(0.0, std::f64::consts::PI),
                rng.next_range(-std::f64::consts::PI, std::f64::consts::PI),
            );
            let g = element_gain(&u, &panel, &erp);
            assert!(g <= peak + 1e-15, "gain {g} above peak {peak}");
        }
    }

    /// True when the pattern evaluation at `u` sits well inside one branch of
    /// every min() clamp, so central differences see a smooth function.
    fn away_from_clamp_boundaries(u: &Vec3<f64>, basis: &PanelBasis<f64>, erp: &ErpConfig<f64>) -> bool {
        let xl = basis.n.dot(u);
        let yl = basis.h.dot(u);
        let zl = basis.v.dot(u).clamp(-1.0, 1.0);
        let (theta_l, phi_l) = (zl.acos(), yl.atan2(xl));
        let av = 12.0 * ((theta_l - std::f64::consts::FRAC_PI_2) / erp.theta_3db).powi(2);
        let ah = 12.0 * (phi_l / erp.phi_3db).powi(2);
        let margin = 0.05;
        (av - erp.sla_v).abs() > margin
            && (ah - erp.a_max).abs() > margin
            && (av.min(erp.sla_v) + ah.min(erp.a_max) - erp.a_max).abs() > margin
            && zl.abs() < 0.99
    }

    #[test]
    fn element_gain_grad_matches_finite_differences() {
        let erp = ErpConfig::<f64>::directional();
        let basis = panel_basis(&PanelOrientation::new(0.05, 0.3, -0.6));
        let mut rng = Stream::new(17);
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..500 {
            if checked >= 20 {
                break;
            }
            let u = unit_direction(
                rng.next_range(0.4, std::f64::consts::PI - 0.4),
                rng.next_range(-2.0, 2.0),
            );
            if !away_from_clamp_boundaries(&u, &basis, &erp) {
                continue;
            }
            checked += 1;
            let grad = element_gain_grad(&u, &basis, &erp);
            for axis in 0..3 {
                let mut up = u;
                let mut dn = u;
                match axis {
                    0 => {
                        up.x += h;
                        dn.x -= h;
                    }
                    1 => {
                        up.y += h;
                        dn.y -= h;
                    }
                    _ => {
                        up.z += h;
                        dn.z -= h;
                    }
                }
                let fd = (element_gain_in_basis(&up, &basis, &erp)
                    - element_gain_in_basis(&dn, &basis, &erp))
                    / (2.0 * h);
                let g = match axis {
                    0 => grad.x,
                    1 => grad.y,
                    _ => grad.z,
                };
                let scale = fd.abs().max(g.abs()).max(1e-6);
                assert!(
                    (fd - g).abs() / scale <= 1e-5,
                    "axis {axis}: fd {fd} vs grad {g}"
                );
            }
        }
        assert!(checked >= 20, "too few smooth probes: {checked}");
    }
}
