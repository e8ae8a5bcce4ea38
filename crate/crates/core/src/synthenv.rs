//! Desk-scale synthetic site: deterministic multipath generation by the image
//! method (line of sight, ground bounce, first-order wall reflections with
//! ray-box blockage), spatially correlated random perturbation of the
//! profiles, weighted path merging, and dataset construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{ArrayConfig, BeamSpec};
use crate::channel::{canonical_cmp, power_to_db, Mcpp, ScpEntry};
use crate::geom::Vec3;
use crate::num::{key3, unit_f64, Stream, SPEED_OF_LIGHT};

type V3 = Vec3<f64>;

/// Axis-aligned box obstacle standing on the ground.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Obstacle {
    pub min_x: f64,
    pub min_y: f64,
    pub size_x: f64,
    pub size_y: f64,
    pub size_z: f64,
    /// Power loss per reflection off this box's walls, dB.
    pub reflection_loss_db: f64,
}

impl Obstacle {
    fn contains(&self, p: &V3) -> bool {
        p.x > self.min_x
            && p.x < self.min_x + self.size_x
            && p.y > self.min_y
            && p.y < self.min_y + self.size_y
            && p.z > 0.0
            && p.z < self.size_z
    }
}

/// Scene description for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteConfig {
    /// Side length of the square service area, meters.
    pub area_side: f64,
    /// Anchor grid spacing, meters.
    pub grid_spacing: f64,
    /// Base station position (z is the antenna height).
    pub bs_position: V3,
    /// User antenna height, meters.
    pub ue_height: f64,
    pub obstacles: Vec<Obstacle>,
    /// Maximum path count per anchor (profiles are merged down to this).
    pub max_paths: usize,
    /// Carrier frequency, Hz.
    pub f_c: f64,
    /// Power loss of the ground bounce, dB.
    pub ground_loss_db: f64,
    pub seed: u64,
}

impl SiteConfig {
    /// Anchors per axis.
    pub fn grid_n(&self) -> usize {
        (self.area_side / self.grid_spacing).floor() as usize
    }

    pub fn anchor_position(&self, ix: usize, iy: usize) -> V3 {
        V3::new(
            ix as f64 * self.grid_spacing,
            iy as f64 * self.grid_spacing,
            self.ue_height,
        )
    }
}

/// Mixing parameters for the hybrid (deterministic + random) profiles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Weight of the random component, in `[0, 1)`.
    pub beta: f64,
    /// Correlation length of the perturbation fields, meters.
    pub corr_len: f64,
    /// Std of per-path log-power perturbations, dB.
    pub power_sigma_db: f64,
    /// Std of per-path angle perturbations, radians.
    pub angle_sigma: f64,
    pub seed: u64,
}

/// Per-anchor multipath profiles over the site grid. Anchor (ix, iy) lives at
/// index `iy·nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct McppField {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub anchors: Vec<Mcpp<f64>>,
}

impl McppField {
    pub fn anchor(&self, ix: usize, iy: usize) -> &Mcpp<f64> {
        &self.anchors[iy * self.nx + ix]
    }

    pub fn anchor_position(&self, ix: usize, iy: usize, ue_height: f64) -> V3 {
        V3::new(ix as f64 * self.spacing, iy as f64 * self.spacing, ue_height)
    }

    pub fn total_power(&self) -> f64 {
        self.anchors.iter().map(|m| m.total_power()).sum()
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("base station at ({0}, {1}, {2}) is inside an obstacle")]
    BsInsideObstacle(f64, f64, f64),
    #[error("obstacle {index} extends outside the area (side {side} m)")]
    ObstacleOutsideArea { index: usize, side: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

// ── Ray geometry ─────────────────────────────────────────────────────────────

/// Does the open segment a→b pass through the box? Endpoint touches within
/// `eps` of either end are ignored so bounce points on a face do not count as
/// self-blockage.
fn segment_blocked(a: &V3, b: &V3, boxes: &[Obstacle]) -> bool {
    let eps = 1e-9_f64;
    let d = b.sub(a);
    for obs in boxes {
        let (mut t_lo, mut t_hi) = (eps, 1.0 - eps);
        let mut miss = false;
        for axis in 0..3 {
            let (av, dv, lo, hi) = match axis {
                0 => (a.x, d.x, obs.min_x, obs.min_x + obs.size_x),
                1 => (a.y, d.y, obs.min_y, obs.min_y + obs.size_y),
                _ => (a.z, d.z, 0.0, obs.size_z),
            };
            if dv.abs() < 1e-15 {
                if av <= lo || av >= hi {
                    miss = true;
                    break;
                }
            } else {
                let (mut t0, mut t1) = ((lo - av) / dv, (hi - av) / dv);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_lo = t_lo.max(t0);
                t_hi = t_hi.min(t1);
                if t_lo >= t_hi {
                    miss = true;
                    break;
                }
            }
        }
        if !miss {
            return true;
        }
    }
    false
}

/// One vertical reflecting face of a box: plane `coord[axis] = value` with
/// outward normal sign `side`.
struct WallFace {
    axis: usize, // 0 = x-plane, 1 = y-plane
    value: f64,
    side: f64,
    span_lo: f64,
    span_hi: f64,
    height: f64,
    loss_db: f64,
}

fn wall_faces(obstacles: &[Obstacle]) -> Vec<WallFace> {
    let mut faces = Vec::with_capacity(obstacles.len() * 4);
    for o in obstacles {
        faces.push(WallFace {
            axis: 0,
            value: o.min_x,
            side: -1.0,
            span_lo: o.min_y,
            span_hi: o.min_y + o.size_y,
            height: o.size_z,
            loss_db: o.reflection_loss_db,
        });
        faces.push(WallFace {
            axis: 0,
            value: o.min_x + o.size_x,
            side: 1.0,
            span_lo: o.min_y,
            span_hi: o.min_y + o.size_y,
            height: o.size_z,
            loss_db: o.reflection_loss_db,
        });
        faces.push(WallFace {
            axis: 1,
            value: o.min_y,
            side: -1.0,
            span_lo: o.min_x,
            span_hi: o.min_x + o.size_x,
            height: o.size_z,
            loss_db: o.reflection_loss_db,
        });
        faces.push(WallFace {
            axis: 1,
            value: o.min_y + o.size_y,
            side: 1.0,
            span_lo: o.min_x,
            span_hi: o.min_x + o.size_x,
            height: o.size_z,
            loss_db: o.reflection_loss_db,
        });
    }
    faces
}

fn coord(p: &V3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

/// Free-space conditional power at total path length `dist`.
fn free_space_power(dist: f64, wavelength: f64) -> f64 {
    let a = wavelength / (4.0 * std::f64::consts::PI * dist);
    a * a
}

fn path_from_bounce(bs: &V3, ue: &V3, bounce: &V3, loss_db: f64, wavelength: f64) -> ScpEntry<f64> {
    let d1 = bounce.sub(bs).norm();
    let d2 = ue.sub(bounce).norm();
    let total = d1 + d2;
    let p = free_space_power(total, wavelength) * 10f64.powf(-loss_db / 10.0);
    ScpEntry::new(
        bounce.sub(bs).normalized(),
        bounce.sub(ue).normalized(),
        total / SPEED_OF_LIGHT,
        p,
    )
}

/// All candidate paths from the BS to one user position.
fn trace_paths(bs: &V3, ue: &V3, cfg: &SiteConfig, faces: &[WallFace], wavelength: f64) -> Vec<ScpEntry<f64>> {
    let mut paths = Vec::new();

    // Line of sight.
    if !segment_blocked(bs, ue, &cfg.obstacles) {
        let d = ue.sub(bs).norm();
        paths.push(ScpEntry::new(
            ue.sub(bs).normalized(),
            bs.sub(ue).normalized(),
            d / SPEED_OF_LIGHT,
            free_space_power(d, wavelength),
        ));
    }

    // Ground bounce via the image below the ground plane.
    {
        let img = V3::new(bs.x, bs.y, -bs.z);
        let dz = ue.z - img.z;
        if dz.abs() > 1e-12 {
            let t = -img.z / dz;
            if (0.0..1.0).contains(&t) {
                let bounce = img.add(&ue.sub(&img).scale(t));
                if !segment_blocked(bs, &bounce, &cfg.obstacles)
                    && !segment_blocked(&bounce, ue, &cfg.obstacles)
                {
                    paths.push(path_from_bounce(bs, ue, &bounce, cfg.ground_loss_db, wavelength));
                }
            }
        }
    }

    // First-order wall reflections.
    for face in faces {
        let bs_side = (coord(bs, face.axis) - face.value) * face.side;
        let ue_side = (coord(ue, face.axis) - face.value) * face.side;
        if bs_side <= 1e-9 || ue_side <= 1e-9 {
            continue;
        }
        // Mirror the BS across the face plane.
        let mut img = *bs;
        match face.axis {
            0 => img.x = 2.0 * face.value - bs.x,
            _ => img.y = 2.0 * face.value - bs.y,
        }
        let denom = coord(ue, face.axis) - coord(&img, face.axis);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = (face.value - coord(&img, face.axis)) / denom;
        if !(1e-9..1.0 - 1e-9).contains(&t) {
            continue;
        }
        let bounce = img.add(&ue.sub(&img).scale(t));
        let along = if face.axis == 0 { bounce.y } else { bounce.x };
        if along <= face.span_lo || along >= face.span_hi {
            continue;
        }
        if bounce.z <= 0.0 || bounce.z >= face.height {
            continue;
        }
        if segment_blocked(bs, &bounce, &cfg.obstacles) || segment_blocked(&bounce, ue, &cfg.obstacles)
        {
            continue;
        }
        paths.push(path_from_bounce(bs, ue, &bounce, face.loss_db, wavelength));
    }

    paths
}

/// Deterministic site profiles: one merged multipath profile per grid anchor.
pub fn generate_site(cfg: &SiteConfig) -> Result<McppField, SynthError> {
    if cfg.area_side <= 0.0 || cfg.grid_spacing <= 0.0 || cfg.max_paths < 1 || cfg.f_c <= 0.0 {
        return Err(SynthError::InvalidConfig(
            "area_side, grid_spacing, f_c must be positive and max_paths >= 1".into(),
        ));
    }
    for (index, o) in cfg.obstacles.iter().enumerate() {
        let inside = o.min_x >= 0.0
            && o.min_y >= 0.0
            && o.min_x + o.size_x <= cfg.area_side
            && o.min_y + o.size_y <= cfg.area_side
            && o.size_x > 0.0
            && o.size_y > 0.0
            && o.size_z > 0.0;
        if !inside {
            return Err(SynthError::ObstacleOutsideArea {
                index,
                side: cfg.area_side,
            });
        }
        if o.contains(&cfg.bs_position) {
            return Err(SynthError::BsInsideObstacle(
                cfg.bs_position.x,
                cfg.bs_position.y,
                cfg.bs_position.z,
            ));
        }
    }

    let n = cfg.grid_n();
    let faces = wall_faces(&cfg.obstacles);
    let wavelength = SPEED_OF_LIGHT / cfg.f_c;
    let mut anchors = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let ue = cfg.anchor_position(ix, iy);
            let paths = trace_paths(&cfg.bs_position, &ue, cfg, &faces, wavelength);
            let merged = merge_paths(&paths, cfg.max_paths);
            anchors.push(Mcpp::new(merged).canonicalized());
        }
    }
    Ok(McppField {
        nx: n,
        ny: n,
        spacing: cfg.grid_spacing,
        anchors,
    })
}

// ── Weighted path merging ────────────────────────────────────────────────────

fn merge_features(s: &ScpEntry<f64>, tau_scale: f64) -> [f64; 7] {
    [
        s.u_tx.x,
        s.u_tx.y,
        s.u_tx.z,
        s.u_rx.x,
        s.u_rx.y,
        s.u_rx.z,
        s.tau / tau_scale,
    ]
}

fn sq_dist(a: &[f64; 7], b: &[f64; 7]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Merge a path set down to at most `limit` paths with power-weighted K-means
/// over the 7-D condition space (delay rescaled to [0,1] by the set maximum).
/// Each cluster emits one path carrying the exact sum of member powers and the
/// power-weighted mean condition; total power is conserved.
pub fn merge_paths(paths: &[ScpEntry<f64>], limit: usize) -> Vec<ScpEntry<f64>> {
    assert!(limit >= 1);
    let live: Vec<ScpEntry<f64>> = paths.iter().filter(|p| p.exists).copied().collect();
    if live.len() <= limit {
        return live;
    }
    let tau_scale = live.iter().map(|p| p.tau).fold(0.0_f64, f64::max).max(1e-30);
    let feats: Vec<[f64; 7]> = live.iter().map(|p| merge_features(p, tau_scale)).collect();

    // Seed centroids with the strongest paths (canonical order).
    let mut order: Vec<usize> = (0..live.len()).collect();
    order.sort_by(|&a, &b| canonical_cmp(&live[a], &live[b]));
    let mut centroids: Vec<[f64; 7]> = order[..limit].iter().map(|&i| feats[i]).collect();

    let mut assign = vec![usize::MAX; live.len()];
    for _iter in 0..40 {
        // Assignment step; ties go to the lowest cluster index.
        let mut changed = false;
        for (i, f) in feats.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(f, cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }

        // Re-seed any empty cluster with the member farthest (power-weighted)
        // from its centroid, most distant first.
        loop {
            let mut counts = vec![0usize; limit];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let donor = (0..live.len())
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = live[a].p * sq_dist(&feats[a], &centroids[assign[a]]);
                    let db = live[b].p * sq_dist(&feats[b], &centroids[assign[b]]);
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("some cluster has more than one member");
            assign[donor] = empty;
            centroids[empty] = feats[donor];
            changed = true;
        }

        // Update step: power-weighted centroid means.
        let mut sums = vec![[0.0; 7]; limit];
        let mut weights = vec![0.0; limit];
        for (i, f) in feats.iter().enumerate() {
            let w = live[i].p.max(1e-300);
            weights[assign[i]] += w;
            for k in 0..7 {
                sums[assign[i]][k] += w * f[k];
            }
        }
        for c in 0..limit {
            if weights[c] > 0.0 {
                for k in 0..7 {
                    centroids[c][k] = sums[c][k] / weights[c];
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Emit one path per cluster.
    let mut out = Vec::with_capacity(limit);
    for c in 0..limit {
        let members: Vec<usize> = (0..live.len()).filter(|&i| assign[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let p_total: f64 = members.iter().map(|&i| live[i].p).sum();
        let w_total: f64 = members.iter().map(|&i| live[i].p.max(1e-300)).sum();
        let mut u_tx = V3::zero();
        let mut u_rx = V3::zero();
        let mut tau = 0.0;
        for &i in &members {
            let w = live[i].p.max(1e-300) / w_total;
            u_tx = u_tx.add(&live[i].u_tx.scale(w));
            u_rx = u_rx.add(&live[i].u_rx.scale(w));
            tau += w * live[i].tau;
        }
        out.push(ScpEntry::new(u_tx.normalized(), u_rx.normalized(), tau, p_total));
    }
    out.sort_by(canonical_cmp);
    out
}

// ── Hybrid perturbation ──────────────────────────────────────────────────────

/// Stationary Gaussian random field over the plane as a sum of random
/// cosines: smooth, spatially consistent, and addressable by key.
struct CosineField {
    waves: Vec<(f64, f64, f64)>, // (kx, ky, phase)
    amplitude: f64,
}

const FIELD_COMPONENTS: usize = 48;

impl CosineField {
    fn new(seed: u64, path_index: u64, component: u64, sigma: f64, corr_len: f64) -> Self {
        let mut rng = Stream::new(key3(seed, path_index, component));
        let waves = (0..FIELD_COMPONENTS)
            .map(|_| {
                let kx = rng.next_normal() / corr_len;
                let ky = rng.next_normal() / corr_len;
                let phase = rng.next_range(0.0, std::f64::consts::TAU);
                (kx, ky, phase)
            })
            .collect();
        CosineField {
            waves,
            amplitude: sigma * (2.0 / FIELD_COMPONENTS as f64).sqrt(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amplitude
            * self
                .waves
                .iter()
                .map(|&(kx, ky, ph)| (kx * x + ky * y + ph).cos())
                .sum::<f64>()
    }
}

/// Tangent frame of a unit vector, for small-angle direction perturbations.
fn tangent_frame(u: &V3) -> (V3, V3) {
    let up = if u.z.abs() < 0.9 {
        V3::new(0.0, 0.0, 1.0)
    } else {
        V3::new(1.0, 0.0, 0.0)
    };
    // t1 = up × u, orthogonal to u.
    let t1 = V3::new(
        up.y * u.z - up.z * u.y,
        up.z * u.x - up.x * u.z,
        up.x * u.y - up.y * u.x,
    )
    .normalized();
    let t2 = V3::new(
        u.y * t1.z - u.z * t1.y,
        u.z * t1.x - u.x * t1.z,
        u.x * t1.y - u.y * t1.x,
    );
    (t1, t2)
}

fn perturb_direction(u: &V3, a: f64, b: f64) -> V3 {
    let (t1, t2) = tangent_frame(u);
    u.add(&t1.scale(a)).add(&t2.scale(b)).normalized()
}

/// Hybrid profiles: deterministic powers scaled by (1−β) unioned with a
/// spatially consistent random copy scaled by β, then re-merged to the path
/// limit. The random copy's powers are renormalized so the map-total power is
/// preserved. β = 0 returns the input unchanged.
pub fn perturb_hybrid(field: &McppField, site: &SiteConfig, h: &HybridConfig) -> McppField {
    assert!((0.0..1.0).contains(&h.beta), "beta in [0,1)");
    if h.beta == 0.0 {
        return field.clone();
    }

    let max_paths: usize = field.anchors.iter().map(|m| m.paths.len()).max().unwrap_or(0);
    let mk = |j: usize, comp: u64, sigma: f64| CosineField::new(h.seed, j as u64, comp, sigma, h.corr_len);
    let fields: Vec<[CosineField; 5]> = (0..max_paths)
        .map(|j| {
            [
                mk(j, 0, h.power_sigma_db),
                mk(j, 1, h.angle_sigma),
                mk(j, 2, h.angle_sigma),
                mk(j, 3, h.angle_sigma),
                mk(j, 4, h.angle_sigma),
            ]
        })
        .collect();

    // First pass: build the raw random copies and measure their total power.
    let mut randomized: Vec<Vec<ScpEntry<f64>>> = Vec::with_capacity(field.anchors.len());
    let mut total_det = 0.0;
    let mut total_rand = 0.0;
    for (idx, mcpp) in field.anchors.iter().enumerate() {
        let (ix, iy) = (idx % field.nx, idx / field.nx);
        let pos = field.anchor_position(ix, iy, site.ue_height);
        let mut rand_paths = Vec::with_capacity(mcpp.paths.len());
        for (j, path) in mcpp.paths.iter().enumerate() {
            let f = &fields[j];
            let p = path.p * 10f64.powf(f[0].at(pos.x, pos.y) / 10.0);
            let u_tx = perturb_direction(&path.u_tx, f[1].at(pos.x, pos.y), f[2].at(pos.x, pos.y));
            let u_rx = perturb_direction(&path.u_rx, f[3].at(pos.x, pos.y), f[4].at(pos.x, pos.y));
            total_rand += p;
            rand_paths.push(ScpEntry::new(u_tx, u_rx, path.tau, p));
        }
        total_det += mcpp.total_power();
        randomized.push(rand_paths);
    }
    let renorm = if total_rand > 0.0 { total_det / total_rand } else { 0.0 };

    let anchors = field
        .anchors
        .iter()
        .zip(randomized)
        .map(|(mcpp, rand_paths)| {
            let mut union: Vec<ScpEntry<f64>> = Vec::with_capacity(2 * mcpp.paths.len());
            for p in &mcpp.paths {
                union.push(ScpEntry {
                    p: p.p * (1.0 - h.beta),
                    ..*p
                });
            }
            for p in rand_paths {
                union.push(ScpEntry {
                    p: p.p * h.beta * renorm,
                    ..p
                });
            }
            Mcpp::new(merge_paths(&union, site.max_paths)).canonicalized()
        })
        .collect();

    McppField {
        nx: field.nx,
        ny: field.ny,
        spacing: field.spacing,
        anchors,
    }
}

// ── Dataset construction ─────────────────────────────────────────────────────

/// Normalization constants shared by models and baselines.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabelStats {
    /// Mean / std of the RSRP labels over the training split, dB.
    pub rsrp_mean_db: f64,
    pub rsrp_std_db: f64,
    /// Mean / std of per-path label powers over the training split, dB.
    pub p_db_mean: f64,
    pub p_db_std: f64,
}

/// One anchor's samples: position, per-beam RSRP labels, profile label.
#[derive(Debug, Clone)]
pub struct AnchorSample {
    pub ix: usize,
    pub iy: usize,
    /// Map position, meters.
    pub pos_m: (f64, f64),
    /// Position normalized to [-1, 1]².
    pub pos_norm: (f64, f64),
    pub mcpp: Mcpp<f64>,
    /// Labels in beam order, dB.
    pub rsrp_db: Vec<f64>,
}

/// Supervised dataset over (anchor, beam) pairs with an anchor-level split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub array: ArrayConfig<f64>,
    pub beams: Vec<BeamSpec<f64>>,
    pub anchors: Vec<AnchorSample>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub stats: LabelStats,
    /// Map side used to normalize positions, meters.
    pub area_side: f64,
}

impl Dataset {
    pub fn n_train_samples(&self) -> usize {
        self.train_ids.len() * self.beams.len()
    }

    pub fn n_val_samples(&self) -> usize {
        self.val_ids.len() * self.beams.len()
    }

    pub fn normalize_pos(&self, x_m: f64, y_m: f64) -> (f64, f64) {
        normalize_pos(x_m, y_m, self.area_side)
    }
}

pub fn normalize_pos(x_m: f64, y_m: f64, area_side: f64) -> (f64, f64) {
    (2.0 * x_m / area_side - 1.0, 2.0 * y_m / area_side - 1.0)
}

/// Labels every (anchor, beam) pair with the closed-form mean RSRP in dB and
/// splits the anchors (not the samples) into train/val with a seeded shuffle.
/// Optional Gaussian label noise (dB) supports robustness experiments.
pub fn build_dataset(
    field: &McppField,
    site: &SiteConfig,
    array: &ArrayConfig<f64>,
    beams: &[BeamSpec<f64>],
    split_ratio: f64,
    seed: u64,
    label_noise_db: f64,
) -> Dataset {
    assert!((0.0..1.0).contains(&split_ratio) && split_ratio > 0.0, "split in (0,1)");
    let n_anchors = field.anchors.len();
    let mut anchors = Vec::with_capacity(n_anchors);
    let mut noise = Stream::keyed(seed, 0x4C4246);
    for idx in 0..n_anchors {
        let (ix, iy) = (idx % field.nx, idx / field.nx);
        let pos = field.anchor_position(ix, iy, site.ue_height);
        let mcpp = field.anchors[idx].clone();
        let rsrp_db = beams
            .iter()
            .map(|beam| {
                let label = power_to_db(crate::whitebox::rsrp_mean(&mcpp, array, beam));
                if label_noise_db > 0.0 {
                    label + label_noise_db * noise.next_normal()
                } else {
                    label
                }
            })
            .collect();
        anchors.push(AnchorSample {
            ix,
            iy,
            pos_m: (pos.x, pos.y),
            pos_norm: normalize_pos(pos.x, pos.y, site.area_side),
            mcpp,
            rsrp_db,
        });
    }

    let mut ids: Vec<usize> = (0..n_anchors).collect();
    Stream::keyed(seed, 0x53504C).shuffle(&mut ids);
    let n_train = (split_ratio * n_anchors as f64).round() as usize;
    let train_ids: Vec<usize> = ids[..n_train].to_vec();
    let val_ids: Vec<usize> = ids[n_train..].to_vec();

    let stats = label_stats(&anchors, &train_ids);
    Dataset {
        array: *array,
        beams: beams.to_vec(),
        anchors,
        train_ids,
        val_ids,
        stats,
        area_side: site.area_side,
    }
}

fn label_stats(anchors: &[AnchorSample], train_ids: &[usize]) -> LabelStats {
    let mut labels = Vec::new();
    let mut p_dbs = Vec::new();
    for &id in train_ids {
        labels.extend_from_slice(&anchors[id].rsrp_db);
        for path in anchors[id].mcpp.existing() {
            p_dbs.push(power_to_db(path.p));
        }
    }
    let mean_std = |xs: &[f64], fallback: (f64, f64)| {
        if xs.is_empty() {
            return fallback;
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt().max(1e-6))
    };
    let (rsrp_mean_db, rsrp_std_db) = mean_std(&labels, (-80.0, 10.0));
    let (p_db_mean, p_db_std) = mean_std(&p_dbs, (-90.0, 10.0));
    LabelStats {
        rsrp_mean_db,
        rsrp_std_db,
        p_db_mean,
        p_db_std,
    }
}

// ── File formats ─────────────────────────────────────────────────────────────

/// Write a profile field: one CSV row per (anchor, path), anchor-major, paths
/// in canonical order.
pub fn write_field<W: std::io::Write>(field: &McppField, out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "anchor_ix,anchor_iy,u_tx_x,u_tx_y,u_tx_z,u_rx_x,u_rx_y,u_rx_z,tau_s,p_linear"
    )?;
    for (idx, mcpp) in field.anchors.iter().enumerate() {
        let (ix, iy) = (idx % field.nx, idx / field.nx);
        for p in mcpp.canonicalized().paths {
            writeln!(
                out,
                "{ix},{iy},{},{},{},{},{},{},{},{}",
                p.u_tx.x, p.u_tx.y, p.u_tx.z, p.u_rx.x, p.u_rx.y, p.u_rx.z, p.tau, p.p
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum FieldIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Read a field written by [`write_field`]. The grid shape is external to the
/// format and must be supplied.
pub fn read_field(path: &std::path::Path, nx: usize, ny: usize, spacing: f64) -> Result<McppField, FieldIoError> {
    let text = std::fs::read_to_string(path)?;
    let mut anchors = vec![Mcpp::empty(); nx * ny];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(FieldIoError::Parse {
                line: line_no + 1,
                msg: format!("expected 10 columns, got {}", fields.len()),
            });
        }
        let parse = |i: usize| -> Result<f64, FieldIoError> {
            fields[i].parse().map_err(|e| FieldIoError::Parse {
                line: line_no + 1,
                msg: format!("column {i}: {e}"),
            })
        };
        let ix: usize = fields[0].parse().map_err(|e| FieldIoError::Parse {
            line: line_no + 1,
            msg: format!("anchor_ix: {e}"),
        })?;
        let iy: usize = fields[1].parse().map_err(|e| FieldIoError::Parse {
            line: line_no + 1,
            msg: format!("anchor_iy: {e}"),
        })?;
        if ix >= nx || iy >= ny {
            return Err(FieldIoError::Parse {
                line: line_no + 1,
                msg: format!("anchor ({ix},{iy}) outside {nx}x{ny} grid"),
            });
        }
        anchors[iy * nx + ix].paths.push(ScpEntry::new(
            Vec3::new(parse(2)?, parse(3)?, parse(4)?),
            Vec3::new(parse(5)?, parse(6)?, parse(7)?),
            parse(8)?,
            parse(9)?,
        ));
    }
    Ok(McppField {
        nx,
        ny,
        spacing,
        anchors,
    })
}

/// Write one split of a dataset: rows `x_m,y_m,xi_y,xi_z,rsrp_db`,
/// anchor-major with beams in codebook order.
pub fn write_dataset_split<W: std::io::Write>(
    ds: &Dataset,
    ids: &[usize],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "x_m,y_m,xi_y,xi_z,rsrp_db")?;
    for &id in ids {
        let a = &ds.anchors[id];
        for (k, beam) in ds.beams.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                a.pos_m.0, a.pos_m.1, beam.xi_y, beam.xi_z, a.rsrp_db[k]
            )?;
        }
    }
    Ok(())
}

/// Deterministic pseudo-random hash stream exposed for sibling modules that
/// key per-anchor draws.
pub fn anchor_key(seed: u64, idx: usize) -> f64 {
    unit_f64(key3(seed, 0x414E43, idx as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{ErpConfig, PanelOrientation};

    fn small_site(obstacles: Vec<Obstacle>) -> SiteConfig {
        SiteConfig {
            area_side: 64.0,
            grid_spacing: 8.0,
            bs_position: V3::new(2.0, 32.0, 20.0),
            ue_height: 1.5,
            obstacles,
            max_paths: 10,
            f_c: 3.5e9,
            ground_loss_db: 6.0,
            seed: 1,
        }
    }

    fn sample_wall() -> Obstacle {
        Obstacle {
            min_x: 30.0,
            min_y: 20.0,
            size_x: 2.0,
            size_y: 24.0,
            size_z: 12.0,
            reflection_loss_db: 4.0,
        }
    }

    #[test]
    fn open_scene_has_los_with_free_space_power() {
        let cfg = small_site(vec![]);
        let field = generate_site(&cfg).unwrap();
        assert_eq!(field.anchors.len(), 64);
        let wavelength = SPEED_OF_LIGHT / cfg.f_c;
        for (idx, m) in field.anchors.iter().enumerate() {
            let (ix, iy) = (idx % field.nx, idx / field.nx);
            let ue = cfg.anchor_position(ix, iy);
            // LoS plus ground bounce; LoS is the stronger (canonical first).
            assert_eq!(m.paths.len(), 2, "anchor {idx}");
            let d = ue.sub(&cfg.bs_position).norm();
            let want = free_space_power(d, wavelength);
            assert!((m.paths[0].p - want).abs() / want < 1e-12);
            assert!((m.paths[0].tau * SPEED_OF_LIGHT - d).abs() / d < 1e-9);
            // Free-space power decreases with distance.
            assert!(m.paths[0].p <= free_space_power(2.0, wavelength));
        }
    }

    #[test]
    fn wall_blocks_los_and_reflects() {
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        // Anchor straight behind the wall: (48, 32) with BS at (2, 32).
        let shadowed = field.anchor(6, 4);
        let d_los = cfg.anchor_position(6, 4).sub(&cfg.bs_position).norm();
        let wavelength = SPEED_OF_LIGHT / cfg.f_c;
        let p_los = free_space_power(d_los, wavelength);
        for p in &shadowed.paths {
            assert!(
                (p.p - p_los).abs() / p_los > 1e-6,
                "blocked anchor still carries a free-space-strength path"
            );
        }
        // An anchor on the BS side of the wall keeps LoS.
        let lit = field.anchor(1, 4);
        assert!(!lit.paths.is_empty());
        let d = cfg.anchor_position(1, 4).sub(&cfg.bs_position).norm();
        assert!((lit.paths[0].p - free_space_power(d, wavelength)).abs() / lit.paths[0].p < 1e-9);
    }

    #[test]
    fn reflected_delay_matches_image_distance() {
        // Single wall face at x = 30 (outward -x), BS and UE both at x < 30.
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        let (ix, iy) = (2, 3); // (16, 24): same side as the BS
        let ue = cfg.anchor_position(ix, iy);
        let img = V3::new(2.0 * 30.0 - cfg.bs_position.x, cfg.bs_position.y, cfg.bs_position.z);
        let want_tau = img.sub(&ue).norm() / SPEED_OF_LIGHT;
        let found = field
            .anchor(ix, iy)
            .paths
            .iter()
            .any(|p| (p.tau - want_tau).abs() / want_tau < 1e-9);
        assert!(found, "no wall echo with the image-source delay");
    }

    #[test]
    fn bs_inside_obstacle_is_rejected() {
        let mut cfg = small_site(vec![Obstacle {
            min_x: 0.0,
            min_y: 28.0,
            size_x: 8.0,
            size_y: 8.0,
            size_z: 25.0,
            reflection_loss_db: 3.0,
        }]);
        cfg.bs_position = V3::new(2.0, 32.0, 20.0);
        assert!(matches!(
            generate_site(&cfg),
            Err(SynthError::BsInsideObstacle(..))
        ));
    }

    #[test]
    fn obstacle_outside_area_is_rejected() {
        let cfg = small_site(vec![Obstacle {
            min_x: 60.0,
            min_y: 0.0,
            size_x: 10.0,
            size_y: 4.0,
            size_z: 5.0,
            reflection_loss_db: 3.0,
        }]);
        assert!(matches!(
            generate_site(&cfg),
            Err(SynthError::ObstacleOutsideArea { index: 0, .. })
        ));
    }

    #[test]
    fn merge_keeps_small_sets_and_degenerate_pairs() {
        let u = V3::new(0.6, 0.8, 0.0);
        let a = ScpEntry::new(u, u.scale(-1.0), 1e-7, 0.5);
        assert_eq!(merge_paths(&[a, a, a], 10).len(), 3);

        let merged = merge_paths(&[a, a], 1);
        assert_eq!(merged.len(), 1);
        assert!((merged[0].p - 1.0).abs() < 1e-15);
        assert!((merged[0].u_tx.sub(&u)).norm() < 1e-12);
        assert!((merged[0].tau - 1e-7).abs() < 1e-22);
    }

    #[test]
    fn merge_conserves_power_and_unit_vectors() {
        for seed in 0..50u64 {
            let mcpp = crate::channel::random_mcpp::<f64>(20, 1000 + seed);
            let merged = merge_paths(&mcpp.paths, 10);
            assert!(merged.len() <= 10);
            let before: f64 = mcpp.paths.iter().map(|p| p.p).sum();
            let after: f64 = merged.iter().map(|p| p.p).sum();
            assert!((before - after).abs() / before < 1e-12, "seed {seed}");
            for p in &merged {
                assert!((p.u_tx.norm() - 1.0).abs() < 1e-12);
                assert!((p.u_rx.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hybrid_beta_zero_is_identity() {
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        let h = HybridConfig {
            beta: 0.0,
            corr_len: 20.0,
            power_sigma_db: 4.0,
            angle_sigma: 0.05,
            seed: 3,
        };
        assert_eq!(perturb_hybrid(&field, &cfg, &h), field);
    }

    #[test]
    fn hybrid_preserves_map_power_and_is_deterministic() {
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        let h = HybridConfig {
            beta: 0.5,
            corr_len: 20.0,
            power_sigma_db: 4.0,
            angle_sigma: 0.05,
            seed: 3,
        };
        let hy = perturb_hybrid(&field, &cfg, &h);
        let (before, after) = (field.total_power(), hy.total_power());
        assert!(
            (after - before).abs() / before < 0.10,
            "map power drifted: {before} -> {after}"
        );
        assert_eq!(hy, perturb_hybrid(&field, &cfg, &h));
        assert_ne!(hy, field);
        for m in &hy.anchors {
            assert!(m.paths.len() <= cfg.max_paths);
        }
    }

    #[test]
    fn hybrid_with_huge_correlation_length_is_map_constant() {
        // Single-path anchors isolate the per-path perturbation field: with
        // corr_len → ∞ every anchor must receive the same power multiplier.
        let cfg = small_site(vec![]);
        let n = cfg.grid_n();
        let u = V3::new(0.8, 0.6, 0.0);
        let anchors: Vec<Mcpp<f64>> = (0..n * n)
            .map(|i| {
                Mcpp::new(vec![ScpEntry::new(
                    u,
                    u.scale(-1.0),
                    1e-7 + i as f64 * 1e-9,
                    1e-9 * (1.0 + i as f64),
                )])
            })
            .collect();
        let field = McppField {
            nx: n,
            ny: n,
            spacing: cfg.grid_spacing,
            anchors,
        };
        let h = HybridConfig {
            beta: 0.4,
            corr_len: 1e6,
            power_sigma_db: 4.0,
            angle_sigma: 0.0,
            seed: 9,
        };
        let hy = perturb_hybrid(&field, &cfg, &h);
        let ratios: Vec<f64> = hy
            .anchors
            .iter()
            .zip(&field.anchors)
            .map(|(a, b)| a.total_power() / b.total_power())
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-4, "ratio spread {} vs {}", r, ratios[0]);
        }
    }

    #[test]
    fn dataset_split_counts_and_determinism() {
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        let array = ArrayConfig::half_wavelength(
            4,
            2,
            3.5e9,
            PanelOrientation::new(0.0, 15f64.to_radians(), 0.0),
            ErpConfig::directional(),
        );
        let beams = crate::array::dft_codebook(&array, 1, 1);
        let ds = build_dataset(&field, &cfg, &array, &beams, 0.8, 42, 0.0);

        assert_eq!(ds.anchors.len(), 64);
        assert_eq!(ds.train_ids.len(), 51); // round(0.8·64)
        assert_eq!(ds.val_ids.len(), 13);
        assert_eq!(ds.n_train_samples(), 51 * 8);

        // Disjoint and covering.
        let mut all: Vec<usize> = ds.train_ids.iter().chain(&ds.val_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());

        let ds2 = build_dataset(&field, &cfg, &array, &beams, 0.8, 42, 0.0);
        assert_eq!(ds.train_ids, ds2.train_ids);
        assert_eq!(ds.anchors[0].rsrp_db, ds2.anchors[0].rsrp_db);

        // Zero-path anchors get the dB floor label.
        let empty_field = McppField {
            nx: 1,
            ny: 1,
            spacing: 1.0,
            anchors: vec![Mcpp::empty()],
        };
        let mut tiny = cfg.clone();
        tiny.area_side = 1.0;
        tiny.grid_spacing = 1.0;
        let ds3 = build_dataset(&empty_field, &tiny, &array, &beams, 0.5, 1, 0.0);
        for &v in &ds3.anchors[0].rsrp_db {
            assert!((v - (-180.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn field_round_trip_through_csv() {
        let cfg = small_site(vec![sample_wall()]);
        let field = generate_site(&cfg).unwrap();
        let mut buf = Vec::new();
        write_field(&field, &mut buf).unwrap();

        let dir = std::env::temp_dir().join("bf_synth_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.csv");
        std::fs::write(&path, &buf).unwrap();
        let back = read_field(&path, field.nx, field.ny, field.spacing).unwrap();
        assert_eq!(field, back);

        // Same generation twice → byte-identical file.
        let mut buf2 = Vec::new();
        write_field(&generate_site(&cfg).unwrap(), &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
