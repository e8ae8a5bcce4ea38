//! Grid-based channel knowledge map: confidence-weighted measurement
//! ingestion with temporal decay, the two inverse-distance prediction
//! baselines (RSRP interpolation, and profile interpolation through the
//! physics head), and CSV persistence.

use std::path::Path;

use thiserror::Error;

use crate::array::{ArrayConfig, BeamSpec};
use crate::channel::{power_to_db, Mcpp, ScpEntry};
use crate::geom::Vec3;
use crate::num::{key2, Stream};
use crate::synthenv::McppField;

/// IDW exponent for both spreading and querying.
const IDW_EXPONENT: i32 = 2;
/// Query/neighbor radius in grid spacings.
const NEIGHBOR_RADIUS_GRIDS: f64 = 3.0;
/// Fraction of the spacing below which a position snaps to an anchor.
const SNAP_FRACTION: f64 = 1e-9;

/// One aggregated statistic cell: weighted dB sum and total weight.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Cell {
    weighted_sum: f64,
    weight_total: f64,
    last_update: f64,
}

/// One user measurement report.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    /// Estimated position, meters.
    pub position: (f64, f64),
    /// Position confidence (one standard deviation), meters.
    pub position_sigma: f64,
    pub beam: BeamSpec<f64>,
    pub rsrp_db: f64,
    /// Report time, seconds.
    pub timestamp: f64,
}

/// Grid-indexed store of per-beam RSRP statistics and optional per-anchor
/// multipath profiles.
#[derive(Debug, Clone)]
pub struct GridCkm {
    pub origin: (f64, f64),
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    pub beams: Vec<BeamSpec<f64>>,
    /// Half-life of sample weights, seconds.
    pub t_half: f64,
    cells: Vec<Cell>,
    mcpps: Vec<Option<Mcpp<f64>>>,
    last_ingest: f64,
}

#[derive(Debug, Error)]
pub enum CkmError {
    #[error("position ({0}, {1}) outside the map")]
    OutOfMap(f64, f64),
    #[error("measurement beam ({0}, {1}) is not in the map's beam list")]
    UnknownBeam(f64, f64),
    #[error("non-monotone ingestion time {now} (last was {last})")]
    NonMonotoneTime { now: f64, last: f64 },
    #[error("no populated anchor within {radius} m of ({x}, {y})")]
    NoCoverage { x: f64, y: f64, radius: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl GridCkm {
    pub fn new(
        origin: (f64, f64),
        spacing: f64,
        nx: usize,
        ny: usize,
        beams: Vec<BeamSpec<f64>>,
        t_half: f64,
    ) -> Self {
        let n_cells = nx * ny * beams.len();
        GridCkm {
            origin,
            spacing,
            nx,
            ny,
            beams,
            t_half,
            cells: vec![Cell::default(); n_cells],
            mcpps: vec![None; nx * ny],
            last_ingest: f64::NEG_INFINITY,
        }
    }

    fn cell_index(&self, ix: usize, iy: usize, beam_idx: usize) -> usize {
        (iy * self.nx + ix) * self.beams.len() + beam_idx
    }

    fn anchor_pos(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + ix as f64 * self.spacing,
            self.origin.1 + iy as f64 * self.spacing,
        )
    }

    fn in_map(&self, x: f64, y: f64) -> bool {
        let (x0, y0) = self.origin;
        let (x1, y1) = (
            x0 + (self.nx - 1) as f64 * self.spacing,
            y0 + (self.ny - 1) as f64 * self.spacing,
        );
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    fn beam_index(&self, beam: &BeamSpec<f64>) -> Option<usize> {
        self.beams
            .iter()
            .position(|b| b.xi_y == beam.xi_y && b.xi_z == beam.xi_z)
    }

    fn decay_factor(&self, dt: f64) -> f64 {
        if dt <= 0.0 {
            1.0
        } else {
            2f64.powf(-dt / self.t_half)
        }
    }

    /// Anchors within `radius` of a position, with distances.
    fn anchors_within(&self, x: f64, y: f64, radius: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let lo_x = (((x - self.origin.0 - radius) / self.spacing).ceil().max(0.0)) as usize;
        let hi_x = (((x - self.origin.0 + radius) / self.spacing).floor()) as usize;
        let lo_y = (((y - self.origin.1 - radius) / self.spacing).ceil().max(0.0)) as usize;
        let hi_y = (((y - self.origin.1 + radius) / self.spacing).floor()) as usize;
        for iy in lo_y..=hi_y.min(self.ny.saturating_sub(1)) {
            for ix in lo_x..=hi_x.min(self.nx.saturating_sub(1)) {
                let (ax, ay) = self.anchor_pos(ix, iy);
                let dist = ((x - ax) * (x - ax) + (y - ay) * (y - ay)).sqrt();
                if dist <= radius {
                    out.push((ix, iy, dist));
                }
            }
        }
        out
    }

    /// Ingest one measurement at time `now`: decay the touched cells, then
    /// spread a unit sample weight over the anchors within
    /// max(3·spacing, 2·position_sigma) with weights ∝ 1/(dist² + ε²).
    /// A report landing exactly on an anchor snaps all weight to it.
    pub fn ingest(&mut self, m: &Measurement, now: f64) -> Result<(), CkmError> {
        if !self.in_map(m.position.0, m.position.1) {
            return Err(CkmError::OutOfMap(m.position.0, m.position.1));
        }
        let beam_idx = self
            .beam_index(&m.beam)
            .ok_or(CkmError::UnknownBeam(m.beam.xi_y, m.beam.xi_z))?;
        if now < self.last_ingest {
            return Err(CkmError::NonMonotoneTime {
                now,
                last: self.last_ingest,
            });
        }
        self.last_ingest = now;

        let radius = (NEIGHBOR_RADIUS_GRIDS * self.spacing).max(2.0 * m.position_sigma);
        let neighbors = self.anchors_within(m.position.0, m.position.1, radius);
        let snap = SNAP_FRACTION * self.spacing;

        let weights: Vec<(usize, usize, f64)> = if let Some(&(ix, iy, _)) =
            neighbors.iter().find(|&&(_, _, d)| d < snap)
        {
            vec![(ix, iy, 1.0)]
        } else {
            let eps_sq = snap * snap;
            let raw: Vec<f64> = neighbors
                .iter()
                .map(|&(_, _, d)| 1.0 / (d.powi(IDW_EXPONENT) + eps_sq))
                .collect();
            let total: f64 = raw.iter().sum();
            neighbors
                .iter()
                .zip(raw)
                .map(|(&(ix, iy, _), w)| (ix, iy, w / total))
                .collect()
        };

        for (ix, iy, w) in weights {
            let idx = self.cell_index(ix, iy, beam_idx);
            let decay = self
                .decay_factor(now - self.cells[idx].last_update)
                .min(1.0);
            let cell = &mut self.cells[idx];
            if cell.weight_total > 0.0 {
                cell.weighted_sum *= decay;
                cell.weight_total *= decay;
            }
            cell.weighted_sum += w * m.rsrp_db;
            cell.weight_total += w;
            cell.last_update = now;
        }
        Ok(())
    }

    /// Effective sample weight of a cell as seen at time `now`.
    pub fn weight_at(&self, ix: usize, iy: usize, beam_idx: usize, now: f64) -> f64 {
        let cell = &self.cells[self.cell_index(ix, iy, beam_idx)];
        if cell.weight_total == 0.0 {
            0.0
        } else {
            cell.weight_total * self.decay_factor(now - cell.last_update)
        }
    }

    /// Stored mean (dB) of a populated cell. Decay scales numerator and
    /// denominator alike, so the mean needs no time argument.
    pub fn mean_db(&self, ix: usize, iy: usize, beam_idx: usize) -> Option<f64> {
        let cell = &self.cells[self.cell_index(ix, iy, beam_idx)];
        (cell.weight_total > 0.0).then(|| cell.weighted_sum / cell.weight_total)
    }

    /// Directly set a cell to an exact value with unit weight.
    pub fn set_exact(&mut self, ix: usize, iy: usize, beam_idx: usize, rsrp_db: f64) {
        let idx = self.cell_index(ix, iy, beam_idx);
        self.cells[idx] = Cell {
            weighted_sum: rsrp_db,
            weight_total: 1.0,
            last_update: 0.0,
        };
    }

    pub fn set_mcpp(&mut self, ix: usize, iy: usize, mcpp: Mcpp<f64>) {
        self.mcpps[iy * self.nx + ix] = Some(mcpp);
    }

    pub fn mcpp(&self, ix: usize, iy: usize) -> Option<&Mcpp<f64>> {
        self.mcpps[iy * self.nx + ix].as_ref()
    }

    pub fn populated_anchor_count(&self) -> usize {
        let nb = self.beams.len();
        (0..self.nx * self.ny)
            .filter(|i| (0..nb).any(|b| self.cells[i * nb + b].weight_total > 0.0))
            .count()
    }

    /// Inverse-distance interpolation of stored mean RSRP at a position.
    pub fn idw_rsrp_query(&self, pos: (f64, f64), beam: &BeamSpec<f64>) -> Result<f64, CkmError> {
        let beam_idx = self
            .beam_index(beam)
            .ok_or(CkmError::UnknownBeam(beam.xi_y, beam.xi_z))?;
        let radius = NEIGHBOR_RADIUS_GRIDS * self.spacing;
        let snap = SNAP_FRACTION * self.spacing;
        let mut num = 0.0;
        let mut den = 0.0;
        for (ix, iy, dist) in self.anchors_within(pos.0, pos.1, radius) {
            let Some(mean) = self.mean_db(ix, iy, beam_idx) else {
                continue;
            };
            if dist < snap {
                return Ok(mean);
            }
            let w = 1.0 / dist.powi(IDW_EXPONENT);
            num += w * mean;
            den += w;
        }
        if den == 0.0 {
            return Err(CkmError::NoCoverage {
                x: pos.0,
                y: pos.1,
                radius,
            });
        }
        Ok(num / den)
    }

    /// Interpolate the stored profiles (power-sorted, index-matched) at a
    /// position and evaluate the physics head for the requested beam.
    pub fn idw_mcpp_query(
        &self,
        pos: (f64, f64),
        array: &ArrayConfig<f64>,
        beam: &BeamSpec<f64>,
    ) -> Result<f64, CkmError> {
        let radius = NEIGHBOR_RADIUS_GRIDS * self.spacing;
        let snap = SNAP_FRACTION * self.spacing;
        let mut contributors: Vec<(&Mcpp<f64>, f64)> = Vec::new();
        for (ix, iy, dist) in self.anchors_within(pos.0, pos.1, radius) {
            let Some(mcpp) = self.mcpp(ix, iy) else {
                continue;
            };
            if dist < snap {
                return Ok(power_to_db(crate::whitebox::rsrp_mean(mcpp, array, beam)));
            }
            contributors.push((mcpp, 1.0 / dist.powi(IDW_EXPONENT)));
        }
        if contributors.is_empty() {
            return Err(CkmError::NoCoverage {
                x: pos.0,
                y: pos.1,
                radius,
            });
        }

        // Paths sorted by descending power per anchor (canonical order), then
        // interpolated index-by-index over the anchors that still have a path
        // at that rank.
        let sorted: Vec<(Mcpp<f64>, f64)> = contributors
            .into_iter()
            .map(|(m, w)| (m.canonicalized(), w))
            .collect();
        let max_len = sorted.iter().map(|(m, _)| m.paths.len()).max().unwrap_or(0);
        let mut paths = Vec::with_capacity(max_len);
        for k in 0..max_len {
            let ranked: Vec<(&ScpEntry<f64>, f64)> = sorted
                .iter()
                .filter_map(|(m, w)| m.paths.get(k).map(|p| (p, *w)))
                .collect();
            let w_total: f64 = ranked.iter().map(|(_, w)| w).sum();
            let mut u_tx = Vec3::zero();
            let mut u_rx = Vec3::zero();
            let mut tau = 0.0;
            let mut p_db = 0.0;
            for (p, w) in &ranked {
                let w = w / w_total;
                u_tx = u_tx.add(&p.u_tx.scale(w));
                u_rx = u_rx.add(&p.u_rx.scale(w));
                tau += w * p.tau;
                p_db += w * power_to_db(p.p);
            }
            paths.push(ScpEntry::new(
                u_tx.normalized(),
                u_rx.normalized(),
                tau,
                crate::channel::db_to_power(p_db),
            ));
        }
        let interpolated = Mcpp::new(paths);
        Ok(power_to_db(crate::whitebox::rsrp_mean(&interpolated, array, beam)))
    }

    // ── Persistence ──────────────────────────────────────────────────────

    /// Write the map: '#'-prefixed header lines carrying the grid spec and
    /// beam list, then one CSV row per populated (anchor, beam) cell.
    pub fn save<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "# grid,{},{},{},{},{},{}",
            self.origin.0, self.origin.1, self.spacing, self.nx, self.ny, self.t_half
        )?;
        for (i, b) in self.beams.iter().enumerate() {
            writeln!(out, "# beam,{i},{},{}", b.xi_y, b.xi_z)?;
        }
        writeln!(out, "ix,iy,beam_idx,mean_db,weight_total,last_update_s")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                for b in 0..self.beams.len() {
                    let cell = &self.cells[self.cell_index(ix, iy, b)];
                    if cell.weight_total > 0.0 {
                        writeln!(
                            out,
                            "{ix},{iy},{b},{},{},{}",
                            cell.weighted_sum / cell.weight_total,
                            cell.weight_total,
                            cell.last_update
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<(), CkmError> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P) -> Result<Self, CkmError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, msg: String| CkmError::Parse { line: line + 1, msg };

        let (line0, grid_line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty file".into()))?;
        let grid: Vec<&str> = grid_line.trim_start_matches('#').trim().split(',').collect();
        if grid.first() != Some(&"grid") || grid.len() != 7 {
            return Err(parse_err(line0, "expected '# grid,...' header".into()));
        }
        let f = |i: usize| -> Result<f64, CkmError> {
            grid[i]
                .parse()
                .map_err(|e| parse_err(line0, format!("grid field {i}: {e}")))
        };
        let (ox, oy, spacing, t_half) = (f(1)?, f(2)?, f(3)?, f(6)?);
        let nx = f(4)? as usize;
        let ny = f(5)? as usize;

        let mut beams = Vec::new();
        let mut header_seen = false;
        let mut ckm_rows: Vec<(usize, usize, usize, f64, f64, f64)> = Vec::new();
        for (line_no, line) in lines {
            if line.starts_with("# beam,") {
                let parts: Vec<&str> = line.trim_start_matches('#').trim().split(',').collect();
                if parts.len() != 4 {
                    return Err(parse_err(line_no, "bad beam line".into()));
                }
                let xi_y: f64 = parts[2]
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("beam xi_y: {e}")))?;
                let xi_z: f64 = parts[3]
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("beam xi_z: {e}")))?;
                beams.push(BeamSpec { xi_y, xi_z });
            } else if !header_seen {
                header_seen = true; // the CSV column header row
            } else if !line.trim().is_empty() {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 6 {
                    return Err(parse_err(line_no, format!("expected 6 columns, got {}", parts.len())));
                }
                let pu = |i: usize| -> Result<usize, CkmError> {
                    parts[i]
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("column {i}: {e}")))
                };
                let pf = |i: usize| -> Result<f64, CkmError> {
                    parts[i]
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("column {i}: {e}")))
                };
                ckm_rows.push((pu(0)?, pu(1)?, pu(2)?, pf(3)?, pf(4)?, pf(5)?));
            }
        }

        let mut ckm = GridCkm::new((ox, oy), spacing, nx, ny, beams, t_half);
        for (ix, iy, b, mean_db, weight, last) in ckm_rows {
            let idx = ckm.cell_index(ix, iy, b);
            ckm.cells[idx] = Cell {
                weighted_sum: mean_db * weight,
                weight_total: weight,
                last_update: last,
            };
            ckm.last_ingest = ckm.last_ingest.max(last);
        }
        Ok(ckm)
    }
}

/// Populate a map from a random subset of a field's anchors with exact
/// closed-form labels (and the anchors' profiles, for the profile baseline).
pub fn ckm_from_field(
    field: &McppField,
    array: &ArrayConfig<f64>,
    beams: &[BeamSpec<f64>],
    subsample_fraction: f64,
    seed: u64,
) -> GridCkm {
    let all: Vec<usize> = (0..field.anchors.len()).collect();
    ckm_from_field_subset(field, array, beams, &all, subsample_fraction, seed)
}

/// [`ckm_from_field`] restricted to the given anchor indices (e.g. a train
/// split), sampling `round(fraction·|eligible|)` of them.
pub fn ckm_from_field_subset(
    field: &McppField,
    array: &ArrayConfig<f64>,
    beams: &[BeamSpec<f64>],
    eligible: &[usize],
    subsample_fraction: f64,
    seed: u64,
) -> GridCkm {
    assert!(
        subsample_fraction > 0.0 && subsample_fraction <= 1.0,
        "fraction in (0, 1]"
    );
    let mut ids = eligible.to_vec();
    Stream::new(key2(seed, 0x434B4D)).shuffle(&mut ids);
    let keep = (subsample_fraction * eligible.len() as f64).round().max(1.0) as usize;
    ids.truncate(keep);

    let mut ckm = GridCkm::new((0.0, 0.0), field.spacing, field.nx, field.ny, beams.to_vec(), 3600.0);
    for &idx in &ids {
        let (ix, iy) = (idx % field.nx, idx / field.nx);
        let mcpp = &field.anchors[idx];
        for (b, beam) in beams.iter().enumerate() {
            ckm.set_exact(
                ix,
                iy,
                b,
                power_to_db(crate::whitebox::rsrp_mean(mcpp, array, beam)),
            );
        }
        ckm.set_mcpp(ix, iy, mcpp.clone());
    }
    ckm
}
