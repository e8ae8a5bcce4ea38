//! Losses, set matching, training procedures and evaluation.
//!
//! Three procedures share one deterministic loop (seeded shuffles, Adam,
//! one-cycle schedule): end-to-end regression of beam RSRP through the fixed
//! physics head, profile-supervised pretraining with a Hungarian set loss,
//! and calibration that adds feature alignment against a frozen reference
//! model. Regression targets live in standardized dB.

use serde::Serialize;

use crate::array::BeamSpec;
use crate::channel::power_to_db;
use crate::nbf::{MlpModel, NbfModel};
use crate::num::{real, to_f64, Real, Stream};
use crate::synthenv::Dataset;
use crate::tensor::{adam_step, onecycle_lr, AdamParams, AdamState, Matrix, Tape, Var};

/// Knobs shared by all procedures.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the regression term in the pretraining loss.
    pub lambda_reg: f64,
    /// Weight of the feature-alignment term in the calibration loss.
    pub lambda_feat: f64,
    /// Anchors per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub seed: u64,
    /// Smooth-L1 transition point, in standardized units.
    pub smooth_l1_beta: f64,
    /// Weight of the existence term inside the assignment cost.
    pub w_exist: f64,
    pub pct_start: f64,
    pub lr_div: f64,
    pub lr_final_div: f64,
    pub adam: AdamParams,
    /// Fraction of the train split actually used (sample-count sweeps).
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_reg: 5.0,
            lambda_feat: 0.1,
            batch_size: 64,
            epochs: 20,
            lr_max: 3e-3,
            seed: 0,
            smooth_l1_beta: 1.0,
            w_exist: 1.0,
            pct_start: 0.3,
            lr_div: 25.0,
            lr_final_div: 1e4,
            adam: AdamParams::default(),
            train_fraction: 1.0,
        }
    }
}

// ── Plain loss functions ─────────────────────────────────────────────────────

/// Mean Smooth-L1: ½e²/β for |e| < β, else |e| − ½β, averaged over elements.
pub fn smooth_l1<R: Real>(pred: &[R], target: &[R], beta: R) -> R {
    assert_eq!(pred.len(), target.len());
    assert!(beta > R::zero());
    let half = real::<R>(0.5);
    let total = pred
        .iter()
        .zip(target)
        .fold(R::zero(), |acc, (&x, &t)| {
            let e = x - t;
            acc + if e.abs() < beta {
                half * e * e / beta
            } else {
                e.abs() - half * beta
            }
        });
    total / real(pred.len() as f64)
}

/// Mean binary cross-entropy over logits, log-sum-exp stabilized.
pub fn bce_existence<R: Real>(logits: &[R], targets: &[R]) -> R {
    assert_eq!(logits.len(), targets.len());
    let total = logits.iter().zip(targets).fold(R::zero(), |acc, (&z, &t)| {
        acc + z.max(R::zero()) - z * t + (R::one() + (-z.abs()).exp()).ln()
    });
    total / real(logits.len() as f64)
}

// ── Hungarian assignment ─────────────────────────────────────────────────────

/// Minimum-cost one-to-one assignment of size min(rows, cols).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` = label column matched to predicted row i.
    pub assignment: Vec<Option<usize>>,
    /// Predicted rows left unmatched (only when rows > cols).
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

/// Hungarian algorithm (shortest augmenting paths with potentials, O(n²m)).
/// Rectangular inputs are handled by solving on the transposed matrix when
/// rows exceed columns.
pub fn hungarian(cost: &[Vec<f64>]) -> MatchResult {
    let n = cost.len();
    let m = if n == 0 { 0 } else { cost[0].len() };
    if n == 0 || m == 0 {
        return MatchResult {
            assignment: vec![None; n],
            unmatched: (0..n).collect(),
            total_cost: 0.0,
        };
    }
    for (i, row) in cost.iter().enumerate() {
        assert_eq!(row.len(), m, "ragged cost matrix at row {i}");
        assert!(row.iter().all(|c| c.is_finite()), "non-finite cost in row {i}");
    }

    if n <= m {
        let row_to_col = solve_rows_le_cols(cost, n, m);
        let total_cost = row_to_col
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i][j])
            .sum();
        MatchResult {
            assignment: row_to_col.iter().map(|&j| Some(j)).collect(),
            unmatched: Vec::new(),
            total_cost,
        }
    } else {
        // Transpose: columns become the scarce side.
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let col_to_row = solve_rows_le_cols(&t, m, n);
        let mut assignment = vec![None; n];
        let mut total_cost = 0.0;
        for (j, &i) in col_to_row.iter().enumerate() {
            assignment[i] = Some(j);
            total_cost += cost[i][j];
        }
        let unmatched = (0..n).filter(|&i| assignment[i].is_none()).collect();
        MatchResult {
            assignment,
            unmatched,
            total_cost,
        }
    }
}

/// Jonker-Volgenant core for n ≤ m; returns the matched column per row.
fn solve_rows_le_cols(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // 1-based row matched to column j
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if matched_row[j] > 0 {
            row_to_col[matched_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_to_col.iter().all(|&j| j != usize::MAX));
    row_to_col
}

/// Exhaustive assignment minimum, for oracle tests (rows ≤ 8).
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = if n == 0 { 0 } else { cost[0].len() };
    let (rows, cols, c): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if n <= m {
        (n, m, Box::new(|i, j| cost[i][j]))
    } else {
        (m, n, Box::new(|j, i| cost[i][j]))
    };
    let mut cols_vec: Vec<usize> = (0..cols).collect();
    let mut best = f64::INFINITY;
    permute(&mut cols_vec, 0, rows, &mut |perm| {
        let total: f64 = (0..rows).map(|i| c(i, perm[i])).sum();
        if total < best {
            best = total;
        }
    });
    if rows == 0 {
        0.0
    } else {
        best
    }
}

fn permute(items: &mut Vec<usize>, k: usize, depth: usize, visit: &mut impl FnMut(&[usize])) {
    if k == depth {
        visit(&items[..depth]);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, depth, visit);
        items.swap(k, i);
    }
}

// ── Matching cost over path features ─────────────────────────────────────────

/// The 8 normalized features of one path: raw unit direction components,
/// delay scaled by τ_max, and power in standardized dB.
pub fn path_features<R: Real>(
    path: &crate::channel::ScpEntry<R>,
    tau_max: f64,
    p_db_mean: f64,
    p_db_std: f64,
) -> [R; 8] {
    [
        path.u_tx.x,
        path.u_tx.y,
        path.u_tx.z,
        path.u_rx.x,
        path.u_rx.y,
        path.u_rx.z,
        path.tau / real(tau_max),
        (power_to_db(path.p) - real(p_db_mean)) / real(p_db_std),
    ]
}

/// Assignment cost: Smooth-L1 over the 8 normalized features plus
/// `w_exist·(1 − σ(logit_i))`, one row per predicted path.
pub fn match_cost<R: Real>(
    pred_features: &[[R; 8]],
    pred_logits: &[R],
    label_features: &[[R; 8]],
    beta: f64,
    w_exist: f64,
) -> Vec<Vec<f64>> {
    assert_eq!(pred_features.len(), pred_logits.len());
    pred_features
        .iter()
        .zip(pred_logits)
        .map(|(pf, &z)| {
            let exist_term = w_exist * (1.0 - sigmoid_f64(to_f64(z)));
            label_features
                .iter()
                .map(|lf| to_f64(smooth_l1(pf, lf, real(beta))) + exist_term)
                .collect()
        })
        .collect()
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ── Training loop scaffolding ────────────────────────────────────────────────

/// One optimizer step of the loss trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_primary: f64,
    pub loss_secondary: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Column names of the two loss components in the trace.
    pub component_names: (&'static str, &'static str),
    pub trace: Vec<TraceRow>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|r| r.loss_total).unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "step,lr,loss_total,{},{}",
            self.component_names.0, self.component_names.1
        )?;
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.lr, r.loss_total, r.loss_primary, r.loss_secondary
            )?;
        }
        Ok(())
    }
}

/// Train split actually used, after the `train_fraction` subsample.
pub fn effective_train_ids(ds: &Dataset, cfg: &TrainConfig) -> Vec<usize> {
    let mut ids = ds.train_ids.clone();
    if cfg.train_fraction < 1.0 {
        Stream::keyed(cfg.seed, 0x465241).shuffle(&mut ids);
        let keep = ((cfg.train_fraction * ids.len() as f64).round() as usize).max(1);
        ids.truncate(keep);
        ids.sort_unstable();
    }
    ids
}

/// Models trainable by the shared end-to-end loop.
pub trait RsrpModel<R: Real> {
    fn param_tensors(&self) -> Vec<Matrix<R>>;
    fn set_param_tensors(&mut self, mats: &[Matrix<R>]);
    /// Predicted RSRP in dB for every (anchor, beam) pair of the batch,
    /// anchor-major, as an (n·K)×1 graph node.
    fn batch_rsrp_db(&self, tape: &Tape<R>, vars: &[Var], ds: &Dataset, anchors: &[usize]) -> Var;
}

impl<R: Real> RsrpModel<R> for NbfModel<R> {
    fn param_tensors(&self) -> Vec<Matrix<R>> {
        self.params.iter().map(|(_, m)| m.clone()).collect()
    }

    fn set_param_tensors(&mut self, mats: &[Matrix<R>]) {
        for ((_, slot), m) in self.params.iter_mut().zip(mats) {
            *slot = m.clone();
        }
    }

    fn batch_rsrp_db(&self, tape: &Tape<R>, vars: &[Var], ds: &Dataset, anchors: &[usize]) -> Var {
        let ok = "shape fixed by construction";
        let positions: Vec<(R, R)> = anchors
            .iter()
            .map(|&a| {
                let p = ds.anchors[a].pos_norm;
                (real(p.0), real(p.1))
            })
            .collect();
        let beams: Vec<BeamSpec<R>> = ds.beams.iter().map(cast_beam).collect();
        let outs = self.forward_batch(tape, vars, &positions);
        let rows: Vec<Var> = outs
            .iter()
            .map(|o| {
                tape.beam_rsrp_db(o.u_tx, o.p_lin, o.gates, &self.panel, &beams)
                    .expect(ok)
            })
            .collect();
        tape.concat_rows(&rows).expect(ok)
    }
}

impl<R: Real> RsrpModel<R> for MlpModel<R> {
    fn param_tensors(&self) -> Vec<Matrix<R>> {
        self.params.iter().map(|(_, m)| m.clone()).collect()
    }

    fn set_param_tensors(&mut self, mats: &[Matrix<R>]) {
        for ((_, slot), m) in self.params.iter_mut().zip(mats) {
            *slot = m.clone();
        }
    }

    fn batch_rsrp_db(&self, tape: &Tape<R>, vars: &[Var], ds: &Dataset, anchors: &[usize]) -> Var {
        let mut data = Vec::with_capacity(anchors.len() * ds.beams.len() * 6);
        for &a in anchors {
            let p = ds.anchors[a].pos_norm;
            for beam in &ds.beams {
                data.extend_from_slice(&MlpModel::<R>::features(
                    (real(p.0), real(p.1)),
                    &cast_beam(beam),
                ));
            }
        }
        let rows = anchors.len() * ds.beams.len();
        let input = tape.leaf(Matrix::from_vec(rows, 6, data));
        self.forward(tape, vars, input)
    }
}

pub fn cast_beam<R: Real>(b: &BeamSpec<f64>) -> BeamSpec<R> {
    BeamSpec {
        xi_y: real(b.xi_y),
        xi_z: real(b.xi_z),
    }
}

fn standardized_labels<R: Real>(ds: &Dataset, anchors: &[usize]) -> Matrix<R> {
    let mut data = Vec::with_capacity(anchors.len() * ds.beams.len());
    for &a in anchors {
        for &label in &ds.anchors[a].rsrp_db {
            data.push(real::<R>(
                (label - ds.stats.rsrp_mean_db) / ds.stats.rsrp_std_db,
            ));
        }
    }
    Matrix::from_vec(data.len(), 1, data)
}

fn standardize_var<R: Real>(tape: &Tape<R>, v: Var, mean: f64, std: f64) -> Var {
    let shifted = tape.add_const(v, real(-mean));
    tape.scale(shifted, real(1.0 / std))
}

/// Deterministic batched optimization driver shared by all procedures.
fn run_loop<R: Real, F>(
    mats: &mut Vec<Matrix<R>>,
    train_ids: &[usize],
    cfg: &TrainConfig,
    mut step_loss: F,
) -> Vec<TraceRow>
where
    F: FnMut(&Tape<R>, &[Var], &[usize]) -> (Var, f64, f64),
{
    assert!(cfg.batch_size >= 1 && cfg.epochs >= 1);
    let steps_per_epoch = train_ids.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = AdamState::for_params(mats);
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = train_ids.to_vec();
        Stream::keyed(cfg.seed, 0xE0_0000 + epoch as u64).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let lr = onecycle_lr(
                step,
                total_steps,
                cfg.lr_max,
                cfg.pct_start,
                cfg.lr_div,
                cfg.lr_final_div,
            );
            let tape: Tape<R> = Tape::new();
            let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
            let (loss, primary, secondary) = step_loss(&tape, &vars, batch);
            let total = to_f64(tape.value(loss).data[0]);
            let grads = tape.backward(loss);
            let grad_mats: Vec<Matrix<R>> = vars.iter().map(|&v| grads.get(v, &tape)).collect();
            adam_step(mats, &grad_mats, &mut state, real(lr), &cfg.adam);
            trace.push(TraceRow {
                step,
                lr,
                loss_total: total,
                loss_primary: primary,
                loss_secondary: secondary,
            });
            step += 1;
        }
    }
    trace
}

/// End-to-end training: Smooth-L1 on standardized dB predictions, gradients
/// flowing through the fixed physics head (for the neural field) or straight
/// into the regressor (baseline).
pub fn train_e2e<R: Real, M: RsrpModel<R>>(model: &mut M, ds: &Dataset, cfg: &TrainConfig) -> TrainReport {
    let train_ids = effective_train_ids(ds, cfg);
    let mut mats = model.param_tensors();
    let trace = run_loop(&mut mats, &train_ids, cfg, |tape, vars, batch| {
        let pred = model.batch_rsrp_db(tape, vars, ds, batch);
        let pred_std = standardize_var(tape, pred, ds.stats.rsrp_mean_db, ds.stats.rsrp_std_db);
        let labels = standardized_labels::<R>(ds, batch);
        let loss = tape
            .smooth_l1_loss(pred_std, &labels, real(cfg.smooth_l1_beta))
            .expect("prediction and label shapes agree");
        let v = to_f64(tape.value(loss).data[0]);
        (loss, v, 0.0)
    });
    model.set_param_tensors(&mats);
    TrainReport {
        component_names: ("loss_rsrp", "unused"),
        trace,
    }
}

/// Profile-supervised pretraining with the Hungarian set loss:
/// BCE over all existence logits plus λ_reg·Smooth-L1 over matched pairs.
/// The assignment is recomputed per sample from current predictions and held
/// fixed during differentiation.
pub fn pretrain<R: Real>(model: &mut NbfModel<R>, ds: &Dataset, cfg: &TrainConfig) -> TrainReport {
    let train_ids = effective_train_ids(ds, cfg);
    let mut mats = model.param_tensors();
    let tau_max = model.config.tau_max;
    let (p_mean, p_std) = (ds.stats.p_db_mean, ds.stats.p_db_std);
    let l_paths = model.config.l_paths;

    let trace = run_loop(&mut mats, &train_ids, cfg, |tape, vars, batch| {
        let ok = "shape fixed by construction";
        let positions: Vec<(R, R)> = batch
            .iter()
            .map(|&a| {
                let p = ds.anchors[a].pos_norm;
                (real(p.0), real(p.1))
            })
            .collect();
        let outs = model.forward_batch(tape, vars, &positions);

        let mut anchor_losses = Vec::with_capacity(batch.len());
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        for (&anchor, out) in batch.iter().zip(&outs) {
            // In-graph normalized 8-feature matrix, L×8.
            let tau_norm = tape.scale(out.tau, real(1.0 / tau_max));
            let p_db = tape.scale(tape.log(out.p_lin), real(10.0 / std::f64::consts::LN_10));
            let p_std_var = standardize_var(tape, p_db, p_mean, p_std);
            let feats = tape
                .concat_cols(&[out.u_tx, out.u_rx, tau_norm, p_std_var])
                .expect(ok);

            // Assignment from current values, fixed for the gradient.
            let feats_val = tape.value(feats);
            let logits_val = tape.value(out.logits);
            let pred_features: Vec<[R; 8]> = (0..l_paths)
                .map(|i| std::array::from_fn(|k| feats_val.at(i, k)))
                .collect();
            let labels: Vec<[R; 8]> = ds.anchors[anchor]
                .mcpp
                .canonicalized()
                .paths
                .iter()
                .map(|p| {
                    let f = path_features(p, tau_max, p_mean, p_std);
                    std::array::from_fn(|k| real::<R>(f[k]))
                })
                .collect();
            let cost = match_cost(
                &pred_features,
                &logits_val.data,
                &labels,
                cfg.smooth_l1_beta,
                cfg.w_exist,
            );
            let matching = hungarian(&cost);

            // BCE over all logits: targets 1 for matched rows.
            let mut exist_targets = Matrix::zeros(l_paths, 1);
            for (i, a) in matching.assignment.iter().enumerate() {
                if a.is_some() {
                    exist_targets.data[i] = R::one();
                }
            }
            let cls = tape
                .bce_with_logits_loss(out.logits, &exist_targets)
                .expect(ok);
            cls_sum += to_f64(tape.value(cls).data[0]);

            // Smooth-L1 over matched pairs only.
            let matched: Vec<(usize, usize)> = matching
                .assignment
                .iter()
                .enumerate()
                .filter_map(|(i, a)| a.map(|j| (i, j)))
                .collect();
            let anchor_loss = if matched.is_empty() {
                cls
            } else {
                let rows: Vec<Var> = matched
                    .iter()
                    .map(|&(i, _)| tape.slice_rows(feats, i, i + 1).expect(ok))
                    .collect();
                let pred_matched = tape.concat_rows(&rows).expect(ok);
                let mut target = Matrix::zeros(matched.len(), 8);
                for (r, &(_, j)) in matched.iter().enumerate() {
                    for k in 0..8 {
                        *target.at_mut(r, k) = labels[j][k];
                    }
                }
                let reg = tape
                    .smooth_l1_loss(pred_matched, &target, real(cfg.smooth_l1_beta))
                    .expect(ok);
                reg_sum += to_f64(tape.value(reg).data[0]);
                let reg_w = tape.scale(reg, real(cfg.lambda_reg));
                tape.add(cls, reg_w).expect(ok)
            };
            anchor_losses.push(anchor_loss);
        }
        let stacked = tape.concat_rows(&anchor_losses).expect(ok);
        let loss = tape.mean_all(stacked);
        let n = batch.len() as f64;
        (loss, cls_sum / n, reg_sum / n)
    });
    model.set_param_tensors(&mats);
    TrainReport {
        component_names: ("loss_cls", "loss_reg"),
        trace,
    }
}

/// Calibration: end-to-end RSRP loss plus λ_feat·MSE between the current and
/// a frozen reference model's final token features at the same inputs. With
/// λ_feat = 0 this is exactly [`train_e2e`], step for step.
pub fn calibrate<R: Real>(
    model: &mut NbfModel<R>,
    reference: &NbfModel<R>,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> TrainReport {
    if cfg.lambda_feat == 0.0 {
        let mut report = train_e2e(model, ds, cfg);
        report.component_names = ("loss_rsrp", "loss_feat");
        return report;
    }
    let train_ids = effective_train_ids(ds, cfg);
    let mut mats = model.param_tensors();
    let beams: Vec<BeamSpec<R>> = ds.beams.iter().map(cast_beam).collect();

    let trace = run_loop(&mut mats, &train_ids, cfg, |tape, vars, batch| {
        let ok = "shape fixed by construction";
        let positions: Vec<(R, R)> = batch
            .iter()
            .map(|&a| {
                let p = ds.anchors[a].pos_norm;
                (real(p.0), real(p.1))
            })
            .collect();
        let outs = model.forward_batch(tape, vars, &positions);

        let rows: Vec<Var> = outs
            .iter()
            .map(|o| {
                tape.beam_rsrp_db(o.u_tx, o.p_lin, o.gates, &model.panel, &beams)
                    .expect(ok)
            })
            .collect();
        let pred = tape.concat_rows(&rows).expect(ok);
        let pred_std = standardize_var(tape, pred, ds.stats.rsrp_mean_db, ds.stats.rsrp_std_db);
        let labels = standardized_labels::<R>(ds, batch);
        let rsrp_loss = tape
            .smooth_l1_loss(pred_std, &labels, real(cfg.smooth_l1_beta))
            .expect(ok);

        // Feature alignment against the frozen reference.
        let mut feat_losses = Vec::with_capacity(batch.len());
        for (&anchor, out) in batch.iter().zip(&outs) {
            let pos = ds.anchors[anchor].pos_norm;
            let ref_features = reference.predict_mcpp((real(pos.0), real(pos.1))).features;
            feat_losses.push(tape.mse_loss(out.features, &ref_features).expect(ok));
        }
        let feat_stack = tape.concat_rows(&feat_losses).expect(ok);
        let feat_loss = tape.mean_all(feat_stack);

        let feat_w = tape.scale(feat_loss, real(cfg.lambda_feat));
        let total = tape.add(rsrp_loss, feat_w).expect(ok);
        (
            total,
            to_f64(tape.value(rsrp_loss).data[0]),
            to_f64(tape.value(feat_loss).data[0]),
        )
    });
    model.set_param_tensors(&mats);
    TrainReport {
        component_names: ("loss_rsrp", "loss_feat"),
        trace,
    }
}

// ── Evaluation ───────────────────────────────────────────────────────────────

/// Anything that can answer (anchor, beam) queries in dB.
pub trait RsrpPredictor {
    /// Predictions for all beams at one anchor (None = no coverage).
    fn predict_anchor(&self, ds: &Dataset, anchor: usize) -> Vec<Option<f64>>;
    /// Single query, used for per-query timing.
    fn predict_one(&self, ds: &Dataset, anchor: usize, beam_idx: usize) -> Option<f64>;
}

/// Neural field with hard existence gating.
pub struct NbfPredictor<'a>(pub &'a NbfModel<f64>);

impl RsrpPredictor for NbfPredictor<'_> {
    fn predict_anchor(&self, ds: &Dataset, anchor: usize) -> Vec<Option<f64>> {
        let pos = ds.anchors[anchor].pos_norm;
        self.0
            .predict_rsrp_db_batch(pos, &ds.beams, true)
            .into_iter()
            .map(Some)
            .collect()
    }

    fn predict_one(&self, ds: &Dataset, anchor: usize, beam_idx: usize) -> Option<f64> {
        let pos = ds.anchors[anchor].pos_norm;
        Some(self.0.predict_rsrp_db(pos, &ds.beams[beam_idx], true))
    }
}

pub struct MlpPredictor<'a>(pub &'a MlpModel<f64>);

impl RsrpPredictor for MlpPredictor<'_> {
    fn predict_anchor(&self, ds: &Dataset, anchor: usize) -> Vec<Option<f64>> {
        (0..ds.beams.len())
            .map(|b| self.predict_one(ds, anchor, b))
            .collect()
    }

    fn predict_one(&self, ds: &Dataset, anchor: usize, beam_idx: usize) -> Option<f64> {
        let pos = ds.anchors[anchor].pos_norm;
        Some(self.0.predict_rsrp_db(pos, &ds.beams[beam_idx]))
    }
}

/// Map baseline interpolating stored RSRP statistics.
pub struct CkmRsrpPredictor<'a>(pub &'a crate::ckm::GridCkm);

impl RsrpPredictor for CkmRsrpPredictor<'_> {
    fn predict_anchor(&self, ds: &Dataset, anchor: usize) -> Vec<Option<f64>> {
        (0..ds.beams.len())
            .map(|b| self.predict_one(ds, anchor, b))
            .collect()
    }

    fn predict_one(&self, ds: &Dataset, anchor: usize, beam_idx: usize) -> Option<f64> {
        let pos = ds.anchors[anchor].pos_m;
        self.0.idw_rsrp_query(pos, &ds.beams[beam_idx]).ok()
    }
}

/// Map baseline interpolating stored profiles through the physics head.
pub struct CkmMcppPredictor<'a>(pub &'a crate::ckm::GridCkm);

impl RsrpPredictor for CkmMcppPredictor<'_> {
    fn predict_anchor(&self, ds: &Dataset, anchor: usize) -> Vec<Option<f64>> {
        (0..ds.beams.len())
            .map(|b| self.predict_one(ds, anchor, b))
            .collect()
    }

    fn predict_one(&self, ds: &Dataset, anchor: usize, beam_idx: usize) -> Option<f64> {
        let pos = ds.anchors[anchor].pos_m;
        self.0
            .idw_mcpp_query(pos, &ds.array, &ds.beams[beam_idx])
            .ok()
    }
}

/// Metrics of one method over one split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub mae_db: f64,
    pub rmse_db: f64,
    pub per_beam_mae: Vec<f64>,
    pub median_query_ms: f64,
    pub storage_bytes: u64,
    pub n_eval: usize,
    /// Fraction of queries the method could answer.
    pub coverage: f64,
}

/// Evaluate a predictor over the given anchors (typically the validation
/// split). Accuracy uses batched per-anchor prediction; the per-query time is
/// the median over a deterministic subsample of single queries.
pub fn evaluate(
    method: &str,
    predictor: &dyn RsrpPredictor,
    ds: &Dataset,
    anchor_ids: &[usize],
    storage_bytes: u64,
) -> EvalReport {
    let n_beams = ds.beams.len();
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut n_eval = 0usize;
    let mut n_total = 0usize;
    let mut beam_abs = vec![0.0; n_beams];
    let mut beam_n = vec![0usize; n_beams];
    for &a in anchor_ids {
        let preds = predictor.predict_anchor(ds, a);
        for (b, pred) in preds.iter().enumerate() {
            n_total += 1;
            if let Some(p) = pred {
                let e = p - ds.anchors[a].rsrp_db[b];
                abs_sum += e.abs();
                sq_sum += e * e;
                beam_abs[b] += e.abs();
                beam_n[b] += 1;
                n_eval += 1;
            }
        }
    }

    // Median per-query wall time over up to 101 spread-out queries.
    let mut times: Vec<f64> = Vec::new();
    if !anchor_ids.is_empty() {
        let n_timing = 101.min(anchor_ids.len() * n_beams);
        for k in 0..n_timing {
            let a = anchor_ids[(k * 17) % anchor_ids.len()];
            let b = (k * 7) % n_beams;
            let t0 = std::time::Instant::now();
            let _ = predictor.predict_one(ds, a, b);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let median_query_ms = if times.is_empty() {
        0.0
    } else {
        times[times.len() / 2]
    };

    EvalReport {
        method: method.to_string(),
        mae_db: if n_eval > 0 { abs_sum / n_eval as f64 } else { f64::NAN },
        rmse_db: if n_eval > 0 {
            (sq_sum / n_eval as f64).sqrt()
        } else {
            f64::NAN
        },
        per_beam_mae: beam_abs
            .iter()
            .zip(&beam_n)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect(),
        median_query_ms,
        storage_bytes,
        n_eval,
        coverage: if n_total > 0 {
            n_eval as f64 / n_total as f64
        } else {
            0.0
        },
    }
}
