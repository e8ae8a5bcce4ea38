//! The neural field over multipath profiles, and the MLP baseline.
//!
//! The field maps a (normalized) user position to L candidate propagation
//! paths: a random-Fourier position token and L learnable target tokens run
//! through a pre-LN transformer encoder; each output target token feeds a
//! two-layer regression head (8 features: departure direction 3, arrival
//! direction 3, delay 1, power 1) and a one-layer existence head. Composed
//! with the fixed physics head this yields beam RSRP for any beam without
//! re-running the encoder: all beam dependence lives downstream of the
//! predicted profile.

use serde::{Deserialize, Serialize};

use crate::array::{ArrayConfig, BeamSpec};
use crate::channel::{Mcpp, ScpEntry};
use crate::geom::Vec3;
use crate::num::{real, to_f64, Real, Stream};
use crate::tensor::{load_checkpoint, save_checkpoint, Matrix, Tape, Var};

/// Hyperparameters of the profile-predicting field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NbfConfig {
    /// Token width; divisible by `n_heads` and by 2.
    pub d_model: usize,
    /// Encoder depth.
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Hidden width of each block's MLP, as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Number of predicted paths (target tokens).
    pub l_paths: usize,
    /// Std of the frozen random-Fourier embedding matrix.
    pub fourier_sigma: f64,
    /// Upper bound for predicted delays, seconds.
    pub tau_max: f64,
    /// Per-path power head affine: predicted dB = mean + std·feature.
    pub p_db_mean: f64,
    pub p_db_std: f64,
}

impl Default for NbfConfig {
    fn default() -> Self {
        NbfConfig {
            d_model: 256,
            n_blocks: 4,
            n_heads: 8,
            mlp_ratio: 4,
            l_paths: 10,
            fourier_sigma: 1.0,
            tau_max: 2.5e-6,
            p_db_mean: -90.0,
            p_db_std: 10.0,
        }
    }
}

impl NbfConfig {
    fn validate(&self) {
        assert!(self.d_model % 2 == 0, "d_model must be even");
        assert!(
            self.d_model % self.n_heads == 0,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        assert!(self.l_paths >= 1 && self.n_blocks >= 1 && self.mlp_ratio >= 1);
    }
}

/// Predicted profile at one position: L path candidates, their existence
/// logits, and the encoder's final token matrix (for feature alignment).
#[derive(Debug, Clone)]
pub struct McppPrediction<R> {
    pub paths: Vec<ScpEntry<R>>,
    pub existence_logits: Vec<R>,
    pub features: Matrix<R>,
}

impl<R: Real> McppPrediction<R> {
    /// Profile with hard 0/1 existence at threshold 0.5 (logit ≥ 0).
    pub fn hard_mcpp(&self) -> Mcpp<R> {
        let paths = self
            .paths
            .iter()
            .zip(&self.existence_logits)
            .map(|(p, &z)| ScpEntry {
                exists: z >= R::zero(),
                ..*p
            })
            .collect();
        Mcpp::new(paths)
    }

    /// Soft gates σ(logit) aligned with `paths`.
    pub fn gates(&self) -> Vec<R> {
        self.existence_logits
            .iter()
            .map(|&z| (R::one() + (-z).exp()).recip())
            .collect()
    }
}

// Parameter layout: target tokens, then 16 tensors per block, then the final
// norm and the two heads. Indices are derived arithmetically from this order.
const PER_BLOCK: usize = 16;

fn block_base(b: usize) -> usize {
    1 + b * PER_BLOCK
}

/// Transformer-based profile predictor bound to one antenna panel.
#[derive(Debug, Clone)]
pub struct NbfModel<R> {
    pub config: NbfConfig,
    pub panel: ArrayConfig<R>,
    /// Learnable tensors, fixed order.
    pub params: Vec<(String, Matrix<R>)>,
    /// Frozen random-Fourier matrix, (d_model/2)×2, drawn once at init.
    pub fourier: Matrix<R>,
}

impl<R: Real> NbfModel<R> {
    pub fn new(config: NbfConfig, panel: ArrayConfig<R>, seed: u64) -> Self {
        config.validate();
        let d = config.d_model;
        let mut rng = Stream::keyed(seed, 0x4E4246);
        let mut params: Vec<(String, Matrix<R>)> = Vec::new();
        let push = |params: &mut Vec<(String, Matrix<R>)>,
                        name: String,
                        m: Matrix<R>| params.push((name, m));

        push(
            &mut params,
            "target_tokens".into(),
            Matrix::randn(config.l_paths, d, 0.02, &mut rng),
        );
        let w_std = 1.0 / (d as f64).sqrt();
        for b in 0..config.n_blocks {
            let hidden = config.mlp_ratio * d;
            push(&mut params, format!("block{b}.ln1.gamma"), ones(1, d));
            push(&mut params, format!("block{b}.ln1.beta"), Matrix::zeros(1, d));
            for name in ["wq", "wk", "wv", "wo"] {
                push(
                    &mut params,
                    format!("block{b}.attn.{name}"),
                    Matrix::randn(d, d, w_std, &mut rng),
                );
                push(
                    &mut params,
                    format!("block{b}.attn.{name}_bias"),
                    Matrix::zeros(1, d),
                );
            }
            push(&mut params, format!("block{b}.ln2.gamma"), ones(1, d));
            push(&mut params, format!("block{b}.ln2.beta"), Matrix::zeros(1, d));
            push(
                &mut params,
                format!("block{b}.mlp.w1"),
                Matrix::randn(d, hidden, w_std, &mut rng),
            );
            push(&mut params, format!("block{b}.mlp.b1"), Matrix::zeros(1, hidden));
            push(
                &mut params,
                format!("block{b}.mlp.w2"),
                Matrix::randn(hidden, d, 1.0 / (hidden as f64).sqrt(), &mut rng),
            );
            push(&mut params, format!("block{b}.mlp.b2"), Matrix::zeros(1, d));
        }
        push(&mut params, "final_ln.gamma".into(), ones(1, d));
        push(&mut params, "final_ln.beta".into(), Matrix::zeros(1, d));
        push(
            &mut params,
            "head_reg.w1".into(),
            Matrix::randn(d, d, w_std, &mut rng),
        );
        push(&mut params, "head_reg.b1".into(), Matrix::zeros(1, d));
        // Direction columns start wide so the L candidates spread over many
        // departure directions; delay and power columns start near the affine
        // center.
        let mut reg_w2 = Matrix::randn(d, 8, 0.3, &mut rng);
        for r in 0..d {
            let narrow = real::<R>(0.03);
            *reg_w2.at_mut(r, 6) = reg_w2.at(r, 6) * narrow;
            *reg_w2.at_mut(r, 7) = reg_w2.at(r, 7) * narrow;
        }
        push(&mut params, "head_reg.w2".into(), reg_w2);
        push(&mut params, "head_reg.b2".into(), Matrix::zeros(1, 8));
        push(
            &mut params,
            "head_exist.w".into(),
            Matrix::randn(d, 1, w_std, &mut rng),
        );
        // Gates start saturated open: end-to-end training has no existence
        // labels, so the power head must own the fit and the hard 0.5
        // inference threshold must agree with the soft training gates.
        push(
            &mut params,
            "head_exist.b".into(),
            Matrix::from_vec(1, 1, vec![real(4.0)]),
        );

        let fourier = Matrix::randn(d / 2, 2, config.fourier_sigma, &mut rng);
        NbfModel {
            config,
            panel,
            params,
            fourier,
        }
    }

    /// Number of learnable scalars (the frozen Fourier matrix not included).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, m)| m.len()).sum()
    }

    /// Random-Fourier position embedding of a normalized position, 1×d:
    /// concat(sin(2π·B·pos), cos(2π·B·pos)).
    pub fn fourier_embed(&self, pos: (R, R)) -> Matrix<R> {
        let half = self.config.d_model / 2;
        let tau = R::PI() + R::PI();
        let mut row = Vec::with_capacity(self.config.d_model);
        for k in 0..half {
            let phase = tau * (self.fourier.at(k, 0) * pos.0 + self.fourier.at(k, 1) * pos.1);
            row.push(phase.sin());
        }
        for k in 0..half {
            let phase = tau * (self.fourier.at(k, 0) * pos.0 + self.fourier.at(k, 1) * pos.1);
            row.push(phase.cos());
        }
        Matrix::row(&row)
    }

    /// Bind every learnable tensor to a fresh tape, in parameter order.
    pub fn bind(&self, tape: &Tape<R>) -> Vec<Var> {
        self.params.iter().map(|(_, m)| tape.leaf(m.clone())).collect()
    }

    /// Full differentiable forward for a batch of normalized positions.
    ///
    /// Every sample shares the same bound parameters, so one backward pass
    /// accumulates batch gradients into `vars`.
    pub fn forward_batch(&self, tape: &Tape<R>, vars: &[Var], positions: &[(R, R)]) -> Vec<SampleOutput> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let t_len = cfg.l_paths + 1;
        let ok = "shape fixed by construction";

        // Tokens: [UE embed; target tokens] per sample, stacked over samples.
        let target_tokens = vars[0];
        let mut sample_blocks = Vec::with_capacity(positions.len());
        for &pos in positions {
            let ue = tape.leaf(self.fourier_embed(pos));
            sample_blocks.push(tape.concat_rows(&[ue, target_tokens]).expect(ok));
        }
        let mut x = tape.concat_rows(&sample_blocks).expect(ok);

        for b in 0..cfg.n_blocks {
            let base = block_base(b);
            let ln = |t: &Tape<R>, x: Var, g: Var, bta: Var| {
                let n = t.layer_norm_rows(x, real(1e-5));
                let n = t.mul_row(n, g).expect(ok);
                t.add_row(n, bta).expect(ok)
            };
            // Pre-LN attention with residual.
            let normed = ln(tape, x, vars[base], vars[base + 1]);
            let q = self.linear(tape, normed, vars[base + 2], vars[base + 3]);
            let k = self.linear(tape, normed, vars[base + 4], vars[base + 5]);
            let v = self.linear(tape, normed, vars[base + 6], vars[base + 7]);
            let dh = d / cfg.n_heads;
            let scale = real::<R>(1.0 / (dh as f64).sqrt());
            let mut ctx_rows = Vec::with_capacity(positions.len());
            for s in 0..positions.len() {
                let (lo, hi) = (s * t_len, (s + 1) * t_len);
                let qs = tape.slice_rows(q, lo, hi).expect(ok);
                let ks = tape.slice_rows(k, lo, hi).expect(ok);
                let vs = tape.slice_rows(v, lo, hi).expect(ok);
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let (cl, ch) = (hd * dh, (hd + 1) * dh);
                    let qh = tape.slice_cols(qs, cl, ch).expect(ok);
                    let kh = tape.slice_cols(ks, cl, ch).expect(ok);
                    let vh = tape.slice_cols(vs, cl, ch).expect(ok);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt).expect(ok);
                    let scores = tape.scale(scores, scale);
                    let attn = tape.softmax_rows(scores);
                    heads.push(tape.matmul(attn, vh).expect(ok));
                }
                ctx_rows.push(tape.concat_cols(&heads).expect(ok));
            }
            let ctx = tape.concat_rows(&ctx_rows).expect(ok);
            let proj = self.linear(tape, ctx, vars[base + 8], vars[base + 9]);
            x = tape.add(x, proj).expect(ok);

            // Pre-LN MLP with residual.
            let normed = ln(tape, x, vars[base + 10], vars[base + 11]);
            let h1 = self.linear(tape, normed, vars[base + 12], vars[base + 13]);
            let h1 = tape.gelu(h1);
            let h2 = self.linear(tape, h1, vars[base + 14], vars[base + 15]);
            x = tape.add(x, h2).expect(ok);
        }

        let fin = block_base(cfg.n_blocks);
        let normed = tape.layer_norm_rows(x, real(1e-5));
        let normed = tape.mul_row(normed, vars[fin]).expect(ok);
        let features_all = tape.add_row(normed, vars[fin + 1]).expect(ok);

        // Heads over each sample's target tokens.
        let (rw1, rb1, rw2, rb2) = (vars[fin + 2], vars[fin + 3], vars[fin + 4], vars[fin + 5]);
        let (ew, eb) = (vars[fin + 6], vars[fin + 7]);
        let ln10_over_10 = real::<R>(std::f64::consts::LN_10 / 10.0);
        let mut outputs = Vec::with_capacity(positions.len());
        for s in 0..positions.len() {
            let (lo, hi) = (s * t_len, (s + 1) * t_len);
            let features = tape.slice_rows(features_all, lo, hi).expect(ok);
            let targets = tape.slice_rows(features_all, lo + 1, hi).expect(ok);

            let h1 = self.linear(tape, targets, rw1, rb1);
            let h1 = tape.gelu(h1);
            let reg = self.linear(tape, h1, rw2, rb2);

            let u_tx = tape.normalize_rows(tape.slice_cols(reg, 0, 3).expect(ok));
            let u_rx = tape.normalize_rows(tape.slice_cols(reg, 3, 6).expect(ok));
            let tau_raw = tape.slice_cols(reg, 6, 7).expect(ok);
            let tau = tape.scale(tape.sigmoid(tau_raw), real(self.config.tau_max));
            let p_feat = tape.slice_cols(reg, 7, 8).expect(ok);
            // p = 10^{(mean + std·t)/10} built as exp(ln10/10·(mean + std·t))
            let p_db_scaled = tape.scale(p_feat, real::<R>(self.config.p_db_std) * ln10_over_10);
            let p_shift = tape.add_const(p_db_scaled, real::<R>(self.config.p_db_mean) * ln10_over_10);
            let p_lin = tape.exp(p_shift);

            let logits = self.linear(tape, targets, ew, eb);
            let gates = tape.sigmoid(logits);

            outputs.push(SampleOutput {
                u_tx,
                u_rx,
                tau,
                p_lin,
                logits,
                gates,
                features,
            });
        }
        outputs
    }

    fn linear(&self, tape: &Tape<R>, x: Var, w: Var, b: Var) -> Var {
        let ok = "shape fixed by construction";
        let y = tape.matmul(x, w).expect(ok);
        tape.add_row(y, b).expect(ok)
    }

    /// Non-differentiating forward: the predicted profile at one position.
    pub fn predict_mcpp(&self, pos: (R, R)) -> McppPrediction<R> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let out = &self.forward_batch(&tape, &vars, &[pos])[0];
        let u_tx = tape.value(out.u_tx);
        let u_rx = tape.value(out.u_rx);
        let tau = tape.value(out.tau);
        let p = tape.value(out.p_lin);
        let logits = tape.value(out.logits);
        let paths = (0..self.config.l_paths)
            .map(|l| {
                ScpEntry::new(
                    Vec3::new(u_tx.at(l, 0), u_tx.at(l, 1), u_tx.at(l, 2)),
                    Vec3::new(u_rx.at(l, 0), u_rx.at(l, 1), u_rx.at(l, 2)),
                    tau.data[l],
                    p.data[l],
                )
            })
            .collect();
        McppPrediction {
            paths,
            existence_logits: logits.data,
            features: tape.value(out.features),
        }
    }

    /// Predicted mean RSRP in dB for one beam. Soft existence gates when
    /// `hard_gates` is false (the differentiable training path), hard 0/1
    /// thresholding at 0.5 otherwise (the inference path).
    pub fn predict_rsrp_db(&self, pos: (R, R), beam: &BeamSpec<R>, hard_gates: bool) -> R {
        self.predict_rsrp_db_batch(pos, std::slice::from_ref(beam), hard_gates)[0]
    }

    /// One encoder pass, any number of beams.
    pub fn predict_rsrp_db_batch(&self, pos: (R, R), beams: &[BeamSpec<R>], hard_gates: bool) -> Vec<R> {
        let pred = self.predict_mcpp(pos);
        rsrp_db_from_prediction(&pred, &self.panel, beams, hard_gates)
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<(), crate::tensor::checkpoint::CheckpointError> {
        let mut tensors: Vec<(String, Matrix<R>)> = self.params.clone();
        tensors.push(("fourier_b".into(), self.fourier.clone()));
        let meta = serde_json::json!({
            "kind": "nbf",
            "config": self.config,
            "panel": panel_to_json(&self.panel),
            "param_count": self.param_count(),
        });
        save_checkpoint(path, &tensors, meta)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self, ModelLoadError> {
        let ckpt = load_checkpoint(path)?;
        let kind = ckpt.meta["kind"].as_str().unwrap_or_default();
        if kind != "nbf" {
            return Err(ModelLoadError::WrongKind {
                expected: "nbf",
                got: kind.to_string(),
            });
        }
        let config: NbfConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let panel: ArrayConfig<f64> = serde_json::from_value(ckpt.meta["panel"].clone())?;
        let mut params = Vec::new();
        let mut fourier = None;
        for (name, m) in &ckpt.tensors {
            let m = crate::tensor::checkpoint::matrix_to_scalar::<R>(m);
            if name == "fourier_b" {
                fourier = Some(m);
            } else {
                params.push((name.clone(), m));
            }
        }
        Ok(NbfModel {
            config,
            panel: panel_to_scalar(&panel),
            params,
            fourier: fourier.ok_or(ModelLoadError::MissingTensor("fourier_b"))?,
        })
    }
}

/// Per-sample graph handles from [`NbfModel::forward_batch`].
pub struct SampleOutput {
    /// L×3 unit departure directions.
    pub u_tx: Var,
    /// L×3 unit arrival directions.
    pub u_rx: Var,
    /// L×1 delays in seconds.
    pub tau: Var,
    /// L×1 linear powers.
    pub p_lin: Var,
    /// L×1 existence logits.
    pub logits: Var,
    /// L×1 soft gates σ(logit).
    pub gates: Var,
    /// (L+1)×d final token matrix (after the final norm).
    pub features: Var,
}

/// Beam RSRP in dB from an already-predicted profile.
pub fn rsrp_db_from_prediction<R: Real>(
    pred: &McppPrediction<R>,
    panel: &ArrayConfig<R>,
    beams: &[BeamSpec<R>],
    hard_gates: bool,
) -> Vec<R> {
    let mcpp = Mcpp::new(pred.paths.clone());
    let gates: Vec<R> = if hard_gates {
        pred.existence_logits
            .iter()
            .map(|&z| if z >= R::zero() { R::one() } else { R::zero() })
            .collect()
    } else {
        pred.gates()
    };
    beams
        .iter()
        .map(|beam| {
            crate::channel::power_to_db(crate::whitebox::rsrp_mean_gated(&mcpp, &gates, panel, beam))
        })
        .collect()
}

fn ones<R: Real>(rows: usize, cols: usize) -> Matrix<R> {
    Matrix::from_vec(rows, cols, vec![R::one(); rows * cols])
}

fn panel_to_json<R: Real>(panel: &ArrayConfig<R>) -> serde_json::Value {
    serde_json::to_value(panel_to_f64(panel)).expect("panel serializes")
}

fn panel_to_f64<R: Real>(p: &ArrayConfig<R>) -> ArrayConfig<f64> {
    ArrayConfig {
        n_y: p.n_y,
        n_z: p.n_z,
        d_y: to_f64(p.d_y),
        d_z: to_f64(p.d_z),
        f_c: to_f64(p.f_c),
        orientation: crate::geom::PanelOrientation {
            rho_x: to_f64(p.orientation.rho_x),
            rho_y: to_f64(p.orientation.rho_y),
            rho_z: to_f64(p.orientation.rho_z),
        },
        erp: crate::geom::ErpConfig {
            kind: p.erp.kind,
            peak_gain_dbi: to_f64(p.erp.peak_gain_dbi),
            theta_3db: to_f64(p.erp.theta_3db),
            phi_3db: to_f64(p.erp.phi_3db),
            sla_v: to_f64(p.erp.sla_v),
            a_max: to_f64(p.erp.a_max),
        },
    }
}

fn panel_to_scalar<R: Real>(p: &ArrayConfig<f64>) -> ArrayConfig<R> {
    ArrayConfig {
        n_y: p.n_y,
        n_z: p.n_z,
        d_y: real(p.d_y),
        d_z: real(p.d_z),
        f_c: real(p.f_c),
        orientation: crate::geom::PanelOrientation {
            rho_x: real(p.orientation.rho_x),
            rho_y: real(p.orientation.rho_y),
            rho_z: real(p.orientation.rho_z),
        },
        erp: crate::geom::ErpConfig {
            kind: p.erp.kind,
            peak_gain_dbi: real(p.erp.peak_gain_dbi),
            theta_3db: real(p.erp.theta_3db),
            phi_3db: real(p.erp.phi_3db),
            sla_v: real(p.erp.sla_v),
            a_max: real(p.erp.a_max),
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelLoadError {
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint holds a {got:?} model, expected {expected}")]
    WrongKind { expected: &'static str, got: String },
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(&'static str),
}

// ── MLP baseline ─────────────────────────────────────────────────────────────

/// Fully connected baseline regressing mean RSRP directly from
/// `[x, y, sin ξ_y, cos ξ_y, sin ξ_z, cos ξ_z]`.
#[derive(Debug, Clone)]
pub struct MlpModel<R> {
    pub hidden: usize,
    pub n_hidden_layers: usize,
    /// Output affine: prediction = mean + std·raw.
    pub out_mean: f64,
    pub out_std: f64,
    pub params: Vec<(String, Matrix<R>)>,
}

impl<R: Real> MlpModel<R> {
    pub const INPUT_DIM: usize = 6;

    /// Smallest width (multiple of 8, 3 hidden layers) whose parameter count
    /// reaches at least `min_params`, so the baseline is never smaller than
    /// the model it is compared against.
    pub fn width_for_min_params(min_params: usize) -> usize {
        let mut w = 8;
        while Self::count_for(w) < min_params {
            w += 8;
        }
        w
    }

    fn count_for(w: usize) -> usize {
        // 6→w, w→w, w→w, w→1 with biases.
        (Self::INPUT_DIM * w + w) + 2 * (w * w + w) + (w + 1)
    }

    pub fn new(hidden: usize, out_mean: f64, out_std: f64, seed: u64) -> Self {
        let mut rng = Stream::keyed(seed, 0x4D4C50);
        let dims = [Self::INPUT_DIM, hidden, hidden, hidden, 1];
        let mut params = Vec::new();
        for i in 0..dims.len() - 1 {
            let std = (2.0 / dims[i] as f64).sqrt();
            params.push((
                format!("layer{i}.w"),
                Matrix::randn(dims[i], dims[i + 1], std, &mut rng),
            ));
            params.push((format!("layer{i}.b"), Matrix::zeros(1, dims[i + 1])));
        }
        MlpModel {
            hidden,
            n_hidden_layers: 3,
            out_mean,
            out_std,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn bind(&self, tape: &Tape<R>) -> Vec<Var> {
        self.params.iter().map(|(_, m)| tape.leaf(m.clone())).collect()
    }

    /// Feature row for one (normalized position, beam) query.
    pub fn features(pos: (R, R), beam: &BeamSpec<R>) -> [R; 6] {
        [
            pos.0,
            pos.1,
            beam.xi_y.sin(),
            beam.xi_y.cos(),
            beam.xi_z.sin(),
            beam.xi_z.cos(),
        ]
    }

    /// Differentiable forward over a batch of feature rows; output is B×1 dB.
    pub fn forward(&self, tape: &Tape<R>, vars: &[Var], inputs: Var) -> Var {
        let ok = "shape fixed by construction";
        let mut x = inputs;
        for i in 0..4 {
            let y = tape.matmul(x, vars[2 * i]).expect(ok);
            x = tape.add_row(y, vars[2 * i + 1]).expect(ok);
            if i < 3 {
                x = tape.relu(x);
            }
        }
        let scaled = tape.scale(x, real(self.out_std));
        tape.add_const(scaled, real(self.out_mean))
    }

    /// Non-differentiating prediction for one query.
    pub fn predict_rsrp_db(&self, pos: (R, R), beam: &BeamSpec<R>) -> R {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let input = tape.leaf(Matrix::row(&Self::features(pos, beam)));
        let out = self.forward(&tape, &vars, input);
        tape.value(out).data[0]
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<(), crate::tensor::checkpoint::CheckpointError> {
        let meta = serde_json::json!({
            "kind": "mlp",
            "hidden": self.hidden,
            "n_hidden_layers": self.n_hidden_layers,
            "out_mean": self.out_mean,
            "out_std": self.out_std,
            "param_count": self.param_count(),
        });
        save_checkpoint(path, &self.params, meta)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self, ModelLoadError> {
        let ckpt = load_checkpoint(path)?;
        let kind = ckpt.meta["kind"].as_str().unwrap_or_default();
        if kind != "mlp" {
            return Err(ModelLoadError::WrongKind {
                expected: "mlp",
                got: kind.to_string(),
            });
        }
        Ok(MlpModel {
            hidden: ckpt.meta["hidden"].as_u64().unwrap_or(0) as usize,
            n_hidden_layers: ckpt.meta["n_hidden_layers"].as_u64().unwrap_or(3) as usize,
            out_mean: ckpt.meta["out_mean"].as_f64().unwrap_or(0.0),
            out_std: ckpt.meta["out_std"].as_f64().unwrap_or(1.0),
            params: ckpt
                .tensors
                .iter()
                .map(|(n, m)| (n.clone(), crate::tensor::checkpoint::matrix_to_scalar::<R>(m)))
                .collect(),
        })
    }
}
