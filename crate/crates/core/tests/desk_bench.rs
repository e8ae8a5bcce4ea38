//! Manual desk-scale sizing run (ignored by default; used to pick training
//! budgets that fit the acceptance wall-clock limits).

use beamfield_core::array::{dft_codebook, ArrayConfig};
use beamfield_core::geom::{ErpConfig, PanelOrientation, Vec3};
use beamfield_core::nbf::{MlpModel, NbfConfig, NbfModel};
use beamfield_core::synthenv::{build_dataset, generate_site, Obstacle, SiteConfig};
use beamfield_core::train::{calibrate, evaluate, pretrain, train_e2e, MlpPredictor, NbfPredictor, TrainConfig};

pub fn desk_site(seed: u64) -> SiteConfig {
    SiteConfig {
        area_side: 256.0,
        grid_spacing: 4.0,
        bs_position: Vec3::new(80.0, 80.0, 25.0),
        ue_height: 1.5,
        obstacles: vec![
            // Tall reflectors hugging the east and north boundaries, past the
            // last anchor column/row, so nothing sits behind them.
            Obstacle { min_x: 253.0, min_y: 4.0, size_x: 2.0, size_y: 248.0, size_z: 18.0, reflection_loss_db: 8.0 },
            Obstacle { min_x: 4.0, min_y: 253.0, size_x: 248.0, size_y: 2.0, size_z: 18.0, reflection_loss_db: 9.0 },
            // Short interior blockers with shallow shadows.
            Obstacle { min_x: 141.0, min_y: 60.0, size_x: 2.0, size_y: 50.0, size_z: 6.0, reflection_loss_db: 8.0 },
            Obstacle { min_x: 60.0, min_y: 161.0, size_x: 50.0, size_y: 2.0, size_z: 5.5, reflection_loss_db: 8.0 },
        ],
        max_paths: 10,
        f_c: 3.5e9,
        ground_loss_db: 6.0,
        seed,
    }
}

pub fn desk_array() -> ArrayConfig<f64> {
    ArrayConfig::half_wavelength(
        8,
        4,
        3.5e9,
        PanelOrientation::new(0.0, 15f64.to_radians(), 0.0),
        ErpConfig::directional(),
    )
}

#[test]
#[ignore = "manual sizing run"]
fn bench_desk_scale() {
    let t0 = std::time::Instant::now();
    let site = desk_site(1);
    let field = generate_site(&site).unwrap();
    println!("generate_site: {:.1}s", t0.elapsed().as_secs_f64());

    let zero_paths = field.anchors.iter().filter(|m| m.paths.is_empty()).count();
    let mean_paths: f64 =
        field.anchors.iter().map(|m| m.paths.len() as f64).sum::<f64>() / field.anchors.len() as f64;
    println!("anchors {} zero-path {} mean paths {:.2}", field.anchors.len(), zero_paths, mean_paths);

    let array = desk_array();
    let beams = dft_codebook(&array, 1, 1);
    let t1 = std::time::Instant::now();
    let ds = build_dataset(&field, &site, &array, &beams, 0.8, 42, 0.0);
    println!(
        "build_dataset: {:.1}s train {} val {} stats {:?}",
        t1.elapsed().as_secs_f64(),
        ds.train_ids.len(),
        ds.val_ids.len(),
        ds.stats
    );
    let lo = ds.anchors.iter().flat_map(|a| a.rsrp_db.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = ds.anchors.iter().flat_map(|a| a.rsrp_db.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("label range [{lo:.1}, {hi:.1}] dB");

    let nbf_config = NbfConfig {
        d_model: std::env::var("BENCH_D").ok().and_then(|v| v.parse().ok()).unwrap_or(48),
        n_blocks: std::env::var("BENCH_BLOCKS").ok().and_then(|v| v.parse().ok()).unwrap_or(2),
        n_heads: 4,
        mlp_ratio: 2,
        l_paths: 10,
        fourier_sigma: std::env::var("BENCH_SIGMA").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0),
        tau_max: 2.5e-6,
        p_db_mean: ds.stats.p_db_mean,
        p_db_std: ds.stats.p_db_std,
    };
    let mut model = NbfModel::new(nbf_config, array, 1);
    println!("nbf params: {}", model.param_count());

    let epochs: usize = std::env::var("BENCH_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let lr: f64 = std::env::var("BENCH_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(4e-3);
    let cfg = TrainConfig {
        epochs,
        batch_size: std::env::var("BENCH_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(64),
        lr_max: lr,
        seed: 1,
        ..TrainConfig::default()
    };
    let t2 = std::time::Instant::now();
    let report = train_e2e(&mut model, &ds, &cfg);
    println!(
        "nbf {} epochs: {:.1}s first {:.4} last {:.4}",
        epochs,
        t2.elapsed().as_secs_f64(),
        report.trace.first().unwrap().loss_total,
        report.final_loss()
    );
    let t3 = std::time::Instant::now();
    let rep = evaluate("nbf", &NbfPredictor(&model), &ds, &ds.val_ids, 0);
    println!("nbf eval: {:.1}s mae {:.3} dB", t3.elapsed().as_secs_f64(), rep.mae_db);
    // Soft-gated MAE to expose the gating train/eval gap.
    let mut soft_abs = 0.0; let mut n = 0usize;
    for &a in &ds.val_ids {
        let pred = model.predict_rsrp_db_batch(ds.anchors[a].pos_norm, &ds.beams, false);
        for (b, p) in pred.iter().enumerate() {
            soft_abs += (p - ds.anchors[a].rsrp_db[b]).abs();
            n += 1;
        }
    }
    println!("nbf soft-gate mae {:.3} dB", soft_abs / n as f64);

    // Train-split MAE: bias vs variance.
    let rep_train = evaluate("nbf", &NbfPredictor(&model), &ds, &ds.train_ids[..400], 0);
    println!("nbf TRAIN mae {:.3} dB", rep_train.mae_db);

    // Fidelity ladder: labels reproduced from truncated true profiles.
    for keep in [1usize, 2, 3] {
        let mut abs = 0.0; let mut n = 0usize;
        for &a in &ds.val_ids {
            let truncated = beamfield_core::Mcpp::new(
                ds.anchors[a].mcpp.canonicalized().paths.iter().take(keep).cloned().collect(),
            );
            for (b, beam) in ds.beams.iter().enumerate() {
                let pred = beamfield_core::channel::power_to_db(
                    beamfield_core::whitebox::rsrp_mean(&truncated, &ds.array, beam),
                );
                abs += (pred - ds.anchors[a].rsrp_db[b]).abs();
                n += 1;
            }
        }
        println!("top-{keep} true-path oracle mae {:.3} dB", abs / n as f64);
    }
    if std::env::var("BENCH_PAC").is_ok() {
        let mut pac = NbfModel::new(nbf_config, array, 21);
        let pre_cfg = TrainConfig {
            epochs: std::env::var("BENCH_PRE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(12),
            batch_size: 32,
            lr_max: std::env::var("BENCH_PRE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3),
            seed: 21,
            ..TrainConfig::default()
        };
        let t5 = std::time::Instant::now();
        let rep_pre = pretrain(&mut pac, &ds, &pre_cfg);
        println!("pretrain: {:.1}s final {:.4}", t5.elapsed().as_secs_f64(), rep_pre.final_loss());
        let rep = evaluate("pac_pre", &NbfPredictor(&pac), &ds, &ds.val_ids, 0);
        println!("pretrained-only eval mae {:.3} dB", rep.mae_db);
        let reference = pac.clone();
        let cal_cfg = TrainConfig {
            epochs: std::env::var("BENCH_CAL_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(10),
            batch_size: 32,
            lr_max: std::env::var("BENCH_CAL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3),
            seed: 22,
            ..TrainConfig::default()
        };
        let t6 = std::time::Instant::now();
        let rep_cal = calibrate(&mut pac, &reference, &ds, &cal_cfg);
        println!("calibrate: {:.1}s final {:.4}", t6.elapsed().as_secs_f64(), rep_cal.final_loss());
        let rep = evaluate("pac", &NbfPredictor(&pac), &ds, &ds.val_ids, 0);
        println!("pac eval mae {:.3} dB", rep.mae_db);
    }
    if std::env::var("BENCH_SKIP_MLP").is_ok() { return; }
    let width = MlpModel::<f64>::width_for_min_params(model.param_count());
    let mut mlp = MlpModel::<f64>::new(width, ds.stats.rsrp_mean_db, ds.stats.rsrp_std_db, 2);
    println!("mlp width {} params {}", width, mlp.param_count());
    let t4 = std::time::Instant::now();
    let report = train_e2e(&mut mlp, &ds, &cfg);
    println!(
        "mlp 2 epochs: {:.1}s last {:.4}",
        t4.elapsed().as_secs_f64(),
        report.final_loss()
    );
    let rep = evaluate("mlp", &MlpPredictor(&mlp), &ds, &ds.val_ids, 0);
    println!("mlp eval mae {:.3} dB", rep.mae_db);
}
