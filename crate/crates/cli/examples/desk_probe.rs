//! Scratch runner for sizing the desk-scale experiment (not shipped as a
//! subcommand; use `cargo run --release --example desk_probe`).

use chaoscal_core::linalg::RowMatrix;
use chaoscal_core::metrics::affine_probe;
use chaoscal_core::nn::load_checkpoint;
use chaoscal_core::pipeline::train::{deterministic_crop_starts, embedding_estimate};
use chaoscal_core::pipeline::{
    cmd_train, estimate_one, gen_data, load_dataset, manifest_path, DatasetKind, EstimateMode,
    RunConfig,
};
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(11);
    let variant: u32 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut cfg = RunConfig::desk_l96(seed);
    match variant {
        0 => {}
        1 => {
            cfg.batch_size = 32;
        }
        2 => {
            cfg.batch_size = 32;
            cfg.encoder.embed_dim = 16;
        }
        3 => {
            cfg.batch_size = 32;
            cfg.encoder.conv_widths = vec![48, 64, 96];
            cfg.encoder.hidden_dim = 192;
        }
        4 => {
            cfg.batch_size = 32;
            cfg.encoder.conv_widths = vec![48, 64, 96];
            cfg.encoder.hidden_dim = 192;
            cfg.encoder.embed_dim = 16;
        }
        5 => {
            // Supervised-only: isolate the backbone from the contrastive terms.
            cfg.batch_size = 32;
            cfg.loss_weights = chaoscal_core::losses::LossWeights {
                zz: 0.0,
                pp: 0.0,
                zp: 1e-12,
                mape: 1.0,
            };
        }
        6 => {
            // No training: affine probe from raw moment vectors to parameters.
            let dir = std::env::temp_dir().join("chaoscal_desk_m6");
            let _ = std::fs::remove_dir_all(&dir);
            let data_dir = dir.join("data");
            gen_data(&cfg, DatasetKind::Test, &data_dir).unwrap();
            let (_, test_params, test_trajs) =
                load_dataset(&manifest_path(&data_dir, DatasetKind::Test)).unwrap();
            let layout = cfg.layout().unwrap();
            let mut rows = Vec::new();
            let mut pars = Vec::new();
            for (p, z) in test_params.iter().zip(&test_trajs) {
                rows.push(
                    chaoscal_core::features::moments(&z.states, &layout)
                        .unwrap()
                        .0,
                );
                pars.push(p.as_slice().to_vec());
            }
            let probe = affine_probe(
                &RowMatrix::from_rows(&rows),
                &RowMatrix::from_rows(&pars),
            )
            .unwrap();
            println!("moment-vector probe R^2 = {:?}", probe.r_squared);
            return;
        }
        7 => {
            cfg.optimizer.lr = 0.003;
        }
        8 => {
            cfg.optimizer.lr = 0.003;
            cfg.loss_weights = chaoscal_core::losses::LossWeights {
                zz: 1.0,
                pp: 1.0,
                zp: 1.0,
                mape: 1.0,
            };
            cfg.encoder.conv_widths = vec![48, 64, 96];
            cfg.encoder.hidden_dim = 192;
        }
        _ => panic!("unknown variant"),
    }
    println!("variant {variant}: batch={} widths={:?} H={} p={}",
        cfg.batch_size, cfg.encoder.conv_widths, cfg.encoder.hidden_dim, cfg.encoder.embed_dim);
    let dir = std::env::temp_dir().join(format!("chaoscal_desk_{seed}_{variant}"));
    let _ = std::fs::remove_dir_all(&dir);
    let data_dir = dir.join("data");

    let t0 = Instant::now();
    let train_m = gen_data(&cfg, DatasetKind::Train, &data_dir).unwrap();
    let test_m = gen_data(&cfg, DatasetKind::Test, &data_dir).unwrap();
    println!(
        "gen: train {}/{} test {}/{} in {:.1}s",
        train_m.n_accepted,
        train_m.n_requested,
        test_m.n_accepted,
        test_m.n_requested,
        t0.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let result = cmd_train(&cfg, &manifest_path(&data_dir, DatasetKind::Train), &dir.join("run")).unwrap();
    println!(
        "train: {:.1}s initial_val={:.1}% best_val={:.1}% (epoch {})",
        t1.elapsed().as_secs_f64(),
        result.initial_val_mape,
        result.best_val_mape,
        result.best_epoch
    );
    let ckpt = load_checkpoint(&result.checkpoint_path).unwrap();

    // Affine probe on held-out test data.
    let t2 = Instant::now();
    let (_, test_params, test_trajs) =
        load_dataset(&manifest_path(&data_dir, DatasetKind::Test)).unwrap();
    let mut emb_rows = Vec::new();
    let mut par_rows = Vec::new();
    for (p, z) in test_params.iter().zip(&test_trajs) {
        let crops: Vec<_> = deterministic_crop_starts(z.len(), cfg.crop_len, cfg.test_crops)
            .into_iter()
            .map(|s| chaoscal_core::dynamics::Trajectory {
                states: z.states.row_block(s, cfg.crop_len),
                dt: z.dt,
                meta: z.meta.clone(),
            })
            .collect();
        emb_rows.push(embedding_estimate(&ckpt.encoder, &ckpt.traj_norm, &crops).unwrap());
        par_rows.push(p.as_slice().to_vec());
    }
    let probe = affine_probe(
        &RowMatrix::from_rows(&emb_rows),
        &RowMatrix::from_rows(&par_rows),
    )
    .unwrap();
    println!("probe: {:.1}s R^2 = {:?}", t2.elapsed().as_secs_f64(), probe.r_squared);

    // EnKI with the emulator + empB prior on the first 20 test instances.
    let t3 = Instant::now();
    let mut f_ape = Vec::new();
    let mut monotone = 0;
    let n_runs = 20.min(test_params.len());
    for i in 0..n_runs {
        let est = estimate_one(&cfg, EstimateMode::Emulate, Some(&ckpt), &test_trajs[i], i).unwrap();
        let truth_f = test_params[i].as_slice()[0];
        let ape = 100.0 * (est.point[0] - truth_f).abs() / truth_f.abs().max(1e-6);
        f_ape.push(ape);
        let spreads: Vec<f64> = est.diagnostics.iter().map(|d| d.spread).collect();
        let tail = &spreads[spreads.len() - 11..];
        if tail.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    f_ape.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let under25 = f_ape.iter().filter(|v| **v < 25.0).count();
    println!(
        "enki: {:.1}s F-APE under 25%: {under25}/{n_runs}; monotone spread: {monotone}/{n_runs}",
        t3.elapsed().as_secs_f64()
    );
    println!("F-APE sorted: {f_ape:.1?}");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
