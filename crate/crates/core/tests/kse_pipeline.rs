//! KSE pipeline smoke test: generation with stability-derived substeps,
//! a short training run, and head/emulate estimation.

use chaoscal_core::nn::load_checkpoint;
use chaoscal_core::pipeline::{
    cmd_estimate, cmd_train, config::KseDims, gen_data, manifest_path, DatasetKind, EstimateMode,
    ObservationSource, RunConfig,
};

fn kse_smoke_config() -> RunConfig {
    let mut cfg = RunConfig::desk_kse(31);
    cfg.kse = Some(KseDims {
        dim: 32,
        half_period: 16.0,
    });
    cfg.train.n = 40;
    cfg.train.traj_len = 80;
    cfg.train.range_min = vec![0.2, 0.2, 0.2];
    cfg.train.range_max = vec![2.0, 2.0, 2.0];
    cfg.test.n = 4;
    cfg.test.traj_len = 80;
    cfg.test.range_min = vec![0.3, 0.3, 0.3];
    cfg.test.range_max = vec![1.8, 1.8, 1.8];
    cfg.crop_len = 32;
    cfg.batch_size = 16;
    cfg.epochs = 6;
    cfg.temperature.hold_epochs = 3;
    if let Some(ramp) = &mut cfg.temperature.tau_prime_ramp {
        ramp.start_epoch = 3;
        ramp.end_epoch = 5;
    }
    cfg.validation_samples = 3;
    cfg.bank_capacity = 96;
    cfg.encoder.conv_widths = vec![12, 16];
    cfg.encoder.hidden_dim = 32;
    cfg.encoder.embed_dim = 10;
    cfg.emulator.comp_embed = 10;
    cfg.emulator.blocks = 2;
    cfg.enki.ensemble_size = 50;
    cfg.enki.iterations = 6;
    cfg.enki.sim_len = 40;
    cfg.enki.variance_blocks = 8;
    cfg.test_crops = 3;
    // Gaussian prior matching the reduced coefficient range.
    cfg.fixed_prior = Some(chaoscal_core::enki::Prior {
        components: ["lambda2", "lambda4", "lambda_nl"]
            .into_iter()
            .map(|name| chaoscal_core::enki::PriorComponent {
                name: name.into(),
                kind: chaoscal_core::enki::PriorKind::Normal,
                mean: 1.0,
                variance: 0.5,
            })
            .collect(),
    });
    cfg.empb_variances = Some(vec![0.25; 3]);
    cfg
}

#[test]
fn kse_end_to_end_smoke() {
    let cfg = kse_smoke_config();
    cfg.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let train_m = gen_data(&cfg, DatasetKind::Train, &data_dir).unwrap();
    let test_m = gen_data(&cfg, DatasetKind::Test, &data_dir).unwrap();
    assert!(train_m.n_accepted >= cfg.batch_size + cfg.validation_samples);
    assert!(test_m.n_accepted >= 1);

    let result = cmd_train(
        &cfg,
        &manifest_path(&data_dir, DatasetKind::Train),
        &dir.path().join("run"),
    )
    .unwrap();
    let ckpt = load_checkpoint(&result.checkpoint_path).unwrap();
    assert_eq!(ckpt.encoder.spec.channels, 32);
    assert_eq!(ckpt.emulator.spec.param_dim, 3);

    let test_manifest = manifest_path(&data_dir, DatasetKind::Test);
    for mode in [EstimateMode::Head, EstimateMode::Emulate] {
        let out = cmd_estimate(
            &cfg,
            mode,
            Some(&ckpt),
            ObservationSource::Dataset(&test_manifest),
            &dir.path().join(format!("{mode:?}")),
        )
        .unwrap();
        assert_eq!(out.instances.len(), test_m.n_accepted);
        let text = std::fs::read_to_string(&out.estimates_path).unwrap();
        assert!(text.starts_with("instance,lambda2,lambda4,lambda_nl"));
        // Estimates are finite.
        for line in text.lines().skip(1) {
            for v in line.split(',').skip(1) {
                let x: f64 = v.parse().unwrap();
                assert!(x.is_finite());
            }
        }
    }
}
