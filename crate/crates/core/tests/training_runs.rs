use diffmavil::checkpoint::{self, CheckpointError};
use diffmavil::config::RunConfig;
use diffmavil::data::{dump_pairs, generate_audio, generate_video, LatentSpec, SyntheticConfig, SyntheticDataset};
use diffmavil::model::{Mode, Model};
use diffmavil::patch::DataShapes;
use diffmavil::train::{pretrain, MetricsRecord};

fn short(mode: Mode, steps: usize) -> RunConfig {
    RunConfig {
        max_steps: Some(steps),
        eval_size: 8,
        ..RunConfig::toy(mode)
    }
}

#[test]
fn same_seed_same_run() {
    let cfg = short(Mode::Diffmavil, 6);
    let (a, b) = (pretrain(&cfg, None).unwrap(), pretrain(&cfg, None).unwrap());
    assert_eq!(a.steps, 6);
    assert_eq!(a.initial, b.initial);
    assert_eq!(a.last, b.last);
    let strip = |r: &MetricsRecord| MetricsRecord {
        wall_seconds: 0.0,
        ..r.clone()
    };
    assert_eq!(
        a.records.iter().map(strip).collect::<Vec<_>>(),
        b.records.iter().map(strip).collect::<Vec<_>>()
    );
    let other = pretrain(&RunConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(other.last, a.last);
}

#[test]
fn audio_only_modes_never_build_video() {
    for mode in Mode::ALL {
        let o = pretrain(&short(mode, 2), None).unwrap();
        assert_eq!(o.video_constructions == 0, !mode.has_video(), "{mode:?}");
        assert_eq!(o.last.positive_cosine.is_some(), mode.has_video());
        if !mode.has_video() {
            assert_eq!(o.last.mse_video, 0.0);
            assert!(o
                .records
                .iter()
                .all(|r| r.loss.nce_inter == 0.0 && r.loss.mse_video == 0.0));
        }
    }
}

#[test]
fn micro_batches_accumulate_to_the_full_batch_gradient() {
    // Reconstruction terms are per-instance means, so without contrastive
    // terms the accumulated gradient equals the full-batch one.
    let mut whole = short(Mode::MavilBaseline, 4);
    whole.loss.lambda_inter = 0.0;
    whole.loss.lambda_intra = 0.0;
    let mut split = whole.clone();
    split.batch.micro_batch = Some(4);
    let (a, b) = (pretrain(&whole, None).unwrap(), pretrain(&split, None).unwrap());
    assert!(a.records.iter().all(|r| r.micro_batches == 1));
    assert!(b.records.iter().all(|r| r.micro_batches == 2));
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.loss.mse() - y.loss.mse()).abs() < 1e-9, "step {}", x.step);
    }
    assert!((a.last.mse() - b.last.mse()).abs() < 1e-9);
}

#[test]
fn run_directory_has_config_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(Mode::AudiomaeDiffusion, 5);
    let o = pretrain(&cfg, Some(dir.path())).unwrap();

    let saved = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, cfg);

    let lines: Vec<MetricsRecord> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines.last().unwrap().cumulative_flops, o.cumulative_flops);
    assert!(lines.windows(2).all(|w| w[1].cumulative_flops > w[0].cumulative_flops));
    assert!(lines.iter().all(|r| r.lr > 0.0 || r.step == 0));

    let mut model = Model::new(cfg.mode, cfg.model, cfg.data, 999).unwrap();
    let fresh = model.store.clone();
    let header = checkpoint::load(&dir.path().join("checkpoint.bin"), &mut model.store).unwrap();
    assert_eq!(header.step, 5);
    assert_eq!(header.mode, Mode::AudiomaeDiffusion);
    assert_ne!(model.store.params()[0].value, fresh.params()[0].value);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 5);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let cfg = RunConfig::toy(Mode::Diffmavil);
    let a = Model::new(Mode::Diffmavil, cfg.model, cfg.data, 1).unwrap();
    checkpoint::save(&path, &a.store, Mode::Diffmavil, 42).unwrap();
    let mut b = Model::new(Mode::Diffmavil, cfg.model, cfg.data, 2).unwrap();
    assert_eq!(checkpoint::load(&path, &mut b.store).unwrap().step, 42);
    for (x, y) in a.store.params().iter().zip(b.store.params()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.value, y.value);
    }

    let mut other = Model::new(Mode::MavilBaseline, cfg.model, cfg.data, 3).unwrap();
    let before = other.store.clone();
    assert!(matches!(
        checkpoint::load(&path, &mut other.store),
        Err(CheckpointError::Mismatch(_))
    ));
    assert_eq!(other.store.params()[0].value, before.params()[0].value);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let before = b.store.clone();
    assert!(checkpoint::load(&path, &mut b.store).is_err());
    assert_eq!(
        b.store.params().last().unwrap().value,
        before.params().last().unwrap().value
    );
}

#[test]
fn invalid_config_reports_field_path() {
    let err = RunConfig::from_json(r#"{"mode":"diffmavil","epochs":3,"dataset_size":64,"batch":{"base_batch":"x"}}"#)
        .unwrap_err();
    assert_eq!(err.path(), Some("batch.base_batch"));
    let err = RunConfig::from_json(r#"{"mode":"nope","epochs":3,"dataset_size":64}"#).unwrap_err();
    assert_eq!(err.path(), Some("mode"));
    let err = RunConfig::from_json(r#"{"mode":"audiomae","epochs":0,"dataset_size":64}"#).unwrap_err();
    assert_eq!(err.path(), Some("epochs"));
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn audio_and_video_share_the_latent() {
    // Frequency centroid of the spectrogram and the blob's angular speed are
    // both driven by the first latent component.
    let cfg = SyntheticConfig {
        atoms: 1,
        noise_std: 0.0,
    };
    let (mut z0, mut centroid, mut speed) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..200 {
        let spec = LatentSpec::from_seed(seed);
        let a = generate_audio(&spec, [32, 64], &cfg);
        let energy: Vec<f64> = (0..64)
            .map(|f| (0..32).map(|t| a.data()[t * 64 + f].powi(2)).sum())
            .collect();
        centroid.push(energy.iter().enumerate().map(|(f, e)| f as f64 * e).sum::<f64>() / energy.iter().sum::<f64>());

        let v = generate_video(&spec, [2, 48, 48, 1]);
        let angle = |frame: usize| {
            let px = &v.data()[frame * 48 * 48..(frame + 1) * 48 * 48];
            let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = px.iter().map(|p| (p - lo).powi(4)).collect();
            let total: f64 = w.iter().sum();
            let cy = w.iter().enumerate().map(|(i, m)| (i / 48) as f64 * m).sum::<f64>() / total - 23.5;
            let cx = w.iter().enumerate().map(|(i, m)| (i % 48) as f64 * m).sum::<f64>() / total - 23.5;
            cy.atan2(cx)
        };
        let mut d = angle(1) - angle(0);
        if d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        speed.push(d);
        z0.push(spec.z[0]);
    }
    assert!(pearson(&z0, &centroid) > 0.9, "audio {}", pearson(&z0, &centroid));
    assert!(pearson(&z0, &speed) > 0.9, "video {}", pearson(&z0, &speed));
}

#[test]
fn dataset_is_indexed_and_counts_video() {
    let shapes = DataShapes::toy();
    let d = SyntheticDataset::new(shapes, SyntheticConfig::default(), 4, true).unwrap();
    assert_eq!(d.sample(3).unwrap(), d.sample(3).unwrap());
    assert_ne!(d.sample(3).unwrap(), d.sample(4).unwrap());
    assert_eq!(d.video_constructions(), 4);
    let s = d.sample(0).unwrap();
    assert_eq!(s.audio.shape(), &[16, 16]);
    assert_eq!(s.video.unwrap().shape(), &[8, 32]);
}

#[test]
fn dumped_pairs_have_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = DataShapes::toy();
    dump_pairs(dir.path(), &shapes, &SyntheticConfig::default(), 7, 3).unwrap();
    for i in 0..3 {
        let bin = std::fs::read(dir.path().join(format!("pair_{i}.bin"))).unwrap();
        assert_eq!(bin.len(), 8 * (16 * 16 + 4 * 8 * 8));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("pair_{i}.json"))).unwrap()).unwrap();
        assert_eq!(meta["audio_shape"], serde_json::json!([16, 16]));
    }
}

#[test]
fn cumulative_flops_match_the_cost_model() {
    use diffmavil::flops::flops_pretraining;
    for name in ["toy.json", "toy_curriculum.json"] {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name);
        let cfg = RunConfig {
            epochs: 3,
            eval_size: 2,
            ..RunConfig::load(&path).unwrap()
        };
        let o = pretrain(&cfg, None).unwrap();
        let model = flops_pretraining(&cfg.workload()).unwrap().total;
        assert!((o.cumulative_flops / model - 1.0).abs() < 1e-12, "{name}");
    }
}

#[test]
fn baseline_and_diffusion_modes_share_the_schedule() {
    let a = RunConfig::toy(Mode::Diffmavil).training_schedule().unwrap();
    let b = RunConfig::toy(Mode::MavilBaseline).training_schedule().unwrap();
    assert_eq!(a.rows(), b.rows());
}
