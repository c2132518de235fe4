use mtsedge::data::synth_generate;
use mtsedge::model::checkpoint;
use mtsedge::training::{LrSchedule, OutputDir, TrainConfig, Trainer};
use mtsedge::{Network, NetworkConfig, Tensor};

fn net() -> Network {
    let cfg = NetworkConfig::from_json(
        r#"{"blocks":1,"channels":4,"compress_ratio":0.4,"window_scales":[4,8],"terms":2,"heads":2}"#,
    )
    .unwrap();
    Network::init(cfg, 5).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        seed: 9,
        schedule: LrSchedule { base: 0.01, decay_start: 1, gamma: 0.5 },
        max_steps: None,
    }
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn training_is_reproducible_and_logs_every_epoch() {
    let data = synth_generate(5, 24, 24, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir { dir: dir.path().join("a") };
    let mut a = Trainer::new(net(), config(2)).unwrap();
    let ra = a.run(&data, Some(&out)).unwrap();
    let mut b = Trainer::new(net(), config(2)).unwrap();
    let rb = b.run(&data, None).unwrap();
    assert_eq!(ra.step_losses, rb.step_losses);
    assert_eq!(a.network.store().values(), b.network.store().values());
    assert_eq!((a.epoch, a.step), (2, 4));
    assert_eq!(ra.epochs.iter().map(|e| e.2).collect::<Vec<_>>(), vec![0.01, 0.005]);
    let log = std::fs::read_to_string(out.metrics()).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(out.checkpoint(1).exists() && out.checkpoint(2).exists());
}

#[test]
fn resumed_run_tracks_uninterrupted_run() {
    let data = synth_generate(6, 24, 24, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir { dir: dir.path().to_path_buf() };

    let mut full = Trainer::new(net(), config(3)).unwrap();
    let full_report = full.run(&data, None).unwrap();

    let mut first = Trainer::new(net(), config(1)).unwrap();
    first.run(&data, Some(&out)).unwrap();
    let mut resumed = Trainer::resume(&out.latest(), config(3)).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (1, 2));
    let rest = resumed.run(&data, None).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (full.epoch, full.step));
    assert_eq!(rest.epochs.first().map(|e| e.0), Some(2));

    // Checkpoints hold f32 values, so agreement is to single precision.
    let d = max_diff(full.network.store().values(), resumed.network.store().values());
    assert!(d < 1e-4, "parameters drift by {d}");
    for (x, y) in full_report.step_losses[2..].iter().zip(&rest.step_losses) {
        assert!((x - y).abs() <= 1e-4 * x.abs(), "{x} vs {y}");
    }

    // Resuming twice from the same file is exact.
    let mut again = Trainer::resume(&out.latest(), config(3)).unwrap();
    again.run(&data, None).unwrap();
    assert_eq!(again.network.store().values(), resumed.network.store().values());
}

#[test]
fn checkpoint_round_trip_is_single_precision() {
    let n = net();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.mtse");
    checkpoint::save(&path, &n, 4, 17, None).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!((ck.epoch, ck.step), (4, 17));
    assert!(ck.moments.is_none());
    assert_eq!(ck.network.config(), n.config());
    assert_eq!(ck.network.store().names(), n.store().names());
    for (a, b) in n.store().values().iter().zip(ck.network.store().values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *y == *x as f32 as f64));
    }
}
