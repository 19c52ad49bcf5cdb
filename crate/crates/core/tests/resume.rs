mod common;

use deblurlab::config::{RunConfig, ABLATION_AXES};
use deblurlab::trainer::{Checkpoint, DataSplit, Trainer};

/// Small run with augmentation and several batches per epoch, so that the
/// batch order and augmentation draws matter.
fn config(epochs: usize) -> RunConfig {
    let mut c = common::overfit_config("linear", "fan_max", "cat", 3, epochs, &[]);
    c.data.batch_size = 2;
    c.augmentation.rotations = true;
    c.augmentation.flips = true;
    c.augmentation.crop_size = 32;
    c.data.synthetic.as_mut().unwrap().frames = 8;
    c
}

fn split(c: &RunConfig) -> DataSplit {
    DataSplit::from_config(c, "train", None).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = config(4);
    let mut straight = Trainer::new(c.clone(), split(&c), None).unwrap();
    straight.run_until(4).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(c.clone(), split(&c), None).unwrap();
    first.run_until(2).unwrap();
    first.checkpoint().save(&path).unwrap();
    let head = first.losses().to_vec();
    drop(first);

    let mut second = Trainer::resume(Checkpoint::load(&path).unwrap(), None, split(&c), None).unwrap();
    second.run_until(4).unwrap();
    let mut all = head;
    all.extend_from_slice(second.losses());

    assert_eq!(all, straight.losses());
    assert_eq!(second.state().iteration, straight.state().iteration);
    let mut a = second.state().model.clone();
    let mut b = straight.state().model.clone();
    assert_eq!(a.export_state(), b.export_state());
    assert_eq!(second.state().adam, straight.state().adam);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let c = config(1);
    let mut t = Trainer::new(c.clone(), split(&c), None).unwrap();
    t.run_until(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.checkpoint().save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, *t.config());
    let mut m = back.state.model.clone();
    let mut n = t.state().model.clone();
    assert_eq!(m.export_state(), n.export_state());
    assert_eq!(back.state.adam, t.state().adam);
    assert_eq!(back.state.epoch, 1);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let c = config(1);
    let t = Trainer::new(c.clone(), split(&c), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.checkpoint().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::write(&path, b"NOTACKPT").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn resume_with_different_model_is_rejected() {
    let c = config(1);
    let t = Trainer::new(c.clone(), split(&c), None).unwrap();
    let mut other = c.clone();
    other.model.base_width = 8;
    assert!(Trainer::resume(t.checkpoint(), Some(other), split(&c), None).is_err());
}

#[test]
fn manifest_lists_every_axis_and_replays_the_run() {
    let c = config(2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(c.clone(), split(&c), None).unwrap();
    t.set_output(dir.path());
    let summary = t.run().unwrap();
    for name in ["final.ckpt", "manifest.toml", "losses.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let manifest = RunConfig::load(&dir.path().join("manifest.toml")).unwrap();
    let record = manifest.run.clone().expect("manifest carries a run record");
    for axis in ABLATION_AXES {
        assert!(record.axes.contains_key(axis), "axis {axis} missing");
    }
    assert_eq!(record.fingerprint, c.fingerprint());
    assert_eq!(manifest.fingerprint(), c.fingerprint());

    let mut replay = Trainer::new(manifest.clone(), split(&manifest), None).unwrap();
    replay.run_until(usize::MAX).unwrap();
    assert_eq!(replay.losses(), &summary.losses[..]);
}
