use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stprompt::feature_io::{generate_synthetic, DatasetManifest, SynthConfig, VideoLabel};
use stprompt::model::{ModelParams, VideoInput};
use stprompt::trainer::{self, Checkpoint, TrainConfig};

fn small_synth() -> SynthConfig {
    SynthConfig {
        train_videos: 12,
        test_videos: 4,
        frames: (24, 32),
        dim: 8,
        grid: (4, 4),
        num_classes: 2,
        anomaly_extent: (1, 2),
        anomaly_span: (6, 12),
        noise_scale: 0.02,
        ..SynthConfig::default()
    }
}

fn inputs(cfg: &SynthConfig, train: &TrainConfig) -> (Vec<VideoInput>, Vec<String>) {
    let ds = generate_synthetic(cfg).unwrap();
    let v = ds
        .train
        .iter()
        .map(|v| VideoInput::prepare(&v.stream, v.label, &train.model).unwrap())
        .collect();
    (v, ds.class_names)
}

#[test]
fn loss_decreases_over_the_first_epochs() {
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let (v, names) = inputs(&small_synth(), &cfg);
    let out = trainer::train_inputs(&v, &names, &cfg, |_, _, _| ControlFlow::Continue(())).unwrap();
    assert_eq!(out.log.len(), 10);
    for w in out.log.windows(2) {
        assert!(w[1].total < w[0].total, "{:?} -> {:?}", w[0], w[1]);
    }
}

#[test]
fn frozen_tensors_are_untouched_by_training() {
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (v, names) = inputs(&small_synth(), &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = ModelParams::init(&cfg.model, 8, names.len(), &mut rng);
    let out = trainer::train_inputs(&v, &names, &cfg, |_, _, _| ControlFlow::Continue(())).unwrap();
    let trained = &out.checkpoint.params;
    assert_eq!(initial.frozen(), trained.frozen());
    assert_ne!(initial.learnable(), trained.learnable());
}

#[test]
fn early_stop_is_honoured_and_recorded() {
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let (v, names) = inputs(&small_synth(), &cfg);
    let out = trainer::train_inputs(&v, &names, &cfg, |e, _, _| {
        if e == 3 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(out.log.len(), 3);
    assert_eq!(out.checkpoint.epoch, 3);
}

#[test]
fn manifest_training_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_synth()).unwrap();
    let written = ds.write(dir.path()).unwrap();
    let manifest = DatasetManifest::load(&written.train_manifest).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = trainer::train(&manifest, &cfg).unwrap();
    let path = dir.path().join("model.stck");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);

    let stream = manifest.load_stream(&manifest.entries[1]).unwrap();
    let a = out.checkpoint.model().frame_scores(&stream, 0.07).unwrap();
    let b = back.model().frame_scores(&stream, 0.07).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), stream.frames());
}

#[test]
fn single_label_and_empty_sets_are_rejected() {
    let cfg = TrainConfig::default();
    let (v, names) = inputs(&small_synth(), &cfg);
    let normals: Vec<VideoInput> = v.iter().filter(|x| !x.label.is_abnormal()).cloned().collect();
    let abnormals: Vec<VideoInput> = v.iter().filter(|x| x.label.is_abnormal()).cloned().collect();
    let go = |set: &[VideoInput]| trainer::train_inputs(set, &names, &cfg, |_, _, _| ControlFlow::Continue(()));
    assert!(go(&normals).is_err());
    assert!(go(&abnormals).is_err());
    assert!(go(&[]).is_err());

    let mut bad = v.clone();
    bad[1].label = VideoLabel::from_category(9);
    assert!(go(&bad).is_err());
}

#[test]
fn long_videos_are_subsampled_to_max_len() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        train_videos: 2,
        test_videos: 1,
        frames: (300, 300),
        anomaly_span: (20, 40),
        ..small_synth()
    };
    let ds = generate_synthetic(&synth).unwrap();
    let written = ds.write(dir.path()).unwrap();
    let manifest = DatasetManifest::load(&written.train_manifest).unwrap();
    let cfg = TrainConfig::default();
    let prepared = trainer::prepare_inputs(&manifest, &cfg).unwrap();
    assert!(prepared.iter().all(|p| p.frames() == 256));
    let out = trainer::train(
        &manifest,
        &TrainConfig {
            epochs: 1,
            ..cfg
        },
    )
    .unwrap();
    assert!(out.log[0].total.is_finite());
}
