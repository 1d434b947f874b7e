use pirl_core::checkpoint::Checkpoint;
use pirl_core::data::synth_dataset;
use pirl_core::eval::{
    eval_views, invariance_histogram, train_linear_probe, InvarianceConfig, ProbeConfig, TransformFamily,
};
use pirl_core::model::EncoderModel;
use pirl_core::tensor::{Tape, Tensor};
use pirl_core::training::{load_trained, pretrain, TaskKind, TrainConfig};
use pirl_core::transforms::AugmentConfig;
use rand::{Rng, SeedableRng};

fn head_f_outputs(model: &EncoderModel<f32>, cfg: &TrainConfig, data: &pirl_core::data::Dataset) -> Vec<f32> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let stats = cfg.stats.unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(eval_views(data, &idx, cfg.views.size, &stats).unwrap()).unwrap();
    let trunk = model.encode_trunk(&mut tape, x).unwrap();
    let f = model.head_f(&mut tape, trunk.pooled).unwrap();
    tape.value(f).data().to_vec()
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let data = synth_dataset(16, 2).unwrap();
    let mut cfg = TrainConfig::tiny(TaskKind::PirlJigsaw);
    cfg.epochs = 1;
    cfg.nce.negatives = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, &data, Some(dir.path())).unwrap();
    let (cfg2, model) = load_trained(&Checkpoint::load(&dir.path().join("final.ckpt")).unwrap()).unwrap();
    assert_eq!(cfg2, out.config);
    let a = head_f_outputs(&out.model, &out.config, &data);
    let b = head_f_outputs(&model, &cfg2, &data);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let ck = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.get::<f32>("bank/rows").unwrap().data(), out.bank.unwrap().rows().data());
}

#[test]
fn histogram_distances_lie_in_range() {
    let data = synth_dataset(24, 4).unwrap();
    let cfg = TrainConfig::tiny(TaskKind::PirlJigsaw);
    let model = EncoderModel::<f32>::new(cfg.model.clone()).unwrap();
    for family in [TransformFamily::Jigsaw, TransformFamily::Rotation, TransformFamily::Combined] {
        let inv = InvarianceConfig {
            family,
            samples: 12,
            draws: 3,
            bins: 20,
            seed: 1,
        };
        let r = invariance_histogram(&model, &cfg, &data, &inv).unwrap();
        assert_eq!(r.samples + r.skipped, 36);
        assert_eq!(r.counts.iter().sum::<u64>(), r.samples);
        assert!(r.mean >= 0.0 && r.mean <= 2.0 && r.variance >= 0.0);
        assert_eq!(r.edges.first(), Some(&0.0));
        assert_eq!(r.edges.last(), Some(&2.0));
    }
}

#[test]
fn identity_wiring_gives_zero_distance() {
    // g = f on the same untransformed view: every distance should vanish.
    let data = synth_dataset(16, 9).unwrap();
    let mut cfg = TrainConfig::tiny(TaskKind::PirlRotation);
    cfg.views.augment = AugmentConfig::none();
    let mut model = EncoderModel::<f32>::new(cfg.model.clone()).unwrap();
    for part in ["weight", "bias"] {
        let src = model.params().expect_id(&format!("head_f.{part}")).unwrap();
        let dst = model.params().expect_id(&format!("head_g_rot.{part}")).unwrap();
        let v = model.params().value(src).clone();
        *model.params_mut().value_mut(dst) = v;
    }
    let inv = InvarianceConfig {
        family: TransformFamily::FixedRotation(0),
        samples: 16,
        draws: 2,
        bins: 50,
        seed: 0,
    };
    let r = invariance_histogram(&model, &cfg, &data, &inv).unwrap();
    assert_eq!(r.skipped, 0);
    assert!(r.mean < 1e-5, "mean distance {}", r.mean);
    assert_eq!(r.counts[0], r.samples);
}

#[test]
fn probe_on_random_features_is_at_chance() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut labels = |n: usize| (0..n).map(|_| rng.random_range(0..10u8)).collect::<Vec<_>>();
    let (train_y, test_y) = (labels(2000), labels(3000));
    let train_x = Tensor::<f32>::randn(&[2000, 64], 1.0, 1);
    let test_x = Tensor::<f32>::randn(&[3000, 64], 1.0, 2);
    let r = train_linear_probe(&train_x, &train_y, &test_x, &test_y, &ProbeConfig::default()).unwrap();
    assert!((r.test_accuracy - 0.1).abs() <= 0.02, "accuracy {}", r.test_accuracy);
}

#[test]
fn layer_probe_reports_every_stage() {
    let train = synth_dataset(400, 0).unwrap();
    let test = synth_dataset(200, 1).unwrap();
    let cfg = TrainConfig::tiny(TaskKind::PirlJigsaw);
    let model = EncoderModel::<f32>::new(cfg.model.clone()).unwrap();
    let probe = ProbeConfig {
        epochs: 10,
        ..ProbeConfig::default()
    };
    let reports = pirl_core::eval::layer_probe(&model, &train, &test, cfg.views.size, &train.channel_stats(), &probe).unwrap();
    assert_eq!(reports.len(), 5);
    for r in &reports {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.test_size, 200);
    }
}
