//! Training and evaluation pipeline on a small synthetic set.

use std::fs;
use std::path::Path;

use ino_core::encoder::Encoder;
use ino_core::harness::{
    evaluate, evaluate_videos, gen_data, load_training_videos, run, train, Checkpoint, EncoderFeatures,
    OracleFeatures, RunConfig, Trainer, DESK_CONFIG,
};
use ino_core::views::store::load_split;
use ino_core::Rng;

fn config(root: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = epochs;
    cfg.optim.warmup_epochs = 1;
    cfg.data.root = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn desk_config_file_matches_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::desk());
    assert_eq!(RunConfig::parse(DESK_CONFIG).unwrap(), RunConfig::desk());
    RunConfig::desk().validate().unwrap();
}

#[test]
fn same_seed_reproduces_every_output_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    gen_data(&cfg).unwrap();
    let data = files(&cfg.data.train_dir().join("video_000"));
    train(&cfg, None).unwrap();
    let first = files(&cfg.out_dir);
    fs::remove_dir_all(&cfg.out_dir).unwrap();
    fs::remove_dir_all(&cfg.data.root).unwrap();

    gen_data(&cfg).unwrap();
    assert_eq!(files(&cfg.data.train_dir().join("video_000")), data);
    train(&cfg, None).unwrap();
    let second = files(&cfg.out_dir);
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs", a.0);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3);
    gen_data(&cfg).unwrap();
    let videos = load_training_videos(&cfg.data.train_dir()).unwrap();

    let mut straight = Trainer::new(cfg.clone(), videos.clone()).unwrap();
    run(&mut straight, None).unwrap();
    let straight_log = fs::read(cfg.out_dir.join("loss.tsv")).unwrap();

    let mut cfg2 = cfg.clone();
    cfg2.out_dir = dir.path().join("run2");
    let mut first = Trainer::new(cfg2.clone(), videos.clone()).unwrap();
    let half = run(&mut first, Some(5)).unwrap();
    assert_eq!(half.steps, 5);
    let ckpt = Checkpoint::<f32>::load(&half.last_checkpoint).unwrap();
    assert_eq!(ckpt, first.checkpoint());
    let mut resumed = Trainer::from_checkpoint(cfg2.clone(), videos, ckpt).unwrap();
    run(&mut resumed, None).unwrap();

    // The config echoes differ only in the output directory.
    let (a, b) = (resumed.checkpoint(), straight.checkpoint());
    assert_eq!((a.step, &a.student, &a.teacher, &a.opt), (b.step, &b.student, &b.teacher, &b.opt));
    let resumed_log = fs::read_to_string(cfg2.out_dir.join("loss.tsv")).unwrap();
    assert_eq!(resumed_log, String::from_utf8(straight_log).unwrap());
}

#[test]
fn zero_ema_momentum_copies_the_student() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2);
    cfg.train.ema_momentum = 0.0;
    gen_data(&cfg).unwrap();
    let videos = load_training_videos(&cfg.data.train_dir()).unwrap();
    let mut t = Trainer::new(cfg, videos).unwrap();
    for _ in 0..3 {
        let r = t.step().unwrap();
        assert!(r.applied);
        assert_eq!(t.teacher.params, t.student);
    }
}

#[test]
fn training_refuses_labeled_videos() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    gen_data(&cfg).unwrap();
    assert!(load_training_videos(&cfg.data.eval_dir()).is_err());
}

#[test]
fn ground_truth_features_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    gen_data(&cfg).unwrap();
    let videos = load_split(&cfg.data.eval_dir(), true).unwrap();
    let s = evaluate_videos(&OracleFeatures, &videos, &cfg.prop).unwrap().scores;
    assert_eq!(s.j_mean, 1.0);
    assert_eq!(s.f_mean, 1.0);
}

#[test]
fn untrained_and_checkpointed_encoders_give_finite_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    gen_data(&cfg).unwrap();
    let videos = load_split(&cfg.data.eval_dir(), true).unwrap();
    let encoder = Encoder::new(cfg.model.clone()).unwrap();
    let params = encoder.init::<f32>(&Rng::new(9));
    let s = evaluate_videos(&EncoderFeatures { encoder: &encoder, params: &params }, &videos, &cfg.prop)
        .unwrap()
        .scores;
    for v in [s.j_mean, s.j_recall, s.f_mean, s.f_recall] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }

    let summary = train(&cfg, None).unwrap();
    let eval = evaluate(&summary.last_checkpoint, &cfg.data.eval_dir(), &cfg.prop).unwrap();
    assert_eq!(eval.predictions.len(), cfg.data.eval_videos);
    assert!(eval.scores.j_mean.is_finite() && eval.scores.f_mean.is_finite());
}
