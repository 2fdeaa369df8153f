use std::fs;
use std::path::Path;

use rppgvl::encoders::ModelConfig;
use rppgvl::harness::ablate::{parse_switches, Variant, K_SWEEP, MASK_SWEEP};
use rppgvl::harness::checkpoint::{load_model, Checkpoint, RngState};
use rppgvl::harness::report::{blob_hash, manifest_hash};
use rppgvl::harness::run::{self, TrainOptions, FINAL_CHECKPOINT, RUN_REPORT, TRAIN_LOG};
use rppgvl::harness::{ablate, evaluate, Mode, RunReport, TrainConfig, Trainer};
use rppgvl::losses::RankObjective;
use rppgvl::pairs::Template;
use rppgvl::synthgen::{gen_dataset, Dataset, DatasetConfig, Split};
use rppgvl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new("unused");
    cfg.model = ModelConfig {
        map_size: 32,
        patch: 8,
        embed_dim: 8,
        sim_dim: 6,
        vision_depth: 1,
        text_depth: 1,
        heads: 2,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.seed = seed;
    cfg.train.checkpoint_every = 1;
    cfg.data = DatasetConfig { n_samples: 12, test_fraction: 0.25, n_frames: 64, seed, ..DatasetConfig::default() };
    cfg
}

fn tiny_ds(cfg: &TrainConfig) -> Dataset {
    gen_dataset(&cfg.data).unwrap()
}

fn quiet() -> TrainOptions {
    TrainOptions { no_plots: true, ..Default::default() }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = tiny_cfg(1);
    let ds = tiny_ds(&cfg);
    let mut tr = Trainer::new(cfg, &ds).unwrap();
    tr.train_epoch(&ds).unwrap();
    let ck = Checkpoint::from_trainer(&tr);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.header, ck.header);
    assert_eq!(back.config().unwrap(), tr.cfg);
    // every parameter plus two moment buffers each
    assert_eq!(back.tensors.len(), 3 * tr.model.params.len());
    for (_, p) in tr.model.params.iter() {
        assert_eq!(back.tensor(&p.name).unwrap(), &p.value, "{}", p.name);
    }
}

#[test]
fn rng_state_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..37 {
        rng.random::<u32>();
    }
    let state = RngState::capture(&rng);
    let mut back = state.restore().unwrap();
    for _ in 0..100 {
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
    let bad = RngState { seed: "zz".into(), ..state };
    assert!(bad.restore().is_err());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = tiny_cfg(2);
    cfg.train.epochs = 3;
    let ds = tiny_ds(&cfg);
    let mut straight = Trainer::new(cfg.clone(), &ds).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&ds).unwrap();
    }
    let mut first = Trainer::new(cfg, &ds).unwrap();
    first.train_epoch(&ds).unwrap();
    let bytes = Checkpoint::from_trainer(&first).to_bytes();
    drop(first);
    let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    let mut resumed = Trainer::resume(&ck, &ds).unwrap();
    resumed.train_epoch(&ds).unwrap();
    resumed.train_epoch(&ds).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.step, straight.step);
    for ((_, a), (_, b)) in resumed.model.params.iter().zip(straight.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny_cfg(3);
    let ds = tiny_ds(&cfg);
    let tr = Trainer::new(cfg, &ds).unwrap();
    let bytes = Checkpoint::from_trainer(&tr).to_bytes();
    let p = Path::new("x.ckpt");
    let fmt = |b: &[u8]| matches!(Checkpoint::from_bytes(b, p), Err(Error::Format { .. }));
    assert!(fmt(&bytes[..bytes.len() - 3]));
    assert!(fmt(&bytes[..10]));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(fmt(&magic));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(fmt(&version));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(fmt(&trailing));
}

#[test]
fn checkpoint_dim_mismatch_is_a_shape_error() {
    let cfg = tiny_cfg(4);
    let ds = tiny_ds(&cfg);
    let tr = Trainer::new(cfg.clone(), &ds).unwrap();
    let ck = Checkpoint::from_trainer(&tr);
    let mut wide = cfg;
    wide.model.embed_dim = 12;
    let mut other = Trainer::new(wide, &ds).unwrap();
    assert!(matches!(ck.load_params(&mut other.model.params), Err(Error::Shape(_))));
    let mut missing = ck.clone();
    missing.tensors.retain(|(n, _)| n != "head.rppg.w");
    let mut same = Trainer::new(tr.cfg.clone(), &ds).unwrap();
    let err = missing.load_params(&mut same.model.params).unwrap_err();
    assert!(err.to_string().contains("head.rppg.w"), "{err}");
}

#[test]
fn deterministic_runs_hash_identically() {
    let mut cfg = tiny_cfg(5);
    cfg.train.deterministic = true;
    let ds = tiny_ds(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let a = run::train(&cfg, &ds, &dir.path().join("a"), &quiet()).unwrap();
    let b = run::train(&cfg, &ds, &dir.path().join("b"), &quiet()).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert!(a.wall_clock_s.is_none());
    let ra = fs::read(dir.path().join("a").join(RUN_REPORT)).unwrap();
    let rb = fs::read(dir.path().join("b").join(RUN_REPORT)).unwrap();
    assert_eq!(ra, rb);
    let back: RunReport = serde_json::from_slice(&ra).unwrap();
    assert_eq!(back.content_hash(), a.content_hash());
    assert_eq!(back.manifest_hash, manifest_hash(&ds.manifest));
}

#[test]
fn wall_clock_is_excluded_from_the_content_hash() {
    let cfg = tiny_cfg(6);
    let ds = tiny_ds(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = run::train(&cfg, &ds, dir.path(), &quiet()).unwrap();
    assert!(r.wall_clock_s.is_some());
    let other = RunReport { wall_clock_s: Some(123.0), ..r.clone() };
    assert_eq!(other.content_hash(), r.content_hash());
    let changed = RunReport { manifest_hash: "0".into(), ..r.clone() };
    assert_ne!(changed.content_hash(), r.content_hash());
}

#[test]
fn blob_hash_matches_git_style_framing() {
    // sha256 of "blob 0\0", as `git hash-object --object-format=sha256` prints for an empty file
    assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let cfg = tiny_cfg(7);
    let ds = tiny_ds(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let report = run::train(&cfg, &ds, dir.path(), &TrainOptions::default()).unwrap();
    let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L_r,L_vtc,L_fc,L_fr,L_pearson,total");
    assert_eq!(lines.count(), 2);
    let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,L_r,L_vtc,L_fc,L_fr,L_pearson,total\n"));
    assert_eq!(steps.lines().count(), 1 + 2 * 3);
    assert!(dir.path().join("checkpoints/epoch_0001.ckpt").exists());
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    assert!(dir.path().join("losses.svg").exists());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["test"]["mae"].is_number());
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.eval.len(), 2);
}

#[test]
fn evaluation_is_repeatable_and_writes_artifacts() {
    let cfg = tiny_cfg(8);
    let ds = tiny_ds(&cfg);
    let dir = tempfile::tempdir().unwrap();
    run::train(&cfg, &ds, dir.path(), &quiet()).unwrap();
    let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let model = load_model(&ck, &ds).unwrap();
    let a = run::evaluate_to(&model, &ds, Split::Test, &dir.path().join("e1"), true).unwrap();
    let b = evaluate(&model, &ds, Split::Test).unwrap();
    assert_eq!(a, b);
    for f in ["metrics.json", "scatter.csv", "bland_altman.csv", "scatter.svg", "bland_altman.svg", "traces.svg"] {
        assert!(dir.path().join("e1").join(f).exists(), "{f}");
    }
    let ba = fs::read_to_string(dir.path().join("e1/bland_altman.csv")).unwrap();
    assert_eq!(ba.lines().count(), 1 + ds.split(Split::Test).len());
    // the ground truth is the generating frequency
    for c in &a.clips {
        let s = ds.samples.iter().find(|s| s.entry.id == c.id).unwrap();
        assert_eq!(c.gt_bpm, 60.0 * s.entry.f0);
    }
}

#[test]
fn checkpoint_against_wrong_dataset_fails() {
    let cfg = tiny_cfg(9);
    let ds = tiny_ds(&cfg);
    let tr = Trainer::new(cfg.clone(), &ds).unwrap();
    let ck = Checkpoint::from_trainer(&tr);
    let mut short = cfg.data.clone();
    short.n_frames = 24;
    assert!(load_model(&ck, &gen_dataset(&short).unwrap()).is_err());
}

#[test]
fn switches_parse_and_expand() {
    assert_eq!(parse_switches(&["full", "no_fc"]).unwrap(), vec![Variant::Full, Variant::NoFc]);
    assert_eq!(parse_switches(&["mask_sweep"]).unwrap().len(), MASK_SWEEP.len());
    assert_eq!(parse_switches(&["k_sweep"]).unwrap().len(), K_SWEEP.len());
    assert_eq!(parse_switches(&["templates"]).unwrap().len(), 4);
    assert_eq!(parse_switches(&["full", "full"]).unwrap().len(), 1);
    for bad in ["nope", "mask=1.5", "k=x", "template=t9", "size=3"] {
        assert!(parse_switches(&[bad]).is_err(), "{bad}");
    }
    assert!(parse_switches::<&str>(&[]).is_err());
    for s in ["full", "no_fc", "no_vtc", "no_tvr", "no_fr", "afr", "template=t2", "mask=0.7", "k=4"] {
        let v: Variant = s.parse().unwrap();
        assert_eq!(v.to_string(), s);
    }
}

#[test]
fn variants_touch_only_their_flag() {
    let base = TrainConfig::new("d");
    let mut expect = base.clone();
    expect.loss.w_fc = 0.0;
    assert_eq!(Variant::NoFc.apply(&base), expect);
    let mut expect = base.clone();
    expect.loss.w_vtc = 0.0;
    assert_eq!(Variant::NoVtc.apply(&base), expect);
    let mut expect = base.clone();
    expect.loss.w_r = 0.0;
    assert_eq!(Variant::NoTvr.apply(&base), expect);
    let mut expect = base.clone();
    expect.loss.rank_objective = RankObjective::Afr;
    assert_eq!(Variant::Afr.apply(&base), expect);
    assert_eq!(Variant::Template(Template::T3).apply(&base).train.template, Template::T3);
    assert_eq!(Variant::MaskRatio(0.4).apply(&base).train.mask_ratio, 0.4);
    assert_eq!(Variant::K(6).apply(&base).aug.k_neg, 6);
    assert_eq!(Variant::Full.apply(&base), base);
}

#[test]
fn ablation_rows_share_data_order() {
    let mut cfg = tiny_cfg(10);
    cfg.train.epochs = 1;
    let ds = tiny_ds(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(&cfg, &ds, &[Variant::Full, Variant::NoFc, Variant::Full], dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], rows[2]);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,mae,rmse,std_err,pearson_rho\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn supervised_mode_uses_pearson_only() {
    let mut cfg = tiny_cfg(11);
    cfg.train.mode = Mode::Supervised;
    let ds = tiny_ds(&cfg);
    let mut tr = Trainer::new(cfg, &ds).unwrap();
    let log = tr.train_epoch(&ds).unwrap();
    let l = log.losses;
    assert_eq!((l.l_r, l.l_vtc, l.l_fc, l.l_fr), (0.0, 0.0, 0.0, 0.0));
    assert!(l.l_pearson > 0.0);
    assert!((log.total - l.l_pearson).abs() < 1e-12);
}

#[test]
fn semi_mode_labels_the_requested_fraction() {
    let mut cfg = tiny_cfg(12);
    cfg.train.mode = Mode::Semi;
    cfg.train.labeled_fraction = 0.5;
    cfg.data.n_samples = 20;
    let ds = tiny_ds(&cfg);
    let tr = Trainer::new(cfg, &ds).unwrap();
    assert_eq!(tr.labeled.len(), 8);
    let train_ids: Vec<_> = ds.split(Split::Train).iter().map(|s| s.entry.id.clone()).collect();
    assert!(tr.labeled.iter().all(|id| train_ids.contains(id)));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let mut cfg = tiny_cfg(13);
    cfg.train.lr = 1e30;
    let ds = tiny_ds(&cfg);
    let mut tr = Trainer::new(cfg, &ds).unwrap();
    let mut err = None;
    for _ in 0..5 {
        if let Err(e) = tr.train_epoch(&ds) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::NonFinite { what, .. }) => assert!(!what.is_empty()),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn config_errors_name_the_key() {
    let e = TrainConfig::from_toml("[train]\nepochs = 3\n").unwrap_err();
    assert!(e.to_string().contains("dataset"), "{e}");
    let e = TrainConfig::from_toml("dataset = \"d\"\n[train]\nepoch = 3\n").unwrap_err();
    assert!(e.to_string().contains("epoch"), "{e}");
    let e = TrainConfig::from_toml("dataset = \"d\"\n[train]\nlr = \"fast\"\n").unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let cfg = TrainConfig::from_toml("dataset = \"d\"\n").unwrap();
    assert_eq!(cfg.train.lr, 5e-5);
    assert_eq!(cfg.train.batch_size, 16);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn invalid_values_fail_validation() {
    let mut c = TrainConfig::new("d");
    c.train.labeled_fraction = 1.5;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::new("d");
    c.train.mask_ratio = 1.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::new("d");
    c.train.lr = 0.0;
    assert!(c.validate().is_err());
}

/// Default config on the 256-clip train split: total loss falls strictly
/// over each of the first 5 epochs in at least 9 of 10 seeds. About 25
/// minutes on one core.
#[test]
#[ignore]
fn default_loss_decreases_over_first_epochs() {
    let ds = gen_dataset(&DatasetConfig::default()).unwrap();
    let mut good = 0;
    for seed in 0..10 {
        let mut cfg = TrainConfig::new("unused");
        cfg.train.seed = seed;
        let mut tr = Trainer::new(cfg, &ds).unwrap();
        let totals: Vec<f64> = (0..5).map(|_| tr.train_epoch(&ds).unwrap().total).collect();
        let strict = totals.windows(2).all(|w| w[1] < w[0]);
        eprintln!("seed {seed}: {totals:?} strict={strict}");
        good += strict as usize;
    }
    assert!(good >= 9, "{good}/10 seeds decreased strictly");
}
