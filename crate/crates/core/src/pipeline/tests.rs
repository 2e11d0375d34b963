use std::fs;

use super::*;
use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::leap::run_leap;
use crate::metrics::{read_jsonl, MetricsWriter};
use crate::model::ModelConfig;

fn small() -> RunConfig {
    let mut c = RunConfig {
        seed: 3,
        corpus: CorpusConfig { num_languages: 2, counts: Some(vec![30, 20]), test_count: 5, ..CorpusConfig::default() },
        model: ModelConfig {
            conv_channels: 4,
            num_blocks: 1,
            model_dim: 8,
            ff_dim: 8,
            predictor_dim: 8,
            ..ModelConfig::default()
        },
        batch_size: 2,
        ..RunConfig::default()
    };
    c.ssl.steps = 3;
    c.ssl.batch_size = 2;
    c.leap.meta_steps = 2;
    c.leap.inner_steps = 2;
    c.finetune.max_steps = 4;
    c.finetune.eval_every = 2;
    c.resolve().unwrap()
}

#[test]
fn all_stages_off_returns_the_seeded_init() {
    let cfg = RunConfig { stages: Stages { ssl: false, leap: false, finetune: false }, ..small() };
    let dir = tempfile::tempdir().unwrap();
    let report = run_recipe(&cfg, dir.path()).unwrap();
    assert!(report.finetune.is_none());
    let fin = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    let init = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init")).unwrap();
    assert_eq!(fin.params, init.params);
    assert_eq!(fin.step, 0);
}

#[test]
fn recipe_writes_artifacts_and_lineage() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let report = run_recipe(&cfg, dir.path()).unwrap();
    for f in ["resolved_config.json", "init.ckpt", "ssl.ckpt", "leap.ckpt", "final.ckpt", "report.json", "wer.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(read_jsonl(&dir.path().join("ssl_metrics.jsonl")).unwrap().len(), 3);
    assert_eq!(read_jsonl(&dir.path().join("leap_metrics.jsonl")).unwrap().len(), 2);
    assert_eq!(read_jsonl(&dir.path().join("finetune_metrics.jsonl")).unwrap().len(), 4);
    let chain = Checkpoint::load_verified(&dir.path().join("final.ckpt")).unwrap();
    let stages: Vec<_> = chain.iter().map(|c| c.provenance.clone().unwrap().stage).collect();
    assert_eq!(stages, ["finetune", "leap", "ssl", "init"]);
    assert_eq!(report.wer.locales.len(), 2);
    let resolved = RunConfig::load(&dir.path().join("resolved_config.json")).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn recipe_is_deterministic() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_recipe(&cfg, a.path()).unwrap();
    run_recipe(&cfg, b.path()).unwrap();
    for f in ["final.ckpt", "report.json", "finetune_metrics.jsonl", "leap_metrics.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn recipe_matches_manual_stage_calls() {
    let cfg = RunConfig { stages: Stages { ssl: false, leap: true, finetune: true }, ..small() };
    let dir = tempfile::tempdir().unwrap();
    run_recipe(&cfg, dir.path()).unwrap();

    let data = Data::prepare(&cfg).unwrap();
    let (train, val) = data.split(&cfg).unwrap();
    let init = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init")).unwrap();
    let by_lang = group(&train, 2);
    let mut sink = MetricsWriter::sink();
    let leapt =
        run_leap(&init, &by_lang, &cfg.leap, cfg.batch_size, cfg.stage_seed("leap"), cfg.profile, &mut sink).unwrap();
    let (fin, _) = finetune(
        &leapt,
        &train,
        &val,
        &cfg.finetune,
        cfg.batch_size,
        cfg.stage_seed("finetune"),
        cfg.profile,
        &mut sink,
    )
    .unwrap();
    let from_recipe = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(from_recipe.params, fin.params);
}

#[test]
fn changing_ssl_settings_leaves_finetune_sampling_alone() {
    // With SSL off, its settings must not perturb any other stage.
    let a = RunConfig { stages: Stages { ssl: false, leap: false, finetune: true }, ..small() };
    let mut b = a.clone();
    b.ssl.lr = 0.5;
    b.ssl.mask.mask_prob = 0.3;
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_recipe(&a, da.path()).unwrap();
    run_recipe(&b, db.path()).unwrap();
    let pa = Checkpoint::load(&da.path().join("final.ckpt")).unwrap().params;
    let pb = Checkpoint::load(&db.path().join("final.ckpt")).unwrap().params;
    assert_eq!(pa, pb);
    assert_eq!(
        fs::read(da.path().join("finetune_metrics.jsonl")).unwrap(),
        fs::read(db.path().join("finetune_metrics.jsonl")).unwrap()
    );
}

#[test]
fn tampered_parent_is_detected() {
    let cfg = RunConfig { stages: Stages { ssl: false, leap: false, finetune: true }, ..small() };
    let dir = tempfile::tempdir().unwrap();
    run_recipe(&cfg, dir.path()).unwrap();
    let p = dir.path().join("leap.ckpt");
    let mut bytes = fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&p, bytes).unwrap();
    assert!(Checkpoint::load_verified(&dir.path().join("final.ckpt")).is_err());
}

#[test]
fn failing_stage_is_named_and_keeps_earlier_artifacts() {
    let mut cfg = small();
    cfg.finetune.lr = 1e6;
    cfg.finetune.divergence_limit = 1.0;
    let dir = tempfile::tempdir().unwrap();
    let err = run_recipe(&cfg, dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "finetune"), "{err}");
    assert!(err.is_numeric());
    assert!(dir.path().join("leap.ckpt").exists());
    assert!(!dir.path().join("final.ckpt").exists());
}

#[test]
fn zero_finetune_steps_pass_through() {
    let mut cfg = small();
    cfg.finetune.max_steps = 0;
    let data = Data::prepare(&cfg).unwrap();
    let (train, val) = data.split(&cfg).unwrap();
    let init = Checkpoint::init(cfg.model.clone(), 1).unwrap();
    let (out, summary) =
        finetune(&init, &train, &val, &cfg.finetune, 2, 0, cfg.profile, &mut MetricsWriter::sink()).unwrap();
    assert_eq!(out, init);
    assert_eq!(summary.updates, 0);
}

#[test]
fn finetune_returns_best_validated_checkpoint() {
    let mut cfg = small();
    cfg.finetune.max_steps = 6;
    let data = Data::prepare(&cfg).unwrap();
    let (train, val) = data.split(&cfg).unwrap();
    let init = Checkpoint::init(cfg.model.clone(), 1).unwrap();
    let (out, s) = finetune(&init, &train, &val, &cfg.finetune, 2, 0, cfg.profile, &mut MetricsWriter::sink()).unwrap();
    let v = crate::model::mean_loss(&out.params, &cfg.model, &val).unwrap();
    assert_eq!(v, s.best_val_loss);
    assert!(s.best_val_loss <= s.initial_val_loss);
    assert_eq!(out.step as usize, s.best_step);
}

#[test]
fn evaluate_rejects_mismatched_dims() {
    let cfg = small();
    let data = Data::prepare(&cfg).unwrap();
    let other = ModelConfig { feature_dim: 5, ..cfg.model.clone() };
    let ckpt = Checkpoint::init(other, 0).unwrap();
    let test: Vec<_> = data.test.utterances.iter().collect();
    assert!(evaluate(&ckpt, &test, 4).unwrap_err().is_input());
}

#[test]
fn gen_data_round_trips_through_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    gen_data(&cfg, dir.path()).unwrap();
    let mut from_disk = cfg.clone();
    from_disk.corpus.dir = Some(dir.path().to_path_buf());
    let a = Data::prepare(&cfg).unwrap();
    let b = Data::prepare(&from_disk).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    let wrong = RunConfig { corpus: CorpusConfig { feature_dim: 3, ..from_disk.corpus.clone() }, ..from_disk };
    assert!(Data::prepare(&wrong.resolve().unwrap()).unwrap_err().is_input());
}

#[test]
fn ablation_grid_has_six_rows_per_seed() {
    let mut cfg = small();
    cfg.finetune.max_steps = 2;
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(&cfg, &[7], dir.path()).unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows.iter().filter(|r| r.method == Method::NoPretrain) {
        assert!(r.relative_reduction.is_none_or(|v| v == 0.0));
    }
    assert_eq!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap().lines().count(), 7);
}
