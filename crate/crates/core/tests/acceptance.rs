//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyglot::autodiff::{grad_check, named, Graph, NamedTensors, NamedVars, Var};
use polyglot::checkpoint::Checkpoint;
use polyglot::leap::{
    inner_rollout, leap_meta_step, meta_gradient, path_length, pull_forward_distance, run_leap, LanguageObjective,
    MetaOptimizerKind, MetaState, PathNorm, Quadratic, Task,
};
use polyglot::metrics::MetricsWriter;
use polyglot::model::{utterance_loss, Bound, ModelConfig, ParamVector};
use polyglot::pipeline::{evaluate, finetune, group, run_recipe, Data, RunConfig};
use polyglot::seed;
use polyglot::ssl::{contrastive_loss, run_ssl_pretrain, sample_mask, sample_negatives, MaskSpec};
use polyglot::synth::Utterance;
use polyglot::transducer::{relative_reduction, rnnt_loss, rnnt_loss_oracle, weighted_overall_wer, LogLattice};
use polyglot::{Result, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn run(id: u8, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = v.pass && in_time;
    let timing = match limit {
        Some(l) => format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64()),
        None => format!("{:.1}s", elapsed.as_secs_f64()),
    };
    println!("{} {id} {name}: {} [{timing}]", if pass { "PASS" } else { "FAIL" }, v.detail);
    pass
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn lattice_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut count, mut worst) = (0, 0.0f64);
    for t in 1..=4 {
        for u in 0..=3 {
            for v in 1..=3 {
                for _ in 0..5 {
                    let logits: Vec<f64> = (0..t * (u + 1) * (v + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..v)).collect();
                    let lattice = LogLattice::from_logits(t, u + 1, v + 1, &logits)?;
                    let diff = (rnnt_loss(&lattice, &labels)? - rnnt_loss_oracle(&lattice, &labels)?).abs();
                    worst = worst.max(diff);
                    count += 1;
                }
            }
        }
    }
    Ok(verdict(count >= 200 && worst <= 1e-9, format!("{count} lattices, max |diff| {worst:.2e}")))
}

type Builder = fn(&mut Graph, &NamedVars) -> Result<Var>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, NamedTensors, Builder)> {
    let mut m = |shape: &[usize]| rand_tensor(rng, shape);
    vec![
        ("add", named([("a", m(&[3, 4])), ("b", m(&[3, 4]))]), |g, v| g.add(v["a"], v["b"])),
        ("sub", named([("a", m(&[3, 4])), ("b", m(&[3, 4]))]), |g, v| g.sub(v["a"], v["b"])),
        ("mul", named([("a", m(&[3, 4])), ("b", m(&[3, 4]))]), |g, v| g.mul(v["a"], v["b"])),
        ("add_row", named([("a", m(&[3, 4])), ("b", m(&[4]))]), |g, v| g.add_row(v["a"], v["b"])),
        ("mul_row", named([("a", m(&[3, 4])), ("b", m(&[4]))]), |g, v| g.mul_row(v["a"], v["b"])),
        ("scale", named([("a", m(&[2, 3]))]), |g, v| g.scale(v["a"], -2.5)),
        ("add_scalar", named([("a", m(&[2, 3]))]), |g, v| g.add_scalar(v["a"], 0.7)),
        ("neg", named([("a", m(&[2, 3]))]), |g, v| g.neg(v["a"])),
        ("matmul", named([("a", m(&[3, 4])), ("b", m(&[4, 2]))]), |g, v| g.matmul(v["a"], v["b"])),
        ("transpose", named([("a", m(&[3, 4]))]), |g, v| g.transpose(v["a"])),
        ("reshape", named([("a", m(&[3, 4]))]), |g, v| g.reshape(v["a"], &[2, 6])),
        ("tanh", named([("a", m(&[3, 4]))]), |g, v| g.tanh(v["a"])),
        ("sigmoid", named([("a", m(&[3, 4]))]), |g, v| g.sigmoid(v["a"])),
        ("gelu", named([("a", m(&[3, 4]))]), |g, v| g.gelu(v["a"])),
        ("sum", named([("a", m(&[3, 4]))]), |g, v| g.sum(v["a"])),
        ("mean", named([("a", m(&[3, 4]))]), |g, v| g.mean(v["a"])),
        ("softmax", named([("a", m(&[3, 5]))]), |g, v| g.softmax(v["a"])),
        ("log_softmax", named([("a", m(&[3, 5]))]), |g, v| g.log_softmax(v["a"])),
        ("layer_norm", named([("a", m(&[3, 5]))]), |g, v| g.layer_norm(v["a"], 1e-5)),
        ("row_normalize", named([("a", m(&[3, 5]))]), |g, v| g.row_normalize(v["a"], 1e-8)),
        ("im2col", named([("a", m(&[5, 3]))]), |g, v| g.im2col(v["a"], 3, 2)),
        ("slice_cols", named([("a", m(&[3, 5]))]), |g, v| g.slice_cols(v["a"], 1, 4)),
        ("concat_cols", named([("a", m(&[3, 2])), ("b", m(&[3, 4]))]), |g, v| g.concat_cols(&[v["a"], v["b"], v["a"]])),
        ("concat_rows", named([("a", m(&[2, 3])), ("b", m(&[1, 3]))]), |g, v| g.concat_rows(&[v["a"], v["b"]])),
        ("gather_rows", named([("a", m(&[4, 3]))]), |g, v| g.gather_rows(v["a"], &[2, 0, 2, 3])),
        ("gather_per_row", named([("a", m(&[3, 5]))]), |g, v| {
            g.gather_per_row(v["a"], &[vec![0, 4], vec![1, 1], vec![3, 2]])
        }),
        ("replace_rows", named([("a", m(&[4, 3])), ("b", m(&[3]))]), |g, v| g.replace_rows(v["a"], v["b"], &[1, 3, 1])),
        ("rel_bias", named([("a", m(&[5]))]), |g, v| g.rel_bias(v["a"], 6, 2)),
        ("outer_add", named([("a", m(&[3, 2])), ("b", m(&[4, 2]))]), |g, v| g.outer_add(v["a"], v["b"])),
        ("rnnt_loss", named([("a", m(&[9, 4]))]), |g, v| {
            let lp = g.log_softmax(v["a"])?;
            g.rnnt_loss(lp, 3, &[2, 0])
        }),
    ]
}

/// Contracts an op's output with fixed random weights so every output
/// coordinate gets its own upstream gradient.
fn weighted_sum(g: &mut Graph, out: Var, wseed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(wseed), &shape));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn gradient_suite() -> Result<Verdict> {
    let mut worst = (0.0f64, "");
    let mut note = |err: f64, what: &'static str| {
        if err > worst.0 {
            worst = (err, what);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut kinds = 0;
    for round in 0..5 {
        for (name, inputs, build) in op_cases(&mut rng) {
            let wseed = rng.random::<u64>();
            note(grad_check(|g, v| build(g, v).and_then(|o| weighted_sum(g, o, wseed)), &inputs, 1e-5)?, name);
            if round == 0 {
                kinds += 1;
            }
        }
    }
    for _ in 0..5 {
        let c = rand_tensor(&mut rng, &[5, 3]);
        let q = rand_tensor(&mut rng, &[5, 3]);
        let mask = vec![0, 2, 3];
        let negs = sample_negatives(5, &mask, 3, &mut rng);
        let err = grad_check(
            |g, v| contrastive_loss(g, v["c"], v["q"], &mask, &negs, 0.1),
            &named([("c", c), ("q", q)]),
            1e-5,
        )?;
        note(err, "contrastive");
    }
    let cfg = ModelConfig { num_languages: 2, ..ModelConfig::default() };
    for (t, labels) in [(2, vec![1]), (3, vec![0, 2]), (3, vec![]), (2, vec![])] {
        let frames = rand_tensor(&mut rng, &[t, cfg.feature_dim]);
        let utt = Utterance { id: "u".into(), language: 1, labels, frames };
        let params = ParamVector::init(&cfg, rng.random())?;
        let err = grad_check(|g, v| utterance_loss(g, &Bound::from_named(v), &cfg, &utt), &params.to_named(), 1e-5)?;
        note(err, "end-to-end transducer");
    }
    Ok(verdict(
        worst.0 <= 1e-6,
        format!("{kinds} op kinds + contrastive + end-to-end, worst relative error {:.2e} ({})", worst.0, worst.1),
    ))
}

fn leap_hand_values() -> Result<Verdict> {
    let f = Quadratic::isotropic(vec![0.0], 1.0);
    let task = Task { id: 0, objective: &f, lr: 0.5, steps: 2, seed: 0, size: 1 };
    let t = inner_rollout(&[1.0], &task, &mut ChaCha8Rng::seed_from_u64(0))?;
    let d = pull_forward_distance(&t, &t, PathNorm::L2, 1.0)?;
    let g = meta_gradient(&t, PathNorm::L2, 1.0)?[0];
    let mut state = MetaState::new(vec![1.0], MetaOptimizerKind::Sgd, 0.1)?;
    leap_meta_step(&mut state, &[task], PathNorm::L2, 1.0)?;
    let theta = state.theta[0];
    let pass = (d - 0.4619140625).abs() <= 1e-9 && (g - 2.34375).abs() <= 1e-9 && theta == 0.765625;
    Ok(verdict(pass, format!("distance {d}, meta-gradient {g}, theta after one SGD meta step {theta}")))
}

fn reported_arithmetic() -> Result<Verdict> {
    let wers = [20.44, 18.74, 32.0, 25.03, 21.98, 18.52, 20.81, 23.19, 22.1];
    let words = [446215, 211163, 108736, 273150, 178392, 291183, 267438, 44070, 262894];
    let pairs: Vec<(f64, usize)> = wers.into_iter().zip(words).collect();
    let overall = weighted_overall_wer(&pairs)?;
    let rr = relative_reduction(19.13, 18.45)?;
    let pass = (overall - 21.65).abs() <= 0.01 && (rr - 3.55).abs() <= 0.01;
    Ok(verdict(pass, format!("weighted overall WER {overall:.4}, relative reduction {rr:.4}%")))
}

/// Mean path length of `steps`-step SGD rollouts, one per language, with
/// rollout streams that depend only on the seed and language.
fn mean_path_length(ckpt: &Checkpoint, by_language: &[Vec<&Utterance>], cfg: &RunConfig, steps: usize) -> Result<f64> {
    let mut total = 0.0;
    for (l, data) in by_language.iter().enumerate() {
        let objective =
            LanguageObjective::new(l, cfg.model.clone(), ckpt.params.clone(), data.clone(), cfg.batch_size)?;
        let task = Task { id: l, objective: &objective, lr: cfg.leap.inner_lr, steps, seed: 0, size: data.len() };
        let mut rng = seed::rng(cfg.seed, &format!("path-eval/{l}"));
        total += path_length(&inner_rollout(ckpt.params.flatten(), &task, &mut rng)?, cfg.leap.loss_scale)?;
    }
    Ok(total / by_language.len() as f64)
}

fn leap_efficacy() -> Result<Verdict> {
    let (mut path_rand, mut path_leap, mut val_rand, mut val_leap) = (0.0, 0.0, 0.0, 0.0);
    for s in SEEDS {
        let cfg = RunConfig { seed: s, ..RunConfig::default() }.resolve()?;
        let data = Data::prepare(&cfg)?;
        let (train, val) = data.split(&cfg)?;
        let by_language = group(&train, cfg.corpus.num_languages);
        let init = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init"))?;
        let sink = &mut MetricsWriter::sink();
        let leapt =
            run_leap(&init, &by_language, &cfg.leap, cfg.batch_size, cfg.stage_seed("leap"), cfg.profile, sink)?;
        path_rand += mean_path_length(&init, &by_language, &cfg, 20)?;
        path_leap += mean_path_length(&leapt, &by_language, &cfg, 20)?;
        let ft = |c: &Checkpoint| {
            finetune(
                c,
                &train,
                &val,
                &cfg.finetune,
                cfg.batch_size,
                cfg.stage_seed("finetune"),
                cfg.profile,
                &mut MetricsWriter::sink(),
            )
        };
        val_rand += ft(&init)?.1.best_val_loss;
        val_leap += ft(&leapt)?.1.best_val_loss;
    }
    let n = SEEDS.len() as f64;
    let (pr, pl, vr, vl) = (path_rand / n, path_leap / n, val_rand / n, val_leap / n);
    let reduction = 1.0 - pl / pr;
    Ok(verdict(
        reduction >= 0.20 && vl <= vr,
        format!(
            "K=20 path length {pr:.3} -> {pl:.3} ({:.1}% shorter), fine-tuned validation loss {vr:.4} -> {vl:.4}",
            100.0 * reduction
        ),
    ))
}

fn language_id_efficacy() -> Result<Verdict> {
    let mut rows = Vec::new();
    let mut pass = true;
    for s in SEEDS {
        let mut wer = [0.0; 2];
        for (i, lang_id) in [true, false].into_iter().enumerate() {
            let mut cfg = RunConfig { seed: s, use_lang_id: lang_id, ..RunConfig::default() };
            cfg.corpus.conflict = true;
            let cfg = cfg.resolve()?;
            let data = Data::prepare(&cfg)?;
            let (train, val) = data.split(&cfg)?;
            let init = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init"))?;
            let (ckpt, _) = finetune(
                &init,
                &train,
                &val,
                &cfg.finetune,
                cfg.batch_size,
                cfg.stage_seed("finetune"),
                cfg.profile,
                &mut MetricsWriter::sink(),
            )?;
            let test: Vec<&Utterance> = data.test.utterances.iter().collect();
            wer[i] = evaluate(&ckpt, &test, cfg.max_symbols_per_frame)?.overall;
        }
        pass &= wer[0] < wer[1];
        rows.push(format!("seed {s}: {:.2} vs {:.2}", wer[0], wer[1]));
    }
    Ok(verdict(pass, format!("WER with vs without language ID: {}", rows.join("; "))))
}

fn ssl_efficacy() -> Result<Verdict> {
    let (mut without, mut with) = (0.0, 0.0);
    for s in SEEDS {
        let mut cfg = RunConfig { seed: s, ..RunConfig::default() }.resolve()?;
        cfg.ssl.steps = 500;
        cfg.finetune.max_steps = 300;
        cfg.finetune.patience = 0;
        let data = Data::prepare(&cfg)?;
        let (train, val) = data.split(&cfg)?;
        let init = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init"))?;
        let pre =
            run_ssl_pretrain(&init, &train, &cfg.ssl, cfg.stage_seed("ssl"), cfg.profile, &mut MetricsWriter::sink())?;
        let ft = |c: &Checkpoint| {
            finetune(
                c,
                &train,
                &val,
                &cfg.finetune,
                cfg.batch_size,
                cfg.stage_seed("finetune"),
                cfg.profile,
                &mut MetricsWriter::sink(),
            )
        };
        without += ft(&init)?.1.final_val_loss;
        with += ft(&pre)?.1.final_val_loss;
    }
    let n = SEEDS.len() as f64;
    let (a, b) = (without / n, with / n);
    Ok(verdict(b < a, format!("validation loss after 300 updates: {a:.4} without pretraining, {b:.4} with")))
}

fn masking_statistics() -> Result<Verdict> {
    let spec = MaskSpec { mask_prob: 0.065, span_len: 10, force_min_one: false };
    let mut total = 0.0;
    for s in 0..200u64 {
        total += sample_mask(1000, &spec, &mut ChaCha8Rng::seed_from_u64(s))?.len() as f64 / 1000.0;
    }
    let mean = total / 200.0;
    let expected = 1.0 - (1.0f64 - 0.065).powi(10);
    Ok(verdict((mean - expected).abs() <= 0.02, format!("masked fraction {mean:.4}, expected {expected:.4}")))
}

fn determinism() -> Result<Verdict> {
    let mut cfg = RunConfig { seed: 17, ..RunConfig::default() }.resolve()?;
    cfg.ssl.steps = 20;
    cfg.leap.meta_steps = 5;
    cfg.finetune.max_steps = 100;
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    run_recipe(&cfg, a.path())?;
    run_recipe(&cfg, b.path())?;
    let mut same = true;
    for f in ["final.ckpt", "report.json", "wer.csv"] {
        same &= fs::read(a.path().join(f))? == fs::read(b.path().join(f))?;
    }
    Ok(verdict(same, "final checkpoint, report and WER table byte-identical across two runs"))
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "transducer loss matches brute-force alignment sum", Some(secs(10)), lattice_oracle),
        run(2, "gradient checks", Some(secs(60)), gradient_suite),
        run(3, "path-length meta-learning hand values", None, leap_hand_values),
        run(4, "word-weighted WER and relative reduction", Some(secs(1)), reported_arithmetic),
        run(5, "meta-learned initialization shortens training paths", Some(secs(15 * 60)), leap_efficacy),
        run(6, "language ID resolves conflicting languages", Some(secs(10 * 60)), language_id_efficacy),
        run(7, "contrastive pretraining speeds up fine-tuning", Some(secs(10 * 60)), ssl_efficacy),
        run(8, "span masking statistics", Some(secs(5)), masking_statistics),
        run(9, "recipe determinism", None, determinism),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
