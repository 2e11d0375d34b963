use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::error::{Error, Result};
use crate::leap::run_leap;
use crate::metrics::MetricsWriter;
use crate::model::encode_utterance;
use crate::ssl::run_ssl_pretrain;
use crate::synth::{generate, read_corpus, write_corpus, Corpus, CorpusManifest, Utterance};
use crate::transducer::{greedy_decode, LocaleWer, WerReport};

use super::config::{RunConfig, Stages};
use super::finetune::{finetune, FinetuneSummary};

/// Training and test corpora of one run.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Corpus,
    pub test: Corpus,
}

impl Data {
    /// Loads the corpus named in the config or generates it, then applies
    /// the training-data fraction.
    pub fn prepare(cfg: &RunConfig) -> Result<Data> {
        let (train, test) = match &cfg.corpus.dir {
            Some(dir) => {
                let (train, _) = read_corpus(&dir.join("train"))?;
                let (test, _) = read_corpus(&dir.join("test"))?;
                for c in [&train, &test] {
                    if c.feature_dim != cfg.corpus.feature_dim || c.num_languages != cfg.corpus.num_languages {
                        return Err(Error::input(format!(
                            "corpus in {} has {} languages of dim {}, config expects {} of dim {}",
                            dir.display(),
                            c.num_languages,
                            c.feature_dim,
                            cfg.corpus.num_languages,
                            cfg.corpus.feature_dim
                        )));
                    }
                }
                (train, test)
            }
            None => generate_pair(cfg)?,
        };
        Ok(Data { train: train.fraction(cfg.corpus.fraction)?, test })
    }

    /// Deterministic train/validation split of the training corpus.
    pub fn split(&self, cfg: &RunConfig) -> Result<(Vec<&Utterance>, Vec<&Utterance>)> {
        let (train, val) = self.train.split(cfg.stage_seed("split"));
        if train.is_empty() || val.is_empty() {
            return Err(Error::input(format!(
                "corpus of {} utterances is too small for a validation split",
                self.train.utterances.len()
            )));
        }
        Ok((train, val))
    }
}

fn generate_pair(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let base = cfg.stage_seed("corpus/codebooks");
    let train = generate(&cfg.corpus.train_spec()?, base, cfg.stage_seed("corpus/train"))?;
    let test = generate(&cfg.corpus.test_spec(), base, cfg.stage_seed("corpus/test"))?;
    Ok((train, test))
}

/// Writes the configured corpus to `dir/train` and `dir/test`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<(CorpusManifest, CorpusManifest)> {
    let (train, test) = generate_pair(cfg)?;
    let a = write_corpus(&train, cfg.stage_seed("corpus/train"), &dir.join("train"))?;
    let b = write_corpus(&test, cfg.stage_seed("corpus/test"), &dir.join("test"))?;
    Ok((a, b))
}

/// Greedy-decodes every utterance and scores it per language.
pub fn evaluate(ckpt: &Checkpoint, test: &[&Utterance], max_symbols_per_frame: usize) -> Result<WerReport> {
    let cfg = &ckpt.config;
    for u in test {
        if u.frames.cols() != cfg.feature_dim || u.language >= cfg.num_languages {
            return Err(Error::input(format!(
                "utterance {} (language {}, dim {}) does not fit a model with {} languages of dim {}",
                u.id,
                u.language,
                u.frames.cols(),
                cfg.num_languages,
                cfg.feature_dim
            )));
        }
    }
    let hyps: Vec<Vec<usize>> = test
        .par_iter()
        .map(|u| greedy_decode(&encode_utterance(&ckpt.params, cfg, u)?, &ckpt.params, cfg, max_symbols_per_frame))
        .collect::<Result<_>>()?;
    let mut locales = Vec::new();
    for l in 0..cfg.num_languages {
        let pairs: Vec<(&[usize], &[usize])> = test
            .iter()
            .zip(&hyps)
            .filter(|(u, _)| u.language == l)
            .map(|(u, h)| (u.labels.as_slice(), h.as_slice()))
            .collect();
        if !pairs.is_empty() {
            locales.push(LocaleWer::score(locale_name(l), pairs)?);
        }
    }
    WerReport::new(locales)
}

pub fn locale_name(language: usize) -> String {
    format!("lang{language}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub seed: u64,
    pub config_hash: String,
    pub stages: Stages,
    pub use_lang_id: bool,
    pub finetune: Option<FinetuneSummary>,
    pub wer: WerReport,
}

/// Runs pretraining, meta-initialization and fine-tuning in order and
/// evaluates the result on the test set.
///
/// Writes `resolved_config.json`, one checkpoint per stage (a disabled
/// stage passes its input through), per-stage metrics, `report.json` and
/// `wer.csv` into `out`. Artifacts of completed stages survive a failure.
pub fn run_recipe(cfg: &RunConfig, out: &Path) -> Result<RecipeReport> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.json"), cfg.to_json()?)?;
    let config_hash = cfg.hash()?;
    let data = Data::prepare(cfg)?;
    let (train, val) = data.split(cfg)?;

    let prov = |stage: &str, parent: Option<(&str, String)>| Provenance {
        stage: stage.to_string(),
        parent_file: parent.as_ref().map(|(f, _)| f.to_string()),
        parent_hash: parent.map(|(_, h)| h),
        config_hash: config_hash.clone(),
    };

    let mut ckpt = Checkpoint::init(cfg.model.clone(), cfg.stage_seed("init"))?;
    ckpt.provenance = Some(prov("init", None));
    let mut hash = ckpt.save(&out.join("init.ckpt"))?;
    let mut parent = "init.ckpt";

    if cfg.stages.ssl {
        let mut m = MetricsWriter::create(&out.join("ssl_metrics.jsonl"))?;
        ckpt = run_ssl_pretrain(&ckpt, &train, &cfg.ssl, cfg.stage_seed("ssl"), cfg.profile, &mut m)
            .and_then(|c| m.finish().map(|_| c))
            .map_err(|e| e.in_stage("ssl"))?;
    }
    ckpt.provenance = Some(prov("ssl", Some((parent, hash))));
    hash = ckpt.save(&out.join("ssl.ckpt"))?;
    parent = "ssl.ckpt";

    if cfg.stages.leap {
        let by_language = group(&train, cfg.corpus.num_languages);
        let mut m = MetricsWriter::create(&out.join("leap_metrics.jsonl"))?;
        ckpt = run_leap(&ckpt, &by_language, &cfg.leap, cfg.batch_size, cfg.stage_seed("leap"), cfg.profile, &mut m)
            .and_then(|c| m.finish().map(|_| c))
            .map_err(|e| e.in_stage("leap"))?;
    }
    ckpt.provenance = Some(prov("leap", Some((parent, hash))));
    hash = ckpt.save(&out.join("leap.ckpt"))?;
    parent = "leap.ckpt";

    let mut summary = None;
    if cfg.stages.finetune {
        let mut m = MetricsWriter::create(&out.join("finetune_metrics.jsonl"))?;
        let (c, s) = finetune(
            &ckpt,
            &train,
            &val,
            &cfg.finetune,
            cfg.batch_size,
            cfg.stage_seed("finetune"),
            cfg.profile,
            &mut m,
        )
        .and_then(|r| m.finish().map(|_| r))
        .map_err(|e| e.in_stage("finetune"))?;
        ckpt = c;
        summary = Some(s);
    }
    ckpt.provenance = Some(prov("finetune", Some((parent, hash))));
    ckpt.save(&out.join("final.ckpt"))?;

    let test: Vec<&Utterance> = data.test.utterances.iter().collect();
    let wer = evaluate(&ckpt, &test, cfg.max_symbols_per_frame).map_err(|e| e.in_stage("evaluate"))?;
    fs::write(out.join("wer.csv"), wer.to_csv())?;
    let report = RecipeReport {
        seed: cfg.seed,
        config_hash,
        stages: cfg.stages,
        use_lang_id: cfg.use_lang_id,
        finetune: summary,
        wer,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Groups utterances by language index.
pub fn group<'a>(utts: &[&'a Utterance], num_languages: usize) -> Vec<Vec<&'a Utterance>> {
    let mut out = vec![Vec::new(); num_languages];
    for u in utts {
        out[u.language].push(*u);
    }
    out
}
