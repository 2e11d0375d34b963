use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::transducer::relative_reduction;

use super::config::{RunConfig, Stages};
use super::recipe::run_recipe;

/// Initialization strategy of one ablation cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NoPretrain,
    SslOnly,
    LeapSsl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NoPretrain, Method::SslOnly, Method::LeapSsl];

    pub fn stages(self) -> Stages {
        match self {
            Method::NoPretrain => Stages { ssl: false, leap: false, finetune: true },
            Method::SslOnly => Stages { ssl: true, leap: false, finetune: true },
            Method::LeapSsl => Stages { ssl: true, leap: true, finetune: true },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::NoPretrain => "no-pretrain",
            Method::SslOnly => "ssl-only",
            Method::LeapSsl => "leap-ssl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub lang_id: bool,
    pub method: Method,
    pub overall_wer: f64,
    pub locale_wer: Vec<(String, f64)>,
    /// Percent WER reduction against no-pretrain with the same seed and
    /// language-ID setting; `None` when that baseline is zero.
    pub relative_reduction: Option<f64>,
}

/// Runs the {language ID on, off} x {no-pretrain, SSL only, LEAP + SSL}
/// grid for every seed, each cell in its own subdirectory of `out`, and
/// writes `ablation.json` and `ablation.csv`.
pub fn ablate(base: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for lang_id in [true, false] {
            let mut baseline = None;
            for method in Method::ALL {
                let cfg =
                    RunConfig { seed, use_lang_id: lang_id, stages: method.stages(), ..base.clone() }.resolve()?;
                let dir = out
                    .join(format!("seed{seed}"))
                    .join(if lang_id { "lang-id" } else { "no-lang-id" })
                    .join(method.name());
                let report = run_recipe(&cfg, &dir).map_err(|e| e.in_stage(&format!("ablation {}", dir.display())))?;
                let wer = report.wer.overall;
                let base_wer = *baseline.get_or_insert(wer);
                rows.push(AblationRow {
                    seed,
                    lang_id,
                    method,
                    overall_wer: wer,
                    locale_wer: report.wer.locales.iter().map(|l| (l.locale.clone(), l.wer)).collect(),
                    relative_reduction: relative_reduction(base_wer, wer).ok(),
                });
            }
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    fs::write(out.join("ablation.csv"), to_csv(&rows))?;
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("seed,lang_id,method,overall_wer,relative_reduction\n");
    for r in rows {
        let rr = r.relative_reduction.map_or(String::new(), |v| format!("{v:.4}"));
        writeln!(s, "{},{},{},{:.4},{rr}", r.seed, r.lang_id, r.method.name(), r.overall_wer)
            .expect("writing to a String");
    }
    s
}
