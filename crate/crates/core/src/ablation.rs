//! Ablation studies on the synthetic dataset.
//!
//! A study is a list of variants, each a set of config overrides on top of a
//! base [`Settings`]. Every variant is trained for every configured seed and
//! evaluated on the shared test split. Phase 1 only depends on part of the
//! configuration, so variants that differ in Phase 2 settings alone (loss
//! weights, `mu`, the loss mode) reuse one Phase 1 run per seed.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{Result, SitarError};
use crate::eval::{evaluate, EvalConfig};
use crate::experiment::{run_phase1, run_phase2, synthetic_data, SyntheticData};
use crate::trainer::{TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    GroupLoss,
    Order,
    Layout,
    Mu,
    Gamma,
    Beta,
}

pub const STUDIES: [Study; 6] = [
    Study::GroupLoss,
    Study::Order,
    Study::Layout,
    Study::Mu,
    Study::Gamma,
    Study::Beta,
];

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::GroupLoss => "group_loss",
            Study::Order => "order",
            Study::Layout => "layout",
            Study::Mu => "mu",
            Study::Gamma => "gamma",
            Study::Beta => "beta",
        }
    }

    /// The study's variants as `(label, overrides)`.
    pub fn variants(self) -> Vec<Variant> {
        let v = |label: &str, kv: &[(&str, &str)]| Variant {
            label: label.to_string(),
            overrides: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        let sweep = |key: &str, values: &[&str]| -> Vec<Variant> {
            values
                .iter()
                .map(|x| v(&format!("{key}={x}"), &[(key, x)]))
                .collect()
        };
        match self {
            Study::GroupLoss => vec![
                v("default", &[]),
                v("beta=0", &[("beta", "0")]),
                v("pseudo_consistency", &[("phase2_loss", "pseudo_consistency")]),
            ],
            Study::Order => sweep("order", &["normal", "random", "reverse"]),
            // 3x3 + 2x2 grids, then 4x4 + 3x3 grids at the same side (smaller
            // frames) and on a larger side (frames no smaller than before).
            Study::Layout => vec![
                v(
                    "8+4 @96",
                    &[("fast_frames", "8"), ("slow_frames", "4"), ("fast_frame_side", "32"), ("slow_frame_side", "48")],
                ),
                v(
                    "16+8 @96",
                    &[("fast_frames", "16"), ("slow_frames", "8"), ("fast_frame_side", "24"), ("slow_frame_side", "32")],
                ),
                v(
                    "16+8 @144",
                    &[("fast_frames", "16"), ("slow_frames", "8"), ("fast_frame_side", "36"), ("slow_frame_side", "48")],
                ),
            ],
            Study::Mu => sweep("mu", &["2", "4", "6", "8"]),
            Study::Gamma => sweep("gamma", &["0.1", "0.2", "0.4", "0.6", "0.8", "1.0"]),
            Study::Beta => sweep("beta", &["0.5", "1", "2", "4"]),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = SitarError;

    fn from_str(s: &str) -> Result<Self> {
        STUDIES.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = STUDIES.iter().map(|s| s.as_str()).collect();
            SitarError::Argument(format!("unknown study '{s}'; valid studies: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn apply(&self, base: &Settings) -> Result<Settings> {
        let mut s = base.clone();
        for (k, v) in &self.overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub top1_mean: f64,
    pub top1: Vec<f64>,
    pub phase1_top1_mean: f64,
    /// Final-epoch loss components, averaged over seeds.
    pub l_sup: f64,
    pub l_ic: f64,
    pub l_gc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub study: Study,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Aligned plain-text table, one row per variant.
    pub fn to_table(&self) -> String {
        let header = ["variant", "top1", "phase1", "l_sup", "l_ic", "l_gc", "seconds"];
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    format!("{:.4}", r.top1_mean),
                    format!("{:.4}", r.phase1_top1_mean),
                    format!("{:.4}", r.l_sup),
                    format!("{:.4}", r.l_ic),
                    format!("{:.4}", r.l_gc),
                    format!("{:.1}", r.seconds),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[&str]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("study: {}  seeds: {:?}\n", self.study, self.seeds);
        out += &line(&header);
        for r in &rows {
            out += &line(&r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// Writes `ablation_<study>.json` and `ablation_<study>.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| SitarError::io(dir, e))?;
        let json = dir.join(format!("ablation_{}.json", self.study));
        let text = dir.join(format!("ablation_{}.txt", self.study));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, body + "\n").map_err(|e| SitarError::io(&json, e))?;
        fs::write(&text, self.to_table()).map_err(|e| SitarError::io(&text, e))?;
        Ok((json, text))
    }
}

/// The part of a run's configuration that Phase 1 depends on.
fn phase1_key(settings: &Settings, cfg: &TrainConfig) -> String {
    let defaults = TrainConfig::default();
    let normalized = TrainConfig {
        phase2_epochs: 0,
        mu: defaults.mu,
        temperature: defaults.temperature,
        gamma: defaults.gamma,
        beta: defaults.beta,
        pseudo_threshold: None,
        phase2_loss: defaults.phase2_loss,
        consistency_threshold: defaults.consistency_threshold,
        ..cfg.clone()
    };
    format!(
        "{}|{}",
        serde_json::to_string(&normalized).expect("config serializes"),
        serde_json::to_string(&settings.encoder).expect("spec serializes")
    )
}

type Phase1Cache = HashMap<String, (TrainOutcome, f64)>;

fn run_variant(
    variant: &Variant,
    base: &Settings,
    data: &SyntheticData,
    cache: &mut Phase1Cache,
) -> Result<AblationRow> {
    let started = Instant::now();
    let settings = variant.apply(base)?;
    let encoder = settings.encoder_spec(data.labeled.num_classes)?;
    let mut top1 = Vec::new();
    let mut p1_top1 = Vec::new();
    let mut finals = Vec::new();
    for &seed in &base.seeds {
        let cfg = TrainConfig {
            seed,
            ..settings.train.clone()
        };
        cfg.validate()?;
        let key = format!("{seed}|{}", phase1_key(&settings, &cfg));
        if !cache.contains_key(&key) {
            let p1 = run_phase1(&cfg, &encoder, data)?;
            let eval_cfg = EvalConfig::from_superimage(&cfg.superimage);
            let acc = evaluate(&p1.model, &data.test, &eval_cfg, &data.source)?.top1;
            cache.insert(key.clone(), (p1, acc));
        }
        let (p1, acc) = &cache[&key];
        let result = run_phase2(&cfg, data, p1, *acc)?;
        log::info!(
            "{} seed {seed}: phase1 {:.4} phase2 {:.4}",
            variant.label,
            result.phase1_top1,
            result.phase2_top1
        );
        top1.push(result.phase2_top1);
        p1_top1.push(result.phase1_top1);
        if let Some(m) = result.final_phase2() {
            finals.push((m.l_sup, m.l_ic, m.l_gc));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let column = |f: fn(&(f64, f64, f64)) -> f64| mean(&finals.iter().map(f).collect::<Vec<_>>());
    Ok(AblationRow {
        label: variant.label.clone(),
        overrides: variant.overrides.clone(),
        top1_mean: mean(&top1),
        top1,
        phase1_top1_mean: mean(&p1_top1),
        l_sup: column(|t| t.0),
        l_ic: column(|t| t.1),
        l_gc: column(|t| t.2),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every variant of `study` over `base.seeds` on the synthetic data
/// described by `base`. With `parallel`, variants run on separate threads
/// and do not share Phase 1 runs.
pub fn run_study(study: Study, base: &Settings, parallel: bool) -> Result<AblationReport> {
    if base.seeds.is_empty() {
        return Err(SitarError::Config("'seeds' must list at least one seed".into()));
    }
    let variants = study.variants();
    for v in &variants {
        v.apply(base)?.train.superimage.side()?;
    }
    let data = synthetic_data(&base.synthetic, &base.sizes, base.split_seed)?;
    let rows = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = variants
                .iter()
                .map(|v| {
                    let data = &data;
                    scope.spawn(move || run_variant(v, base, data, &mut Phase1Cache::new()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut cache = Phase1Cache::new();
        variants
            .iter()
            .map(|v| run_variant(v, base, &data, &mut cache))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(AblationReport {
        study,
        seeds: base.seeds.clone(),
        rows,
    })
}
