//! Seed-averaged sweeps of `K` or `λ`, and their CSV form.
//!
//! Every (value, seed) pair is an independent training run, so runs are
//! spread over the rayon pool; results are reassembled in input order and
//! do not depend on scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ClassVocabulary, FrozenEncoder, PromptContext};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, MetricResult, OodSplit};
use crate::scoring::ScoreKind;
use crate::synthworld::{build_synthetic, FeatureRecord, WorldConfig};
use crate::training::{train, ExtractionStrategy, TrainConfig, TrainOutcome};

/// Everything one training-plus-evaluation run needs.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub encoder: FrozenEncoder,
    pub vocab: ClassVocabulary,
    pub train: Vec<FeatureRecord>,
    pub id_test: Vec<FeatureRecord>,
    pub ood_splits: Vec<OodSplit>,
}

impl Benchmark {
    /// The synthetic world at `cfg`, with a single OOD split.
    pub fn synthetic(cfg: &WorldConfig) -> Result<Self> {
        let s = build_synthetic(cfg)?;
        Ok(Benchmark {
            encoder: s.encoder,
            vocab: s.vocab,
            train: s.world.train,
            id_test: s.world.id_test,
            ood_splits: vec![OodSplit {
                name: "synthetic_ood".into(),
                records: s.world.ood_test,
            }],
        })
    }

    /// One synthetic benchmark per seed, each with its own world.
    pub fn synthetic_seeds(cfg: &WorldConfig, seeds: &[u64]) -> Result<Vec<(u64, Benchmark)>> {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = WorldConfig { seed, ..cfg.clone() };
                Ok((seed, Benchmark::synthetic(&cfg)?))
            })
            .collect()
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<TrainOutcome> {
        train(&self.train, &self.vocab, &self.encoder, cfg)
    }

    pub fn evaluate(&self, ctx: &PromptContext, kind: ScoreKind) -> Result<EvalReport> {
        evaluate(ctx, &self.vocab, &self.encoder, &self.id_test, &self.ood_splits, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    K,
    Lambda,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::Lambda => "lambda",
        }
    }

    /// `base` with this parameter set to `value`. Sweeping `K` forces the
    /// rank strategy.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::K => {
                if !(value >= 0.0) || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "K must be a non-negative integer, got {value}"
                    )));
                }
                cfg.strategy = ExtractionStrategy::Rank { k: value as usize };
            }
            SweepParam::Lambda => cfg.lambda = value,
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(SweepParam::K),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// One CSV row: metrics averaged over seeds at one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub score: String,
    pub auroc: f64,
    pub fpr95: f64,
    /// Seeds averaged, separated by `;`.
    pub seeds: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Per-seed averages behind each row, `per_seed[row][seed]`.
    pub per_seed: Vec<Vec<MetricResult>>,
}

impl SweepResult {
    /// Row with the highest AUROC; the first one wins ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .reduce(|best, r| if r.auroc > best.auroc { r } else { best })
    }

    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }
}

pub const SWEEP_CSV_HEADER: &str = "param,value,score,auroc,fpr95,seeds";

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(SWEEP_CSV_HEADER.split(','))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SWEEP_CSV_HEADER {
        return Err(Error::Csv(format!(
            "expected header {SWEEP_CSV_HEADER:?}, found {:?}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Csv(e.to_string())))
        .collect()
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    rows_from_csv(&text)
}

/// Trains and evaluates every `(value, seed)` pair and averages over seeds.
/// Each run uses its benchmark's seed as the training seed.
pub fn run_sweep(
    benches: &[(u64, Benchmark)],
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    score: ScoreKind,
) -> Result<SweepResult> {
    if benches.is_empty() {
        return Err(Error::Empty("sweep seeds"));
    }
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|v| (0..benches.len()).map(move |b| (v, b)))
        .collect();
    let results: Vec<MetricResult> = jobs
        .par_iter()
        .map(|&(v, b)| {
            let (seed, bench) = &benches[b];
            let cfg = TrainConfig {
                seed: *seed,
                ..configs[v].clone()
            };
            let out = bench.train(&cfg)?;
            Ok(bench.evaluate(&out.context, score)?.average)
        })
        .collect::<Result<_>>()?;

    let seeds = benches
        .iter()
        .map(|(s, _)| s.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let n = benches.len() as f64;
    let mut rows = Vec::with_capacity(values.len());
    let mut per_seed = Vec::with_capacity(values.len());
    for (v, chunk) in results.chunks(benches.len()).enumerate() {
        rows.push(SweepRow {
            param: param.as_str().into(),
            value: values[v],
            score: score.as_str().into(),
            auroc: chunk.iter().map(|m| m.auroc).sum::<f64>() / n,
            fpr95: chunk.iter().map(|m| m.fpr95).sum::<f64>() / n,
            seeds: seeds.clone(),
        });
        per_seed.push(chunk.to_vec());
    }
    Ok(SweepResult { rows, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, auroc: f64) -> SweepRow {
        SweepRow {
            param: "k".into(),
            value,
            score: "glmcm".into(),
            auroc,
            fpr95: 1.0 - auroc,
            seeds: "0;1;2".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(0.0, 0.91), row(2.0, 0.9512345678901234), row(20.0, 0.5)];
        let text = rows_to_csv(&rows).unwrap();
        assert!(text.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(rows_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn empty_csv_keeps_header() {
        let text = rows_to_csv(&[]).unwrap();
        assert_eq!(text.trim_end(), SWEEP_CSV_HEADER);
        assert!(rows_from_csv(&text).unwrap().is_empty());
        assert!(rows_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn best_prefers_first_on_ties() {
        let result = SweepResult {
            rows: vec![row(0.0, 0.8), row(2.0, 0.9), row(4.0, 0.9)],
            per_seed: vec![],
        };
        assert_eq!(result.best().unwrap().value, 2.0);
    }

    #[test]
    fn param_application() {
        let base = TrainConfig::for_classes(20);
        let k = SweepParam::K.apply(&base, 10.0).unwrap();
        assert_eq!(k.strategy, ExtractionStrategy::Rank { k: 10 });
        assert!(SweepParam::K.apply(&base, 2.5).is_err());
        assert!(SweepParam::K.apply(&base, -1.0).is_err());
        let l = SweepParam::Lambda.apply(&base, 0.5).unwrap();
        assert_eq!(l.lambda, 0.5);
        assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
        assert!("tau".parse::<SweepParam>().is_err());
    }

    #[test]
    fn one_row_per_value() {
        let cfg = WorldConfig {
            m_classes: 3,
            o_ood_classes: 1,
            dim: 8,
            grid_h: 2,
            grid_w: 2,
            n_nuisance: 2,
            n_ctx: 2,
            shots: 2,
            pool_per_class: 2,
            id_test_per_class: 2,
            ood_test: 4,
            ..WorldConfig::default()
        };
        let benches = Benchmark::synthetic_seeds(&cfg, &[0, 1]).unwrap();
        let base = TrainConfig {
            epochs: 2,
            ..TrainConfig::for_classes(3)
        };
        let values = [0.0, 1.0, 3.0];
        let a = run_sweep(&benches, &base, SweepParam::K, &values, ScoreKind::Glmcm).unwrap();
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.per_seed.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2]);
        assert!(a.rows.iter().all(|r| r.seeds == "0;1"));
        let b = run_sweep(&benches, &base, SweepParam::K, &values, ScoreKind::Glmcm).unwrap();
        assert_eq!(a, b);
    }
}
