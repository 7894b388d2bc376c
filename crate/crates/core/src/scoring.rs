//! Matching probabilities and the MCM / GL-MCM detection scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_into;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::synthworld::FeatureRecord;

/// Temperature used by both score terms at test time.
pub const TEST_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Mcm,
    Glmcm,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Mcm => "mcm",
            ScoreKind::Glmcm => "glmcm",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcm" => Ok(ScoreKind::Mcm),
            "glmcm" | "gl-mcm" => Ok(ScoreKind::Glmcm),
            other => Err(Error::InvalidArgument(format!("unknown score kind {other:?}"))),
        }
    }
}

/// Per-region class distributions of one image, `(H·W) x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProbs {
    pub probs: Matrix,
    pub temperature: f64,
}

impl RegionProbs {
    pub fn m_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn regions(&self) -> usize {
        self.probs.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub mcm: f64,
    pub glmcm: f64,
    pub is_id: bool,
}

impl ScoreReport {
    pub fn get(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Mcm => self.mcm,
            ScoreKind::Glmcm => self.glmcm,
        }
    }
}

fn check(dim: usize, text: &Matrix, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if text.cols() != dim {
        return Err(Error::Dimension(format!(
            "feature dim {dim} vs text feature dim {}",
            text.cols()
        )));
    }
    if text.rows() == 0 {
        return Err(Error::Empty("text features"));
    }
    Ok(())
}

fn probs_into(f: &[f64], text: &Matrix, tau: f64, sims: &mut [f64], out: &mut [f64]) {
    for (s, g) in sims.iter_mut().zip(text.iter_rows()) {
        *s = dot(f, g);
    }
    softmax_into(sims, tau, out);
}

/// `softmax_m(sim(f, g_m) / τ)` for a unit feature `f` against unit text rows.
pub fn global_probs(f: &[f64], text: &Matrix, tau: f64) -> Result<Vec<f64>> {
    check(f.len(), text, tau)?;
    let mut sims = vec![0.0; text.rows()];
    let mut out = vec![0.0; text.rows()];
    probs_into(f, text, tau, &mut sims, &mut out);
    Ok(out)
}

/// Row `i` is [`global_probs`] of local feature `i`.
pub fn region_probs(rec: &FeatureRecord, text: &Matrix, tau: f64) -> Result<RegionProbs> {
    check(rec.local.cols(), text, tau)?;
    let m = text.rows();
    let mut probs = Matrix::zeros(rec.local.rows(), m);
    let mut sims = vec![0.0; m];
    for i in 0..rec.local.rows() {
        probs_into(rec.local.row(i), text, tau, &mut sims, probs.row_mut(i));
    }
    Ok(RegionProbs {
        probs,
        temperature: tau,
    })
}

fn row_max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability of the global feature at `τ = 1`.
pub fn mcm_score(rec: &FeatureRecord, text: &Matrix) -> Result<f64> {
    Ok(row_max(&global_probs(&rec.global, text, TEST_TEMPERATURE)?))
}

/// MCM plus the maximum softmax probability over all regions and classes.
pub fn glmcm_score(rec: &FeatureRecord, text: &Matrix) -> Result<f64> {
    let local = region_probs(rec, text, TEST_TEMPERATURE)?;
    Ok(mcm_score(rec, text)? + row_max(local.probs.data()))
}

pub fn score_record(rec: &FeatureRecord, text: &Matrix) -> Result<ScoreReport> {
    let mcm = mcm_score(rec, text)?;
    let local = region_probs(rec, text, TEST_TEMPERATURE)?;
    Ok(ScoreReport {
        mcm,
        glmcm: mcm + row_max(local.probs.data()),
        is_id: rec.is_id(),
    })
}

/// Scores every record; output order follows input order either way.
pub fn score_records(
    records: &[FeatureRecord],
    text: &Matrix,
    parallel: bool,
) -> Result<Vec<ScoreReport>> {
    if parallel {
        records.par_iter().map(|r| score_record(r, text)).collect()
    } else {
        records.iter().map(|r| score_record(r, text)).collect()
    }
}
