//! Binary containers, JSON manifests, few-shot sampling and CSV output.
//!
//! LCFM (features), little-endian:
//!
//! ```text
//! "LCFM" | version u32 = 1 | count u32 | H u32 | W u32 | D u32 | has_global u8
//! per record: label i32 | [global: D x f32 if has_global] | locals: H·W·D x f32
//! ```
//!
//! LCPC (prompt context): `"LCPC" | version u32 = 1 | N u32 | D u32 | N·D x f32`.
//!
//! Values are `f64` in memory and rounded to `f32` on write.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderSpec, PromptContext};
use crate::error::{Error, Result};
use crate::training::{EpochLog, TrainConfig};
use crate::matrix::{normalize, Matrix};
use crate::metrics::EvalReport;
use crate::rng::SplitMix64;
use crate::synthworld::{FeatureRecord, WorldConfig};

pub const LCFM_MAGIC: [u8; 4] = *b"LCFM";
pub const LCPC_MAGIC: [u8; 4] = *b"LCPC";
pub const FORMAT_VERSION: u32 = 1;
pub const LCFM_HEADER_LEN: usize = 25;
pub const LCPC_HEADER_LEN: usize = 16;

const STREAM_FEW_SHOT: u64 = 0xF5;

/// In-memory LCFM contents.
#[derive(Debug, Clone, PartialEq)]
pub struct LcfmContainer {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub has_global: bool,
    pub records: Vec<FeatureRecord>,
}

impl LcfmContainer {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let c = LcfmContainer {
            grid_h,
            grid_w,
            dim,
            has_global: true,
            records,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let regions = self.grid_h * self.grid_w;
        for (n, r) in self.records.iter().enumerate() {
            if r.local.shape() != (regions, self.dim) {
                return Err(Error::InconsistentShape(format!(
                    "record {n} has local shape {:?}, expected ({regions}, {})",
                    r.local.shape(),
                    self.dim
                )));
            }
            if r.global.len() != self.dim {
                return Err(Error::InconsistentShape(format!(
                    "record {n} has global dim {}, expected {}",
                    r.global.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn byte_len(&self) -> usize {
        lcfm_len(self.records.len(), self.grid_h * self.grid_w, self.dim, self.has_global)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&LCFM_MAGIC);
        for v in [
            FORMAT_VERSION,
            u32_of(self.records.len())?,
            u32_of(self.grid_h)?,
            u32_of(self.grid_w)?,
            u32_of(self.dim)?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.has_global as u8);
        for r in &self.records {
            out.extend_from_slice(&r.label.to_le_bytes());
            if self.has_global {
                put_f32s(&mut out, &r.global);
            }
            put_f32s(&mut out, r.local.data());
        }
        Ok(out)
    }

    /// Records without a stored global feature get the normalized mean of
    /// their local features.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        rd.magic(LCFM_MAGIC)?;
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = rd.u32()? as usize;
        let grid_h = rd.u32()? as usize;
        let grid_w = rd.u32()? as usize;
        let dim = rd.u32()? as usize;
        let has_global = match rd.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::InconsistentShape(format!("has_global flag {other}")));
            }
        };
        let regions = grid_h * grid_w;
        let expected = lcfm_len(count, regions, dim, has_global);
        if bytes.len() != expected {
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    expected: expected as u64,
                    found: bytes.len() as u64,
                });
            }
            return Err(Error::InconsistentShape(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - expected
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rd.i32()?;
            let global = if has_global { Some(rd.f32s(dim)?) } else { None };
            let local = Matrix::from_vec(regions, dim, rd.f32s(regions * dim)?)?;
            let global = global.unwrap_or_else(|| mean_local(&local));
            records.push(FeatureRecord { global, local, label });
        }
        Ok(LcfmContainer {
            grid_h,
            grid_w,
            dim,
            has_global,
            records,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn lcfm_len(count: usize, regions: usize, dim: usize, has_global: bool) -> usize {
    LCFM_HEADER_LEN + count * (4 + has_global as usize * 4 * dim + 4 * regions * dim)
}

fn mean_local(local: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; local.cols()];
    for row in local.iter_rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    normalize(&acc)
}

pub fn write_lcfm(path: impl AsRef<Path>, grid_h: usize, grid_w: usize, records: &[FeatureRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.global.len());
    LcfmContainer::new(grid_h, grid_w, dim, records.to_vec())?.write(path)
}

pub fn read_lcfm(path: impl AsRef<Path>) -> Result<LcfmContainer> {
    LcfmContainer::read(path)
}

pub fn context_to_bytes(ctx: &PromptContext) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(LCPC_HEADER_LEN + 4 * ctx.n_ctx() * ctx.dim());
    out.extend_from_slice(&LCPC_MAGIC);
    for v in [FORMAT_VERSION, u32_of(ctx.n_ctx())?, u32_of(ctx.dim())?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(&mut out, ctx.omega().data());
    Ok(out)
}

pub fn context_from_bytes(bytes: &[u8]) -> Result<PromptContext> {
    let mut rd = Reader::new(bytes);
    rd.magic(LCPC_MAGIC)?;
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = rd.u32()? as usize;
    let d = rd.u32()? as usize;
    let expected = LCPC_HEADER_LEN + 4 * n * d;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::InconsistentShape(format!(
            "{} trailing bytes after context",
            bytes.len() - expected
        )));
    }
    PromptContext::new(Matrix::from_vec(n, d, rd.f32s(n * d)?)?)
}

pub fn write_context(path: impl AsRef<Path>, ctx: &PromptContext) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, context_to_bytes(ctx)?).map_err(|e| Error::io(path, e))
}

pub fn read_context(path: impl AsRef<Path>) -> Result<PromptContext> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    context_from_bytes(&bytes)
}

/// Round every entry through `f32`, matching what a file round-trip yields.
pub fn quantize_context(ctx: &PromptContext) -> PromptContext {
    PromptContext::new(ctx.omega().map(|v| v as f32 as f64)).expect("finite context")
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::MagicMismatch { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Exactly `shots` records per class `0..m_classes`.
///
/// For each class in ascending order, the pool positions of that class are
/// collected in pool order and `shots` of them are picked by a partial
/// forward Fisher–Yates on the `(seed, few-shot)` stream (one stream shared
/// across classes). Picked positions are sorted, so the output is
/// class-major and follows pool order within a class.
pub fn few_shot_sample(
    pool: &[FeatureRecord],
    m_classes: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<FeatureRecord>> {
    let mut rng = SplitMix64::stream(seed, STREAM_FEW_SHOT);
    let mut out = Vec::with_capacity(m_classes * shots);
    for class in 0..m_classes {
        let members: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class as i32)
            .map(|(i, _)| i)
            .collect();
        if members.len() < shots {
            return Err(Error::InsufficientPool {
                class,
                available: members.len(),
                requested: shots,
            });
        }
        let mut picked: Vec<usize> = rng
            .choose_indices(members.len(), shots)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    Ok(out)
}

/// Sidecar for a generated or exported feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub splits: Vec<SplitDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub world: Option<WorldConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub encoder: Option<EncoderSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub provenance: Option<serde_json::Value>,
    pub seeds: SeedRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub name: String,
    pub file: String,
    pub role: SplitRole,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    TrainPool,
    Train,
    IdTest,
    OodTest,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedRegistry {
    pub world: u64,
    pub encoder: u64,
    pub reference_context: u64,
}

impl Manifest {
    pub fn m_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

/// Sidecar for an LCPC file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextManifest {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
    pub shots: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const METRICS_CSV_HEADER: &str = "split,score,auroc,fpr95,n_id,n_ood,seed";

/// One row per split followed by an `average` row. Floats use Rust's
/// shortest round-trip formatting.
pub fn metrics_csv(report: &EvalReport, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    let rows = report
        .splits
        .iter()
        .map(|(n, m)| (n.as_str(), m))
        .chain(std::iter::once(("average", &report.average)));
    for (name, m) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{seed}\n",
            report.score.as_str(),
            m.auroc,
            m.fpr95,
            m.n_id,
            m.n_ood
        ));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
