//! Frozen toy text encoder and the learnable prompt context.
//!
//! A prompt for class `m` is the token sequence `(ω_1, …, ω_N, c_m)`. The
//! encoder adds fixed sinusoidal positions, rescales every token to RMS 1
//! (a parameter-free pre-norm, as in pre-LN transformers), runs one
//! single-head self-attention layer with a residual connection around the
//! raw class token, reads out the last position, applies an output
//! projection and L2-normalizes.
//!
//! The pre-norm is what lets a context drawn at scale 0.02 steer the
//! output: only the direction of each context token matters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng::SplitMix64;

pub(crate) const STREAM_ENCODER: u64 = 0xE1C0_DE00;
pub(crate) const STREAM_VOCAB: u64 = 0x70CA_B000;
pub(crate) const STREAM_CONTEXT: u64 = 0xC0_4E47;

/// Standard deviation of freshly drawn context entries.
pub const CONTEXT_INIT_SCALE: f64 = 0.02;

/// Approximate row norm of the positional encodings, small next to a
/// freshly drawn context token.
pub const POSITION_NORM: f64 = 0.05;

/// The `N x D` learnable context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    omega: Matrix,
}

impl PromptContext {
    pub fn new(omega: Matrix) -> Result<Self> {
        if omega.rows() == 0 || omega.cols() == 0 {
            return Err(Error::InvalidArgument(
                "prompt context needs at least one token and one dimension".into(),
            ));
        }
        if !omega.is_finite() {
            return Err(Error::InvalidArgument("prompt context has non-finite entries".into()));
        }
        Ok(PromptContext { omega })
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn n_ctx(&self) -> usize {
        self.omega.rows()
    }

    pub fn dim(&self) -> usize {
        self.omega.cols()
    }

    pub(crate) fn set_omega(&mut self, omega: Matrix) {
        debug_assert_eq!(omega.shape(), self.omega.shape());
        self.omega = omega;
    }
}

/// Fixed per-class token embeddings `c_m`, unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    tokens: Matrix,
    names: Vec<String>,
}

impl ClassVocabulary {
    /// `m` seeded unit-norm tokens named `class_00`, `class_01`, ….
    pub fn synthetic(seed: u64, m: usize, dim: usize) -> Self {
        Self::synthetic_with_prefix(seed, m, dim, "class")
    }

    pub(crate) fn synthetic_with_prefix(seed: u64, m: usize, dim: usize, prefix: &str) -> Self {
        let mut rng = SplitMix64::stream(seed, STREAM_VOCAB);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| rng.unit_vector(dim)).collect();
        let names = (0..m).map(|i| format!("{prefix}_{i:02}")).collect();
        ClassVocabulary {
            tokens: Matrix::from_rows(&rows).expect("uniform rows"),
            names,
        }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn m_classes(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        hash_matrix(&mut h, &self.tokens);
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

/// Hyperparameters that fully determine a [`FrozenEncoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub seed: u64,
    pub n_ctx: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    positions: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    w_proj: Matrix,
}

impl FrozenEncoder {
    /// Weights are i.i.d. normal with standard deviation `1/√D`, drawn in the
    /// order `W_q, W_k, W_v, W_o, W_proj`.
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.n_ctx == 0 || spec.dim == 0 {
            return Err(Error::InvalidArgument("encoder needs n_ctx >= 1 and dim >= 1".into()));
        }
        let d = spec.dim;
        let mut rng = SplitMix64::stream(spec.seed, STREAM_ENCODER);
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = || {
            let data = (0..d * d).map(|_| rng.normal() * scale).collect();
            Matrix::from_vec(d, d, data).expect("square")
        };
        let (w_q, w_k, w_v, w_o, w_proj) = (draw(), draw(), draw(), draw(), draw());
        Ok(FrozenEncoder {
            positions: sinusoidal_positions(spec.n_ctx + 1, d),
            spec,
            w_q,
            w_k,
            w_v,
            w_o,
            w_proj,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn n_ctx(&self) -> usize {
        self.spec.n_ctx
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update((self.spec.n_ctx as u64).to_le_bytes());
        h.update((self.spec.dim as u64).to_le_bytes());
        for m in [
            &self.positions,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_proj,
        ] {
            hash_matrix(&mut h, m);
        }
        hex(&h.finalize())
    }

    fn check(&self, n_ctx: usize, dim: usize, vocab: &ClassVocabulary) -> Result<()> {
        if dim != self.dim() || vocab.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "context dim {dim}, vocabulary dim {}, encoder dim {}",
                vocab.dim(),
                self.dim()
            )));
        }
        if n_ctx != self.n_ctx() {
            return Err(Error::Dimension(format!(
                "context has {n_ctx} tokens, encoder expects {}",
                self.n_ctx()
            )));
        }
        Ok(())
    }

    /// Records the text features `g` (`M x D`, unit rows) on `tape` as a
    /// function of the context node `omega`. Encoder weights and class
    /// tokens enter as constants.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        omega: Value,
        vocab: &ClassVocabulary,
    ) -> Result<Value> {
        let (n_ctx, dim) = omega.shape();
        self.check(n_ctx, dim, vocab)?;

        let ctx_pos = Matrix::from_vec(n_ctx, dim, self.positions.data()[..n_ctx * dim].to_vec())?;
        let ctx_pos = tape.constant(ctx_pos);
        let w_k = tape.constant(self.w_k.clone());
        let w_v = tape.constant(self.w_v.clone());
        let w_o = tape.constant(self.w_o.clone());
        let w_proj = tape.constant(self.w_proj.clone());
        let rms = (dim as f64).sqrt();

        let x_ctx = tape.add(omega, ctx_pos)?;
        let x_ctx = tape.normalize_rows(x_ctx);
        let x_ctx = tape.scale(x_ctx, rms);
        let k_ctx = tape.matmul(x_ctx, w_k)?;
        let v_ctx = tape.matmul(x_ctx, w_v)?;

        // Class-position rows do not depend on ω: precompute them outside the tape.
        let last_pos = self.positions.row(n_ctx);
        let mut x_last = vocab.tokens().clone();
        for r in 0..x_last.rows() {
            for (x, p) in x_last.row_mut(r).iter_mut().zip(last_pos) {
                *x += p;
            }
        }
        let mut x_last_n = x_last.clone();
        for r in 0..x_last_n.rows() {
            let row = x_last_n.row_mut(r);
            let n = norm(row);
            for x in row.iter_mut() {
                *x *= rms / n;
            }
        }
        let q_last = x_last_n.matmul(&self.w_q)?;
        let k_last = x_last_n.matmul(&self.w_k)?;
        let v_last = x_last_n.matmul(&self.w_v)?;
        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();

        let mut outputs = Vec::with_capacity(vocab.m_classes());
        for m in 0..vocab.m_classes() {
            let q = tape.constant(Matrix::row_vector(q_last.row(m).to_vec()));
            let k_m = tape.constant(Matrix::row_vector(k_last.row(m).to_vec()));
            let v_m = tape.constant(Matrix::row_vector(v_last.row(m).to_vec()));
            let keys = tape.concat_rows(&[k_ctx, k_m])?;
            let values = tape.concat_rows(&[v_ctx, v_m])?;
            let keys_t = tape.transpose(keys);
            let scores = tape.matmul(q, keys_t)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let attn = tape.softmax_rows(scores, 1.0)?;
            let mixed = tape.matmul(attn, values)?;
            let update = tape.matmul(mixed, w_o)?;
            let resid = tape.constant(Matrix::row_vector(x_last.row(m).to_vec()));
            let hidden = tape.add(resid, update)?;
            outputs.push(tape.matmul(hidden, w_proj)?);
        }
        let stacked = tape.concat_rows(&outputs)?;
        Ok(tape.normalize_rows(stacked))
    }
}

/// Text features `g_m` for every class, `M x D` with unit rows.
pub fn encode_text(
    ctx: &PromptContext,
    vocab: &ClassVocabulary,
    enc: &FrozenEncoder,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let omega = tape.constant(ctx.omega().clone());
    let g = enc.encode_on_tape(&mut tape, omega, vocab)?;
    Ok(tape.value(g).clone())
}

/// Seeded context with i.i.d. `N(0, 0.02²)` entries, row-major draw order.
pub fn reference_context(
    enc: &FrozenEncoder,
    n_ctx: usize,
    dim: usize,
    seed: u64,
) -> Result<PromptContext> {
    if n_ctx != enc.n_ctx() || dim != enc.dim() {
        return Err(Error::Dimension(format!(
            "requested {n_ctx}x{dim} context for a {}x{} encoder",
            enc.n_ctx(),
            enc.dim()
        )));
    }
    let mut rng = SplitMix64::stream(seed, STREAM_CONTEXT);
    let data = (0..n_ctx * dim)
        .map(|_| rng.normal() * CONTEXT_INIT_SCALE)
        .collect();
    PromptContext::new(Matrix::from_vec(n_ctx, dim, data)?)
}

/// `PE[p, 2i] = sin(p / 10000^(2i/D))`, `PE[p, 2i+1] = cos(…)`, scaled so
/// each row has norm close to [`POSITION_NORM`].
fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let scale = POSITION_NORM / ((dim as f64) / 2.0).sqrt().max(1.0);
    let mut out = Matrix::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(p, i, v * scale);
        }
    }
    out
}

fn hash_matrix(h: &mut Sha256, m: &Matrix) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
