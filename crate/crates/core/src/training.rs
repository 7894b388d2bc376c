//! ID-irrelevant region extraction, the entropy-maximization OOD loss, the
//! cross-entropy prompt loss and the few-shot training loop.
//!
//! The region set `J` is recomputed from the current text features on
//! every forward pass; it is a selection, not a differentiable quantity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{row_entropy, Tape, Value};
use crate::backbone::{ClassVocabulary, FrozenEncoder, PromptContext, CONTEXT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;
use crate::scoring::RegionProbs;
use crate::synthworld::FeatureRecord;

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5B0F;

/// How ID-irrelevant regions are picked from per-region class distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractionStrategy {
    /// Regions whose ground-truth class is not among the top `k`.
    Rank { k: usize },
    /// Regions whose entropy is below `ln(M) / 2`.
    Entropy,
    /// Regions whose ground-truth probability is below `1 / M`.
    Probability,
}

impl ExtractionStrategy {
    /// Rank strategy with `K = round(0.2·M)`.
    pub fn default_rank(m_classes: usize) -> Self {
        ExtractionStrategy::Rank {
            k: default_k(m_classes),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExtractionStrategy::Rank { .. } => "rank",
            ExtractionStrategy::Entropy => "entropy",
            ExtractionStrategy::Probability => "probability",
        }
    }
}

/// `K = 200` at `M = 1000`, scaled to the class count.
pub fn default_k(m_classes: usize) -> usize {
    (0.2 * m_classes as f64).round() as usize
}

/// Indices of ID-irrelevant regions, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionSet {
    pub indices: Vec<usize>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_subset_of(&self, other: &RegionSet) -> bool {
        self.indices.iter().all(|i| other.indices.binary_search(i).is_ok())
    }
}

/// 1-based rank of `class` in a descending sort of `row`; ties go to the
/// lower class index.
pub fn class_rank(row: &[f64], class: usize) -> usize {
    let p = row[class];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(m, &q)| q > p || (q == p && m < class))
        .count()
}

fn extract_rows(probs: &Matrix, gt: usize, strategy: ExtractionStrategy) -> Result<RegionSet> {
    let m = probs.cols();
    if gt >= m {
        return Err(Error::InvalidLabel {
            label: gt as i64,
            classes: m,
        });
    }
    let keep: Box<dyn Fn(&[f64]) -> bool> = match strategy {
        ExtractionStrategy::Rank { k } => {
            if k > m {
                return Err(Error::InvalidArgument(format!("K = {k} exceeds {m} classes")));
            }
            Box::new(move |row| class_rank(row, gt) > k)
        }
        ExtractionStrategy::Entropy => {
            let threshold = (m as f64).ln() / 2.0;
            Box::new(move |row| row_entropy(row) < threshold)
        }
        ExtractionStrategy::Probability => {
            let threshold = 1.0 / m as f64;
            Box::new(move |row| row[gt] < threshold)
        }
    };
    let indices = (0..probs.rows()).filter(|&i| keep(probs.row(i))).collect();
    Ok(RegionSet { indices })
}

pub fn extract_id_irrelevant(
    probs: &RegionProbs,
    gt: usize,
    strategy: ExtractionStrategy,
) -> Result<RegionSet> {
    extract_rows(&probs.probs, gt, strategy)
}

/// `-(1/|J|) Σ_{j∈J} H(p_j)` over rows of `probs`; a constant zero when `J`
/// is empty.
pub fn ood_loss(tape: &mut Tape, probs: Value, set: &RegionSet) -> Result<Value> {
    if set.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let picked = tape.gather_rows(probs, &set.indices)?;
    let h = tape.entropy_rows(picked);
    let mean = tape.mean(h);
    Ok(tape.scale(mean, -1.0))
}

/// Mean cross-entropy of `softmax(sim(f, g) / τ)` against `labels`, for a
/// batch of unit global features.
pub fn coop_loss(
    tape: &mut Tape,
    globals: &Matrix,
    text: Value,
    labels: &[usize],
    tau: f64,
) -> Result<Value> {
    let f = tape.constant(globals.clone());
    let sims = tape.cosine_unit(f, text)?;
    let p = tape.softmax_rows(sims, tau)?;
    let ce = tape.cross_entropy_rows(p, labels)?;
    Ok(tape.mean(ce))
}

/// Which terms of the objective are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy plus `λ` times the OOD regularizer.
    Locoop,
    /// Cross-entropy only; the regularizer is never built.
    Coop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau_train: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: ExtractionStrategy,
    pub objective: Objective,
    /// Cosine-annealed learning rate instead of a constant one.
    pub cosine_schedule: bool,
    /// Keep the context after every epoch.
    pub record_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.25,
            tau_train: 0.01,
            lr: 0.002,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            strategy: ExtractionStrategy::Rank { k: 200 },
            objective: Objective::Locoop,
            cosine_schedule: false,
            record_history: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with `K` scaled to `m_classes`.
    pub fn for_classes(m_classes: usize) -> Self {
        TrainConfig {
            strategy: ExtractionStrategy::default_rank(m_classes),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, m_classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.tau_train > 0.0) {
            return bad(format!("tau_train must be positive, got {}", self.tau_train));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let ExtractionStrategy::Rank { k } = self.strategy {
            if k > m_classes {
                return bad(format!("K = {k} exceeds {m_classes} classes"));
            }
        }
        Ok(())
    }
}

/// Loss terms recorded for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Value,
    pub coop: f64,
    pub ood: f64,
    /// Mean `|J| / (H·W)` over the batch; zero for CoOp-only objectives.
    pub irrelevant_fraction: f64,
}

fn labels_of(batch: &[&FeatureRecord], m: usize) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|r| {
            if r.label < 0 || r.label as usize >= m {
                Err(Error::InvalidLabel {
                    label: r.label as i64,
                    classes: m,
                })
            } else {
                Ok(r.label as usize)
            }
        })
        .collect()
}

/// Mean over the batch of `L_coop + λ·L_ood`, each image's `J` extracted from
/// its current region probabilities at `tau_train`.
pub fn batch_loss(
    tape: &mut Tape,
    text: Value,
    batch: &[&FeatureRecord],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (m, dim) = text.shape();
    let labels = labels_of(batch, m)?;
    let globals = Matrix::from_rows(&batch.iter().map(|r| r.global.clone()).collect::<Vec<_>>())?;
    if globals.cols() != dim {
        return Err(Error::Dimension(format!(
            "feature dim {} vs text dim {dim}",
            globals.cols()
        )));
    }
    let coop = coop_loss(tape, &globals, text, &labels, cfg.tau_train)?;
    let coop_value = tape.scalar(coop);
    if cfg.objective == Objective::Coop {
        return Ok(LossParts {
            total: coop,
            coop: coop_value,
            ood: 0.0,
            irrelevant_fraction: 0.0,
        });
    }

    let regions = batch[0].local.rows();
    let mut data = Vec::with_capacity(batch.len() * regions * dim);
    for r in batch {
        if r.local.rows() != regions || r.local.cols() != dim {
            return Err(Error::InconsistentShape(format!(
                "local features {:?} in a batch of ({regions}, {dim})",
                r.local.shape()
            )));
        }
        data.extend_from_slice(r.local.data());
    }
    let locals = tape.constant(Matrix::from_vec(batch.len() * regions, dim, data)?);
    let sims = tape.cosine_unit(locals, text)?;
    let probs = tape.softmax_rows(sims, cfg.tau_train)?;

    // Every selected row of image b carries weight 1 / (|J_b| · B).
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut selected = 0usize;
    for (b, &gt) in labels.iter().enumerate() {
        let block = Matrix::from_vec(
            regions,
            m,
            tape.value(probs).data()[b * regions * m..(b + 1) * regions * m].to_vec(),
        )?;
        let set = extract_rows(&block, gt, cfg.strategy)?;
        selected += set.len();
        let w = 1.0 / (set.len() as f64 * batch.len() as f64);
        for i in set.indices {
            rows.push(b * regions + i);
            weights.push(w);
        }
    }
    let ood = if rows.is_empty() {
        tape.constant(Matrix::scalar(0.0))
    } else {
        let picked = tape.gather_rows(probs, &rows)?;
        let h = tape.entropy_rows(picked);
        let w = tape.constant(Matrix::from_vec(weights.len(), 1, weights)?);
        let weighted = tape.mul(h, w)?;
        let s = tape.sum(weighted);
        tape.scale(s, -1.0)
    };
    let ood_value = tape.scalar(ood);
    let scaled = tape.scale(ood, cfg.lambda);
    let total = tape.add(coop, scaled)?;
    Ok(LossParts {
        total,
        coop: coop_value,
        ood: ood_value,
        irrelevant_fraction: selected as f64 / (batch.len() * regions) as f64,
    })
}

/// `L_coop + λ·L_ood` for one labelled record at the current context.
pub fn total_loss(
    rec: &FeatureRecord,
    ctx: &PromptContext,
    vocab: &ClassVocabulary,
    enc: &FrozenEncoder,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let omega = tape.constant(ctx.omega().clone());
    let text = enc.encode_on_tape(&mut tape, omega, vocab)?;
    let parts = batch_loss(&mut tape, text, &[rec], cfg)?;
    Ok(tape.scalar(parts.total))
}

/// Training-start context: i.i.d. `N(0, 0.02²)` from the training seed's own
/// stream, independent of any reference context.
pub fn initial_context(enc: &FrozenEncoder, seed: u64) -> PromptContext {
    let (n, d) = (enc.n_ctx(), enc.dim());
    let mut rng = SplitMix64::stream(seed, STREAM_INIT);
    let data = (0..n * d).map(|_| rng.normal() * CONTEXT_INIT_SCALE).collect();
    PromptContext::new(Matrix::from_vec(n, d, data).expect("context shape")).expect("finite init")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub coop: f64,
    pub ood: f64,
    pub irrelevant_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub context: PromptContext,
    pub trace: Vec<EpochLog>,
    /// Context after each epoch, when requested.
    pub history: Vec<PromptContext>,
}

/// Plain gradient descent on the context only, starting from
/// [`initial_context`] at `cfg.seed`.
pub fn train(
    train_set: &[FeatureRecord],
    vocab: &ClassVocabulary,
    enc: &FrozenEncoder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(initial_context(enc, cfg.seed), train_set, vocab, enc, cfg)
}

pub fn train_from(
    init: PromptContext,
    train_set: &[FeatureRecord],
    vocab: &ClassVocabulary,
    enc: &FrozenEncoder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    cfg.validate(vocab.m_classes())?;

    let mut ctx = init;
    let mut rng = SplitMix64::stream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss, mut coop, mut ood, mut frac) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let omega = tape.leaf(ctx.omega().clone());
            let text = enc.encode_on_tape(&mut tape, omega, vocab)?;
            let parts = batch_loss(&mut tape, text, &batch, cfg)?;
            let grad = tape.backward(parts.total)?.get(omega);

            let lr = if cfg.cosine_schedule {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.lr
            };
            let mut next = ctx.omega().clone();
            for (w, g) in next.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * g;
            }
            if !next.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "training diverged at epoch {epoch}; lower the learning rate"
                )));
            }
            ctx.set_omega(next);
            step += 1;

            loss += tape.scalar(parts.total);
            coop += parts.coop;
            ood += parts.ood;
            frac += parts.irrelevant_fraction;
        }
        let n = steps_per_epoch as f64;
        trace.push(EpochLog {
            epoch,
            loss: loss / n,
            coop: coop / n,
            ood: ood / n,
            irrelevant_fraction: frac / n,
        });
        if cfg.record_history {
            history.push(ctx.clone());
        }
    }
    Ok(TrainOutcome {
        context: ctx,
        trace,
        history,
    })
}

/// Small fixed problem for checking the gradient of the full objective.
#[derive(Debug, Clone)]
pub struct GradcheckToy {
    pub encoder: FrozenEncoder,
    pub vocab: ClassVocabulary,
    pub records: Vec<FeatureRecord>,
    pub context: PromptContext,
    pub config: TrainConfig,
}

/// Three classes, a 2x2 grid, `D = 8`, `N = 4`: two labelled images whose
/// cells mix class anchors with unrelated directions, `λ = 0.25`, `K = 1`.
pub fn gradcheck_toy(seed: u64) -> Result<GradcheckToy> {
    let (m, dim, n_ctx) = (3, 8, 4);
    let encoder = FrozenEncoder::new(crate::backbone::EncoderSpec { seed, n_ctx, dim })?;
    let vocab = ClassVocabulary::synthetic(seed, m, dim);
    let context = initial_context(&encoder, seed);
    let mut rng = SplitMix64::stream(seed, 0x6C0C);
    let records = (0..2)
        .map(|b| {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| rng.unit_vector(dim)).collect();
            let local = Matrix::from_rows(&rows)?;
            Ok(FeatureRecord {
                global: rng.unit_vector(dim),
                local,
                label: b as i32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = TrainConfig {
        strategy: ExtractionStrategy::Rank { k: 1 },
        ..TrainConfig::for_classes(m)
    };
    Ok(GradcheckToy {
        encoder,
        vocab,
        records,
        context,
        config,
    })
}

/// Maximum relative error of `∂L/∂ω` for the toy's full batch objective.
pub fn full_loss_gradcheck(toy: &GradcheckToy) -> Result<f64> {
    let batch: Vec<&FeatureRecord> = toy.records.iter().collect();
    crate::autodiff::gradcheck(
        |tape, omega| {
            let text = toy.encoder.encode_on_tape(tape, omega, &toy.vocab)?;
            Ok(batch_loss(tape, text, &batch, &toy.config)?.total)
        },
        toy.context.omega(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> RegionProbs {
        RegionProbs {
            probs: Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            temperature: 1.0,
        }
    }

    #[test]
    fn rank_with_ties_prefers_lower_index() {
        assert_eq!(class_rank(&[0.5, 0.3, 0.2], 0), 1);
        assert_eq!(class_rank(&[0.2, 0.5, 0.3], 0), 3);
        assert_eq!(class_rank(&[0.25, 0.25, 0.5], 0), 2);
        assert_eq!(class_rank(&[0.25, 0.25, 0.5], 1), 3);
    }

    #[test]
    fn rank_extraction_example() {
        let p = probs(&[&[0.5, 0.3, 0.2], &[0.2, 0.5, 0.3]]);
        let j = extract_id_irrelevant(&p, 0, ExtractionStrategy::Rank { k: 1 }).unwrap();
        assert_eq!(j.indices, vec![1]);
    }

    #[test]
    fn rank_extraction_degenerate_k() {
        let p = probs(&[&[0.5, 0.3, 0.2], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]]);
        let all = extract_id_irrelevant(&p, 2, ExtractionStrategy::Rank { k: 0 }).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
        let none = extract_id_irrelevant(&p, 2, ExtractionStrategy::Rank { k: 3 }).unwrap();
        assert!(none.is_empty());
        assert!(extract_id_irrelevant(&p, 2, ExtractionStrategy::Rank { k: 4 }).is_err());
    }

    #[test]
    fn invalid_gt_rejected() {
        let p = probs(&[&[0.5, 0.5]]);
        for s in [
            ExtractionStrategy::Rank { k: 1 },
            ExtractionStrategy::Entropy,
            ExtractionStrategy::Probability,
        ] {
            assert!(matches!(
                extract_id_irrelevant(&p, 2, s),
                Err(Error::InvalidLabel { .. })
            ));
        }
    }

    #[test]
    fn threshold_variants() {
        // ln(4)/2 ≈ 0.693; 1/M = 0.25
        let p = probs(&[
            &[0.97, 0.01, 0.01, 0.01],
            &[0.25, 0.25, 0.25, 0.25],
            &[0.1, 0.7, 0.1, 0.1],
        ]);
        let e = extract_id_irrelevant(&p, 0, ExtractionStrategy::Entropy).unwrap();
        assert_eq!(e.indices, vec![0]);
        let pr = extract_id_irrelevant(&p, 0, ExtractionStrategy::Probability).unwrap();
        assert_eq!(pr.indices, vec![2]);
    }

    #[test]
    fn ood_loss_values() {
        let mut t = Tape::new();
        let uniform = t.constant(Matrix::filled(3, 4, 0.25));
        let all = RegionSet { indices: vec![0, 1, 2] };
        let l = ood_loss(&mut t, uniform, &all).unwrap();
        assert!((t.scalar(l) + 4f64.ln()).abs() < 1e-12);

        let one_hot = t.constant(Matrix::row_vector(vec![1.0, 0.0, 0.0]));
        let l = ood_loss(&mut t, one_hot, &RegionSet { indices: vec![0] }).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let rows = t.constant(Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.9, 0.1]).unwrap());
        let l = ood_loss(&mut t, rows, &RegionSet { indices: vec![0, 1] }).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((t.scalar(l) + 0.5 * (2f64.ln() + h)).abs() < 1e-12);

        let l = ood_loss(&mut t, rows, &RegionSet::default()).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn coop_loss_oracle() {
        // f = e0, g0 has cos 0.9, g1 has cos 0.1
        let g = Matrix::from_vec(2, 3, vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0, 0.1, 0.0, (1.0f64 - 0.01).sqrt()]).unwrap();
        let f = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let text = t.constant(g);
        let l = coop_loss(&mut t, &f, text, &[0], 0.01).unwrap();
        let want = (1.0 + (10.0f64 - 90.0).exp()).ln();
        assert!((t.scalar(l) - want).abs() < 1e-12);

        let uniform = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let text = t.constant(uniform);
        let l = coop_loss(&mut t, &f, text, &[1], 0.01).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let text = t.constant(Matrix::zeros(2, 3));
        assert!(coop_loss(&mut t, &f, text, &[2], 0.01).is_err());
    }

    #[test]
    fn default_k_scales() {
        assert_eq!(default_k(1000), 200);
        assert_eq!(default_k(20), 4);
    }
}
