//! The `locoop` command-line interface.
//!
//! Exit status: 0 on success, 1 for usage errors (bad flags or values),
//! 2 for data errors (missing or malformed files, failed checks).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{reference_context, ClassVocabulary, EncoderSpec, FrozenEncoder, PromptContext};
use crate::error::Error;
use crate::metrics::{evaluate, OodSplit};
use crate::report::render_svg;
use crate::scoring::ScoreKind;
use crate::store::{
    few_shot_sample, metrics_csv, read_context, read_json, read_lcfm, write_context, write_json, write_lcfm,
    write_text, ContextManifest, Manifest, SeedRegistry, SplitDescriptor, SplitRole, TrainingLog,
};
use crate::sweep::{read_sweep_csv, run_sweep, Benchmark, SweepParam};
use crate::synthworld::{build_synthetic, FeatureRecord, WorldConfig};
use crate::training::{default_k, full_loss_gradcheck, gradcheck_toy, train, ExtractionStrategy, Objective, TrainConfig};

/// Environment variable that overrides every `--seed` flag.
pub const SEED_ENV: &str = "LOCOOP_SEED";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "locoop", version, about = "Few-shot OOD detection with locally regularized prompt learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark: LCFM splits plus manifest.json.
    GenSynth(GenSynthArgs),
    /// Learn a prompt context from a few-shot split.
    Train(TrainArgs),
    /// Score ID and OOD sets and report AUROC / FPR95.
    Eval(EvalArgs),
    /// Sweep K or lambda, averaging over seeds.
    Sweep(SweepArgs),
    /// Check the objective's gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Plot a sweep CSV as SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// World configuration JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Rank,
    Entropy,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Locoop,
    Coop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Mcm,
    Glmcm,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Mcm => ScoreKind::Mcm,
            ScoreArg::Glmcm => ScoreKind::Glmcm,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Rank cut-off; defaults to round(0.2·M).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Rank)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Locoop)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub tau_train: f64,
    /// Cosine-annealed learning rate.
    #[arg(long)]
    pub cosine: bool,
}

impl HyperArgs {
    fn config(&self, m_classes: usize, seed: u64) -> TrainConfig {
        let strategy = match self.strategy {
            StrategyArg::Rank => ExtractionStrategy::Rank {
                k: self.k.unwrap_or_else(|| default_k(m_classes)),
            },
            StrategyArg::Entropy => ExtractionStrategy::Entropy,
            StrategyArg::Probability => ExtractionStrategy::Probability,
        };
        TrainConfig {
            lambda: self.lambda,
            tau_train: self.tau_train,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            strategy,
            objective: match self.objective {
                ObjectiveArg::Locoop => Objective::Locoop,
                ObjectiveArg::Coop => Objective::Coop,
            },
            cosine_schedule: self.cosine,
            record_history: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// LCFM with labelled images (a pool or a ready few-shot split).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output LCPC; a `.json` sidecar and a `.log.json` training log are
    /// written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained LCPC context; its `.json` sidecar must sit next to it.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub ctx: Option<PathBuf>,
    /// Score with the untrained reference context (zero-shot baseline).
    #[arg(long, requires = "manifest")]
    pub baseline: bool,
    /// Dataset manifest; only needed with `--baseline`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub ood: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreArg::Glmcm)]
    pub score: ScoreArg,
    /// Write the metrics CSV here as well as to standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_param)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<f64>,
    /// Comma-separated seeds to average over.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Synthetic world configuration; one world per seed. Used when
    /// `--train` is absent.
    #[arg(long, conflicts_with_all = ["train", "manifest", "id", "ood"])]
    pub config: Option<PathBuf>,
    #[arg(long, requires_all = ["manifest", "id", "ood"])]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub ood: Vec<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum, default_value_t = ScoreArg::Glmcm)]
    pub score: ScoreArg,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub svg: PathBuf,
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render().ansi());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Report(a) => report_cmd(a, out),
    }
}

/// `LOCOOP_SEED` when set, otherwise `flag`.
fn effective_seed(flag: Option<u64>) -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments) -> CliResult<()> {
    out.write_fmt(msg)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Failure::Data(Error::io("<stdout>", e)))
}

fn gen_synth(a: GenSynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg: WorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(seed) = effective_seed(a.seed)? {
        cfg.seed = seed;
    }
    let setup = build_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let w = &setup.world;
    let splits: [(&str, SplitRole, &[FeatureRecord]); 4] = [
        ("train_pool", SplitRole::TrainPool, &w.pool),
        ("train", SplitRole::Train, &w.train),
        ("id_test", SplitRole::IdTest, &w.id_test),
        ("ood_test", SplitRole::OodTest, &w.ood_test),
    ];
    let mut descriptors = Vec::new();
    for (name, role, records) in splits {
        let file = format!("{name}.lcfm");
        write_lcfm(a.out.join(&file), cfg.grid_h, cfg.grid_w, records)?;
        descriptors.push(SplitDescriptor {
            name: name.into(),
            file,
            role,
            count: records.len(),
        });
    }
    let manifest = Manifest {
        class_names: setup.vocab.names().to_vec(),
        splits: descriptors,
        world: Some(cfg.clone()),
        encoder: Some(cfg.encoder_spec()),
        provenance: None,
        seeds: SeedRegistry {
            world: cfg.seed,
            encoder: cfg.seed,
            reference_context: cfg.seed,
        },
    };
    manifest.write(a.out.join("manifest.json"))?;
    say(
        out,
        format_args!(
            "wrote {} ({} pool, {} train, {} ID test, {} OOD test images)",
            a.out.display(),
            w.pool.len(),
            w.train.len(),
            w.id_test.len(),
            w.ood_test.len()
        ),
    )
}

/// Encoder and vocabulary named by a dataset manifest. The vocabulary is
/// drawn from the encoder seed.
fn model_from_manifest(m: &Manifest) -> CliResult<(FrozenEncoder, ClassVocabulary)> {
    let spec = m
        .encoder
        .ok_or_else(|| Error::InvalidArgument("manifest has no encoder spec".into()))?;
    model_from_spec(spec, &m.class_names)
}

fn model_from_spec(spec: EncoderSpec, names: &[String]) -> CliResult<(FrozenEncoder, ClassVocabulary)> {
    let encoder = FrozenEncoder::new(spec)?;
    let vocab = ClassVocabulary::synthetic(spec.seed, names.len(), spec.dim);
    if vocab.names() != names {
        return Err(Error::InvalidArgument(
            "class names do not match the synthetic vocabulary for this encoder seed".into(),
        )
        .into());
    }
    Ok((encoder, vocab))
}

fn load_records(path: &Path, dim: usize, m_classes: usize, labelled: bool) -> CliResult<Vec<FeatureRecord>> {
    let c = read_lcfm(path)?;
    if c.dim != dim {
        return Err(Error::Dimension(format!(
            "{}: feature dim {} but the encoder uses {dim}",
            path.display(),
            c.dim
        ))
        .into());
    }
    if labelled {
        if let Some(r) = c.records.iter().find(|r| r.label < 0 || r.label as usize >= m_classes) {
            return Err(Error::InvalidLabel {
                label: r.label as i64,
                classes: m_classes,
            }
            .into());
        }
    }
    Ok(c.records)
}

fn sidecar_path(ctx: &Path) -> PathBuf {
    ctx.with_extension("json")
}

fn log_path(ctx: &Path) -> PathBuf {
    ctx.with_extension("log.json")
}

fn check_hyper(h: &HyperArgs, m: usize) -> CliResult<()> {
    h.config(m, 0)
        .validate(m)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if h.shots == 0 {
        return Err(Failure::Usage("--shots must be positive".into()));
    }
    if h.epochs == 0 {
        return Err(Failure::Usage("--epochs must be positive".into()));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = effective_seed(Some(a.seed))?.unwrap_or(a.seed);
    let manifest = Manifest::read(&a.manifest)?;
    let (encoder, vocab) = model_from_manifest(&manifest)?;
    let m = vocab.m_classes();
    check_hyper(&a.hyper, m)?;
    let pool = load_records(&a.train, encoder.dim(), m, true)?;
    let train_set = few_shot_sample(&pool, m, a.hyper.shots, seed)?;
    let cfg = a.hyper.config(m, seed);
    let outcome = train(&train_set, &vocab, &encoder, &cfg)?;

    write_context(&a.out, &outcome.context)?;
    write_json(
        sidecar_path(&a.out),
        &ContextManifest {
            seed,
            class_names: vocab.names().to_vec(),
            encoder: encoder.spec(),
            train: cfg,
            shots: a.hyper.shots,
        },
    )?;
    write_json(log_path(&a.out), &TrainingLog { epochs: outcome.trace.clone() })?;
    let first = outcome.trace.first().map_or(f64::NAN, |e| e.loss);
    let last = outcome.trace.last().map_or(f64::NAN, |e| e.loss);
    say(
        out,
        format_args!(
            "trained {} epochs on {} images: loss {first:.4} -> {last:.4}; wrote {}",
            outcome.trace.len(),
            train_set.len(),
            a.out.display()
        ),
    )
}

fn ood_splits(paths: &[PathBuf], dim: usize, m: usize) -> CliResult<Vec<OodSplit>> {
    paths
        .iter()
        .map(|p| {
            Ok(OodSplit {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string()),
                records: load_records(p, dim, m, false)?,
            })
        })
        .collect()
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (ctx, encoder, vocab, seed): (PromptContext, _, _, u64) = match (&a.ctx, a.baseline) {
        (Some(path), false) => {
            let side: ContextManifest = read_json(sidecar_path(path))?;
            let (encoder, vocab) = model_from_spec(side.encoder, &side.class_names)?;
            (read_context(path)?, encoder, vocab, side.seed)
        }
        (None, true) => {
            let manifest_path = a.manifest.as_ref().expect("clap enforces --manifest");
            let manifest = Manifest::read(manifest_path)?;
            let (encoder, vocab) = model_from_manifest(&manifest)?;
            let seed = manifest.seeds.reference_context;
            let ctx = reference_context(&encoder, encoder.n_ctx(), encoder.dim(), seed)?;
            (ctx, encoder, vocab, seed)
        }
        _ => return Err(Failure::Usage("pass exactly one of --ctx or --baseline".into())),
    };
    let m = vocab.m_classes();
    let id = load_records(&a.id, encoder.dim(), m, true)?;
    let splits = ood_splits(&a.ood, encoder.dim(), m)?;
    let report = evaluate(&ctx, &vocab, &encoder, &id, &splits, a.score.into())?;
    let csv = metrics_csv(&report, seed);
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    out.write_all(csv.as_bytes())
        .map_err(|e| Failure::Data(Error::io("<stdout>", e)))
}

fn sweep_cmd(a: SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let seeds = match effective_seed(None)? {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let benches: Vec<(u64, Benchmark)> = match &a.train {
        None => {
            let cfg: WorldConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => WorldConfig::default(),
            };
            check_hyper(&a.hyper, cfg.m_classes)?;
            let cfg = WorldConfig {
                shots: a.hyper.shots,
                ..cfg
            };
            Benchmark::synthetic_seeds(&cfg, &seeds)?
        }
        Some(train_path) => {
            let manifest = Manifest::read(a.manifest.as_ref().expect("clap enforces --manifest"))?;
            let (encoder, vocab) = model_from_manifest(&manifest)?;
            let m = vocab.m_classes();
            check_hyper(&a.hyper, m)?;
            let pool = load_records(train_path, encoder.dim(), m, true)?;
            let id = load_records(a.id.as_ref().expect("clap enforces --id"), encoder.dim(), m, true)?;
            let splits = ood_splits(&a.ood, encoder.dim(), m)?;
            seeds
                .iter()
                .map(|&seed| {
                    Ok((
                        seed,
                        Benchmark {
                            encoder: encoder.clone(),
                            vocab: vocab.clone(),
                            train: few_shot_sample(&pool, m, a.hyper.shots, seed)?,
                            id_test: id.clone(),
                            ood_splits: splits.clone(),
                        },
                    ))
                })
                .collect::<CliResult<_>>()?
        }
    };
    let m = benches[0].1.vocab.m_classes();
    let base = a.hyper.config(m, 0);
    for &v in &a.values {
        a.param
            .apply(&base, v)
            .and_then(|c| c.validate(m))
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let result = run_sweep(&benches, &base, a.param, &a.values, a.score.into())?;
    let csv = result.to_csv()?;
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    out.write_all(csv.as_bytes())
        .map_err(|e| Failure::Data(Error::io("<stdout>", e)))
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = effective_seed(Some(a.seed))?.unwrap_or(a.seed);
    let toy = gradcheck_toy(seed)?;
    let err = full_loss_gradcheck(&toy)?;
    let ok = err < GRADCHECK_TOLERANCE;
    say(
        out,
        format_args!(
            "max relative error: {err:.3e} ({})",
            if ok { "ok" } else { "FAILED" }
        ),
    )?;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check exceeded tolerance {GRADCHECK_TOLERANCE:e}"
        ))
        .into())
    }
}

fn report_cmd(a: ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let rows = read_sweep_csv(&a.csv)?;
    let svg = render_svg(&rows)?;
    write_text(&a.svg, &svg)?;
    say(out, format_args!("wrote {} ({} points)", a.svg.display(), rows.len()))
}
