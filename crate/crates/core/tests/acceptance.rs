//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use locoop::matrix::dot;
use locoop::rng::SplitMix64;
use locoop::store::{context_from_bytes, context_to_bytes, LcfmContainer};
use locoop::training::{full_loss_gradcheck, gradcheck_toy};
use locoop::{
    encode_text, fpr_at_tpr, Benchmark, ExtractionStrategy, FeatureRecord, Matrix, Objective, PromptContext,
    ScoreKind, TrainConfig, TrainOutcome, WorldConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn bits(ctx: &PromptContext) -> Vec<u64> {
    ctx.omega().data().iter().map(|v| v.to_bits()).collect()
}

#[derive(Clone, Copy)]
struct Eval {
    mcm_auroc: f64,
    mcm_fpr: f64,
    gl_auroc: f64,
    gl_fpr: f64,
    /// Mean over nuisance directions of the max cosine to any g_m.
    nuisance_mean_max: f64,
    /// Max over nuisance directions and classes.
    nuisance_max: f64,
}

struct Lab {
    benches: Vec<(u64, Benchmark)>,
    nuisance: Vec<Matrix>,
    m: usize,
    cache: BTreeMap<(String, u64), (TrainOutcome, Eval)>,
}

impl Lab {
    fn new() -> Self {
        let cfg = WorldConfig::default();
        let benches = Benchmark::synthetic_seeds(&cfg, &SEEDS).expect("benchmarks");
        let nuisance = SEEDS
            .iter()
            .map(|&s| {
                locoop::build_synthetic(&WorldConfig { seed: s, ..cfg.clone() })
                    .expect("world")
                    .world
                    .nuisance
            })
            .collect();
        Lab {
            benches,
            nuisance,
            m: cfg.m_classes,
            cache: BTreeMap::new(),
        }
    }

    fn run(&mut self, key: &str, seed_idx: usize, cfg: &TrainConfig) -> &(TrainOutcome, Eval) {
        let (seed, bench) = &self.benches[seed_idx];
        let k = (key.to_string(), *seed);
        if !self.cache.contains_key(&k) {
            let cfg = TrainConfig { seed: *seed, ..cfg.clone() };
            let out = bench.train(&cfg).expect("training");
            let mcm = bench.evaluate(&out.context, ScoreKind::Mcm).expect("eval").average;
            let gl = bench.evaluate(&out.context, ScoreKind::Glmcm).expect("eval").average;
            let g = encode_text(&out.context, &bench.vocab, &bench.encoder).expect("encode");
            let per_b: Vec<f64> = self.nuisance[seed_idx]
                .iter_rows()
                .map(|b| g.iter_rows().map(|gm| dot(b, gm)).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let eval = Eval {
                mcm_auroc: mcm.auroc,
                mcm_fpr: mcm.fpr95,
                gl_auroc: gl.auroc,
                gl_fpr: gl.fpr95,
                nuisance_mean_max: per_b.iter().sum::<f64>() / per_b.len() as f64,
                nuisance_max: per_b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            self.cache.insert(k.clone(), (out, eval));
        }
        &self.cache[&k]
    }

    fn mean<F: Fn(&Eval) -> f64>(&mut self, key: &str, cfg: &TrainConfig, f: F) -> f64 {
        (0..SEEDS.len()).map(|i| f(&self.run(key, i, cfg).1)).sum::<f64>() / SEEDS.len() as f64
    }

    fn locoop(&self, lambda: f64, strategy: ExtractionStrategy) -> TrainConfig {
        TrainConfig {
            lambda,
            strategy,
            ..TrainConfig::for_classes(self.m)
        }
    }

    fn coop(&self) -> TrainConfig {
        TrainConfig {
            lambda: 0.0,
            objective: Objective::Coop,
            ..TrainConfig::for_classes(self.m)
        }
    }
}

fn rank(k: usize) -> ExtractionStrategy {
    ExtractionStrategy::Rank { k }
}

fn degenerate_lambda(lab: &mut Lab) -> Outcome {
    let coop = lab.coop();
    let zero = lab.locoop(0.0, ExtractionStrategy::default_rank(lab.m));
    let mut same = true;
    for i in 0..SEEDS.len() {
        let a = bits(&lab.run("coop", i, &coop).0.context);
        let b = bits(&lab.run("lambda=0", i, &zero).0.context);
        same &= a == b;
    }
    Outcome {
        name: "degenerate-lambda equivalence",
        pass: same,
        detail: format!("lambda=0 vs CoOp-only contexts bitwise equal on seeds {SEEDS:?}: {same}"),
    }
}

fn gradient_correctness() -> Outcome {
    let err = full_loss_gradcheck(&gradcheck_toy(0).expect("toy")).expect("gradcheck");
    Outcome {
        name: "gradient correctness",
        pass: err < 1e-4,
        detail: format!("max relative error {err:.3e} (< 1e-4)"),
    }
}

fn locoop_beats_coop(lab: &mut Lab) -> Outcome {
    let coop = lab.coop();
    let loc = lab.locoop(0.25, ExtractionStrategy::default_rank(lab.m));
    let coop_auroc = lab.mean("coop", &coop, |e| e.mcm_auroc);
    let coop_fpr = lab.mean("coop", &coop, |e| e.mcm_fpr);
    let key = format!("lambda=0.25,k={}", locoop::training::default_k(lab.m));
    let loc_auroc = lab.mean(&key, &loc, |e| e.gl_auroc);
    let loc_fpr = lab.mean(&key, &loc, |e| e.gl_fpr);
    let gain = 100.0 * (loc_auroc - coop_auroc);
    Outcome {
        name: "locoop beats coop",
        pass: gain >= 3.0 && loc_fpr < coop_fpr,
        detail: format!(
            "AUROC CoOp+MCM {:.2} -> LoCoOp+GL-MCM {:.2} ({gain:+.2} pts, need >= +3); FPR95 {:.2} -> {:.2}",
            100.0 * coop_auroc,
            100.0 * loc_auroc,
            100.0 * coop_fpr,
            100.0 * loc_fpr
        ),
    }
}

fn k_sweep(lab: &mut Lab) -> Outcome {
    let m = lab.m;
    let ks = [0, m / 10, locoop::training::default_k(m), m / 2, m];
    let mut aurocs = Vec::new();
    for &k in &ks {
        let cfg = lab.locoop(0.25, rank(k));
        aurocs.push(lab.mean(&format!("lambda=0.25,k={k}"), &cfg, |e| e.gl_auroc));
    }
    let best_interior = aurocs[1..ks.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = aurocs[0] < best_interior && aurocs[ks.len() - 1] < best_interior;
    let cells: Vec<String> = ks
        .iter()
        .zip(&aurocs)
        .map(|(k, a)| format!("K={k}: {:.2}", 100.0 * a))
        .collect();
    Outcome {
        name: "K sweep shape",
        pass,
        detail: format!("GL-MCM AUROC {}", cells.join(", ")),
    }
}

fn lambda_sweep(lab: &mut Lab) -> Outcome {
    let k = locoop::training::default_k(lab.m);
    let mut aurocs = Vec::new();
    for lambda in [0.0, 0.25, 0.5, 1.0] {
        let cfg = lab.locoop(lambda, rank(k));
        let key = if lambda == 0.0 {
            "lambda=0".to_string()
        } else {
            format!("lambda={lambda},k={k}")
        };
        aurocs.push((lambda, lab.mean(&key, &cfg, |e| e.gl_auroc)));
    }
    let cells: Vec<String> = aurocs
        .iter()
        .map(|(l, a)| format!("lambda={l}: {:.2}", 100.0 * a))
        .collect();
    Outcome {
        name: "lambda sweep shape",
        pass: aurocs[1].1 >= aurocs[0].1,
        detail: format!("GL-MCM AUROC {}", cells.join(", ")),
    }
}

fn extraction_variants(lab: &mut Lab) -> Outcome {
    let m = lab.m;
    let variants = [
        (format!("lambda=0.25,k={}", locoop::training::default_k(m)), ExtractionStrategy::default_rank(m)),
        ("entropy".to_string(), ExtractionStrategy::Entropy),
        ("probability".to_string(), ExtractionStrategy::Probability),
    ];
    let mut completed = true;
    let mut aurocs = Vec::new();
    for (key, strategy) in &variants {
        let cfg = lab.locoop(0.25, *strategy);
        for i in 0..SEEDS.len() {
            let trace = &lab.run(key, i, &cfg).0.trace;
            completed &= trace.len() == cfg.epochs && trace.iter().all(|e| e.loss.is_finite());
        }
        aurocs.push(lab.mean(key, &cfg, |e| e.gl_auroc));
    }
    let gap = 100.0 * (aurocs[0] - aurocs[2]).abs();
    Outcome {
        name: "extraction variants",
        pass: completed && gap <= 2.0,
        detail: format!(
            "all completed: {completed}; GL-MCM AUROC rank {:.2}, entropy {:.2}, probability {:.2}; |rank - probability| = {gap:.2} pts (<= 2)",
            100.0 * aurocs[0],
            100.0 * aurocs[1],
            100.0 * aurocs[2]
        ),
    }
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Tries every candidate threshold; keeps the largest meeting the TPR.
fn sweep_fpr(id: &[f64], ood: &[f64], tpr: f64) -> (f64, f64) {
    let mut best: Option<f64> = None;
    for &t in id {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tp >= tpr && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum ID score always qualifies");
    (ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64, t)
}

fn metric_oracles() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    let mut worst_auroc: f64 = 0.0;
    let mut fpr_exact = true;
    for set in 0..100 {
        let n_id = 1 + rng.below(60);
        let n_ood = 1 + rng.below(60);
        // every other set is coarsely quantized to force ties
        let draw = |rng: &mut SplitMix64, shift: f64| {
            let v = rng.normal() + shift;
            if set % 2 == 0 {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng, 0.7)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng, 0.0)).collect();
        let a = locoop::auroc(&id, &ood).expect("auroc");
        worst_auroc = worst_auroc.max((a - pairwise_auroc(&id, &ood)).abs());
        let got = fpr_at_tpr(&id, &ood, 0.95).expect("fpr");
        fpr_exact &= got == sweep_fpr(&id, &ood, 0.95);
    }
    Outcome {
        name: "metric oracles",
        pass: worst_auroc <= 1e-9 && fpr_exact,
        detail: format!(
            "100 score sets: max |auroc - pairwise| = {worst_auroc:.1e} (<= 1e-9); fpr_at_tpr == threshold sweep: {fpr_exact}"
        ),
    }
}

fn mechanism(lab: &mut Lab) -> Outcome {
    let zero_cfg = lab.locoop(0.0, ExtractionStrategy::default_rank(lab.m));
    let loc = lab.locoop(0.25, ExtractionStrategy::default_rank(lab.m));
    let key = format!("lambda=0.25,k={}", locoop::training::default_k(lab.m));
    let mut pass = true;
    let mut cells = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        let zero = lab.run("lambda=0", i, &zero_cfg).1;
        let quarter = lab.run(&key, i, &loc).1;
        pass &= quarter.nuisance_max < zero.nuisance_max;
        pass &= quarter.nuisance_mean_max < zero.nuisance_mean_max;
        cells.push(format!(
            "seed {seed}: max {:.3} -> {:.3}, mean-of-max {:.3} -> {:.3}",
            zero.nuisance_max, quarter.nuisance_max, zero.nuisance_mean_max, quarter.nuisance_mean_max
        ));
    }
    Outcome {
        name: "mechanism (nuisance pushed away)",
        pass,
        detail: format!("lambda 0 -> 0.25: {}", cells.join("; ")),
    }
}

fn random_container(rng: &mut SplitMix64) -> LcfmContainer {
    let (h, w, d) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(12));
    let count = rng.below(6);
    let records = (0..count)
        .map(|_| FeatureRecord {
            global: (0..d).map(|_| rng.normal() as f32 as f64).collect(),
            local: Matrix::from_vec(h * w, d, (0..h * w * d).map(|_| rng.normal() as f32 as f64).collect())
                .expect("shape"),
            label: rng.below(40) as i32 - 1,
        })
        .collect();
    LcfmContainer {
        grid_h: h,
        grid_w: w,
        dim: d,
        has_global: true,
        records,
    }
}

fn format_round_trip() -> Outcome {
    let mut rng = SplitMix64::new(77);
    let mut ok = true;
    for _ in 0..100 {
        let c = random_container(&mut rng);
        let bytes = c.to_bytes().expect("encode");
        let back = LcfmContainer::from_bytes(&bytes).expect("decode");
        ok &= back == c && back.to_bytes().expect("re-encode") == bytes;

        let (n, d) = (1 + rng.below(20), 1 + rng.below(70));
        let ctx = PromptContext::new(
            Matrix::from_vec(n, d, (0..n * d).map(|_| (rng.normal() * 0.02) as f32 as f64).collect())
                .expect("shape"),
        )
        .expect("ctx");
        let bytes = context_to_bytes(&ctx).expect("encode");
        let back = context_from_bytes(&bytes).expect("decode");
        ok &= bits(&back) == bits(&ctx) && context_to_bytes(&back).expect("re-encode") == bytes;
    }
    Outcome {
        name: "format round-trip",
        pass: ok,
        detail: format!("100 random LCFM and LCPC payloads bitwise identical after write/read: {ok}"),
    }
}

fn main() {
    let started = Instant::now();
    let mut lab = Lab::new();
    let checks: [fn(&mut Lab) -> Outcome; 9] = [
        degenerate_lambda,
        |_| gradient_correctness(),
        locoop_beats_coop,
        k_sweep,
        lambda_sweep,
        extraction_variants,
        |_| metric_oracles(),
        mechanism,
        |_| format_round_trip(),
    ];
    let mut failed = 0;
    for check in checks {
        let t = Instant::now();
        let o = check(&mut lab);
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of 9 criteria passed in {:.1}s",
        9 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
