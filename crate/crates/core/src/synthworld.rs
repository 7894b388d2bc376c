//! Seeded ID/OOD benchmark living directly in the shared embedding space.
//!
//! ID images place their class prototype on a random subset of grid cells
//! and fill the rest with a background scene drawn from a small set of
//! nuisance directions shared by all classes. Each class has a preferred
//! scene, so backgrounds correlate with labels the way real photos do. OOD
//! images carry either an unseen object on a nuisance background or a bare
//! nuisance scene. Object cells of one image share a per-image instance
//! offset before per-cell noise is added, so images of one class vary.
//!
//! Noise vectors are i.i.d. `N(0, 1/D)` per coordinate, so `σ` is the
//! expected noise-to-signal norm ratio before renormalization.

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_text, reference_context, ClassVocabulary, EncoderSpec, FrozenEncoder, PromptContext};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, normalize, Matrix};
use crate::rng::SplitMix64;
use crate::store::few_shot_sample;

const STREAM_NUISANCE: u64 = 0x0B5C_0000;
const STREAM_UNSEEN: u64 = 0x05EE_0000;
const STREAM_POOL: u64 = 0x9001;
const STREAM_ID_TEST: u64 = 0x1D7E_5700;
const STREAM_OOD_TEST: u64 = 0x00D7_E570;

/// Label carried by OOD records.
pub const OOD_LABEL: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub m_classes: usize,
    pub o_ood_classes: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_nuisance: usize,
    /// Fraction of cells holding the object.
    pub obj_fraction: f64,
    /// Object weight in the global feature.
    pub mix_alpha: f64,
    pub sigma_obj: f64,
    pub sigma_bg: f64,
    /// Per-image offset shared by all object cells of one image.
    pub sigma_instance: f64,
    /// Probability an ID image uses its class's preferred scene.
    pub scene_affinity: f64,
    /// Cosine between an unseen OOD direction and the mean anchor direction,
    /// as a fraction of the average anchor's cosine to it.
    pub unseen_family: f64,
    /// Fraction of OOD images that are bare scenes with no object.
    pub ood_scene_fraction: f64,
    pub shots: usize,
    pub pool_per_class: usize,
    pub id_test_per_class: usize,
    pub ood_test: usize,
    pub n_ctx: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            m_classes: 20,
            o_ood_classes: 5,
            dim: 64,
            grid_h: 7,
            grid_w: 7,
            n_nuisance: 8,
            obj_fraction: 0.5,
            mix_alpha: 0.7,
            sigma_obj: 0.1,
            sigma_bg: 0.5,
            sigma_instance: 1.0,
            scene_affinity: 1.0,
            unseen_family: 1.0,
            ood_scene_fraction: 0.5,
            shots: 16,
            pool_per_class: 32,
            id_test_per_class: 25,
            ood_test: 500,
            n_ctx: 16,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn regions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn object_cells(&self) -> usize {
        (self.obj_fraction * self.regions() as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m_classes < 2 {
            return bad(format!("need at least 2 ID classes, got {}", self.m_classes));
        }
        if self.o_ood_classes < 1 {
            return bad("need at least 1 OOD class".into());
        }
        if self.dim == 0 || self.grid_h == 0 || self.grid_w == 0 || self.n_ctx == 0 {
            return bad("dim, grid and n_ctx must be positive".into());
        }
        if self.n_nuisance == 0 {
            return bad("need at least 1 nuisance direction".into());
        }
        if !(self.obj_fraction > 0.0 && self.obj_fraction < 1.0) {
            return bad(format!("obj_fraction must lie in (0,1), got {}", self.obj_fraction));
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return bad(format!("mix_alpha must lie in [0,1], got {}", self.mix_alpha));
        }
        for (name, p) in [
            ("scene_affinity", self.scene_affinity),
            ("ood_scene_fraction", self.ood_scene_fraction),
            ("unseen_family", self.unseen_family),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if self.sigma_obj < 0.0 || self.sigma_bg < 0.0 || self.sigma_instance < 0.0 {
            return bad("noise scales must be non-negative".into());
        }
        if self.shots > self.pool_per_class {
            return bad(format!(
                "{} shots x {} classes exceeds the generated pool of {} per class",
                self.shots, self.m_classes, self.pool_per_class
            ));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            seed: self.seed,
            n_ctx: self.n_ctx,
            dim: self.dim,
        }
    }
}

/// One image: a unit global feature and `H·W` unit local features,
/// indexed `i = h·W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub global: Vec<f64>,
    pub local: Matrix,
    /// Class index for ID records, [`OOD_LABEL`] for OOD.
    pub label: i32,
}

impl FeatureRecord {
    pub fn is_id(&self) -> bool {
        self.label >= 0
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn regions(&self) -> usize {
        self.local.rows()
    }
}

/// Generated benchmark plus the geometry used to build it.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub anchors: Matrix,
    pub nuisance: Matrix,
    pub unseen: Matrix,
    pub pool: Vec<FeatureRecord>,
    /// Object cell indices of each pool record, sorted.
    pub pool_objects: Vec<Vec<usize>>,
    pub train: Vec<FeatureRecord>,
    pub id_test: Vec<FeatureRecord>,
    pub ood_test: Vec<FeatureRecord>,
}

/// Everything needed to train and evaluate on a synthetic world.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub encoder: FrozenEncoder,
    pub vocab: ClassVocabulary,
    pub reference: PromptContext,
    pub world: World,
}

/// Builds encoder, vocabulary and reference context from `cfg.seed`,
/// anchors the class prototypes at the reference context and generates
/// the world.
pub fn build_synthetic(cfg: &WorldConfig) -> Result<SyntheticSetup> {
    cfg.validate()?;
    let encoder = FrozenEncoder::new(cfg.encoder_spec())?;
    let vocab = ClassVocabulary::synthetic(cfg.seed, cfg.m_classes, cfg.dim);
    let reference = reference_context(&encoder, cfg.n_ctx, cfg.dim, cfg.seed)?;
    let anchors = encode_text(&reference, &vocab, &encoder)?;
    let world = generate_world(cfg, &anchors)?;
    Ok(SyntheticSetup {
        encoder,
        vocab,
        reference,
        world,
    })
}

pub fn generate_world(cfg: &WorldConfig, anchors: &Matrix) -> Result<World> {
    cfg.validate()?;
    if anchors.shape() != (cfg.m_classes, cfg.dim) {
        return Err(Error::Dimension(format!(
            "anchors are {:?}, config needs ({}, {})",
            anchors.shape(),
            cfg.m_classes,
            cfg.dim
        )));
    }
    for r in anchors.iter_rows() {
        if (norm(r) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("anchor rows must be unit-norm".into()));
        }
    }

    let mut rng = SplitMix64::stream(cfg.seed, STREAM_NUISANCE);
    let nuisance_rows: Vec<Vec<f64>> = (0..cfg.n_nuisance).map(|_| rng.unit_vector(cfg.dim)).collect();
    let nuisance = Matrix::from_rows(&nuisance_rows)?;
    let unseen = unseen_directions(cfg, anchors)?;

    let gen = Generator { cfg, anchors, nuisance: &nuisance, unseen: &unseen };

    let mut pool = Vec::with_capacity(cfg.m_classes * cfg.pool_per_class);
    let mut pool_objects = Vec::with_capacity(pool.capacity());
    let mut rng = SplitMix64::stream(cfg.seed, STREAM_POOL);
    for class in 0..cfg.m_classes {
        for _ in 0..cfg.pool_per_class {
            let (rec, objects) = gen.id_image(class, &mut rng);
            pool.push(rec);
            pool_objects.push(objects);
        }
    }

    let mut rng = SplitMix64::stream(cfg.seed, STREAM_ID_TEST);
    let id_test = (0..cfg.m_classes)
        .flat_map(|c| std::iter::repeat(c).take(cfg.id_test_per_class))
        .map(|c| gen.id_image(c, &mut rng).0)
        .collect();

    let mut rng = SplitMix64::stream(cfg.seed, STREAM_OOD_TEST);
    let ood_test = (0..cfg.ood_test).map(|_| gen.ood_image(&mut rng)).collect();

    let train = few_shot_sample(&pool, cfg.m_classes, cfg.shots, cfg.seed)?;

    Ok(World {
        config: cfg.clone(),
        anchors: anchors.clone(),
        nuisance,
        unseen,
        pool,
        pool_objects,
        train,
        id_test,
        ood_test,
    })
}

/// Unseen directions share the anchors' common component: with `ū` the
/// normalized anchor mean and `a` the mean anchor cosine to `ū`, each is
/// `normalize(f·a·ū + √(1-(f·a)²)·r)` for a random unit `r ⟂ ū`, `f =
/// unseen_family`.
fn unseen_directions(cfg: &WorldConfig, anchors: &Matrix) -> Result<Matrix> {
    let mut mean = vec![0.0; cfg.dim];
    for r in anchors.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let centre = normalize(&mean);
    let a = anchors.iter_rows().map(|r| dot(r, &centre)).sum::<f64>() / anchors.rows() as f64;
    let along = (cfg.unseen_family * a).clamp(-1.0, 1.0);
    let across = (1.0 - along * along).sqrt();

    let mut rng = SplitMix64::stream(cfg.seed, STREAM_UNSEEN);
    let mut rows = Vec::with_capacity(cfg.o_ood_classes);
    for _ in 0..cfg.o_ood_classes {
        let mut r = rng.unit_vector(cfg.dim);
        let proj = dot(&r, &centre);
        r.iter_mut().zip(&centre).for_each(|(x, c)| *x -= proj * c);
        let r = normalize(&r);
        let v: Vec<f64> = centre
            .iter()
            .zip(&r)
            .map(|(c, x)| along * c + across * x)
            .collect();
        rows.push(normalize(&v));
    }
    Matrix::from_rows(&rows)
}

struct Generator<'a> {
    cfg: &'a WorldConfig,
    anchors: &'a Matrix,
    nuisance: &'a Matrix,
    unseen: &'a Matrix,
}

impl Generator<'_> {
    fn noisy(&self, base: &[f64], sigma: f64, rng: &mut SplitMix64) -> Vec<f64> {
        let s = sigma / (self.cfg.dim as f64).sqrt();
        let v: Vec<f64> = base.iter().map(|b| b + s * rng.normal()).collect();
        normalize(&v)
    }

    /// Fills object cells from `object`, the rest from nuisance `scene`.
    fn compose(
        &self,
        object: Option<&[f64]>,
        scene: usize,
        rng: &mut SplitMix64,
    ) -> (Vec<f64>, Matrix, Vec<usize>) {
        let cfg = self.cfg;
        let n = cfg.regions();
        let mut objects = match object {
            Some(_) => rng.choose_indices(n, cfg.object_cells()),
            None => Vec::new(),
        };
        objects.sort_unstable();
        // one instance offset per image, shared by its object cells
        let instance = object.map(|o| match cfg.sigma_instance > 0.0 {
            true => self.noisy(o, cfg.sigma_instance, rng),
            false => o.to_vec(),
        });
        let object = instance.as_deref();
        let mut is_obj = vec![false; n];
        objects.iter().for_each(|&i| is_obj[i] = true);

        let mut local = Matrix::zeros(n, cfg.dim);
        let mut obj_sum = vec![0.0; cfg.dim];
        let mut bg_sum = vec![0.0; cfg.dim];
        for (i, &obj) in is_obj.iter().enumerate() {
            let (cell, acc) = match (obj, object) {
                (true, Some(o)) => (self.noisy(o, cfg.sigma_obj, rng), &mut obj_sum),
                _ => (self.noisy(self.nuisance.row(scene), cfg.sigma_bg, rng), &mut bg_sum),
            };
            acc.iter_mut().zip(&cell).for_each(|(a, c)| *a += c);
            local.row_mut(i).copy_from_slice(&cell);
        }
        let n_obj = objects.len();
        let n_bg = n - n_obj;
        let (w_obj, w_bg) = match (n_obj, n_bg) {
            (0, _) => (0.0, 1.0),
            (_, 0) => (1.0, 0.0),
            _ => (cfg.mix_alpha, 1.0 - cfg.mix_alpha),
        };
        let global: Vec<f64> = obj_sum
            .iter()
            .zip(&bg_sum)
            .map(|(o, b)| {
                w_obj * o / n_obj.max(1) as f64 + w_bg * b / n_bg.max(1) as f64
            })
            .collect();
        (normalize(&global), local, objects)
    }

    fn id_image(&self, class: usize, rng: &mut SplitMix64) -> (FeatureRecord, Vec<usize>) {
        let cfg = self.cfg;
        let scene = if rng.uniform() < cfg.scene_affinity {
            class % cfg.n_nuisance
        } else {
            rng.below(cfg.n_nuisance)
        };
        let (global, local, objects) = self.compose(Some(self.anchors.row(class)), scene, rng);
        (
            FeatureRecord {
                global,
                local,
                label: class as i32,
            },
            objects,
        )
    }

    fn ood_image(&self, rng: &mut SplitMix64) -> FeatureRecord {
        let cfg = self.cfg;
        let bare = rng.uniform() < cfg.ood_scene_fraction;
        let unseen = rng.below(cfg.o_ood_classes);
        let scene = rng.below(cfg.n_nuisance);
        let object = (!bare).then(|| self.unseen.row(unseen));
        let (global, local, _) = self.compose(object, scene, rng);
        FeatureRecord {
            global,
            local,
            label: OOD_LABEL,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            m_classes: 4,
            o_ood_classes: 2,
            dim: 16,
            grid_h: 3,
            grid_w: 3,
            n_nuisance: 3,
            shots: 2,
            pool_per_class: 4,
            id_test_per_class: 3,
            ood_test: 6,
            n_ctx: 4,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn shapes_and_unit_rows() {
        let s = build_synthetic(&small()).unwrap();
        let w = &s.world;
        assert_eq!(w.train.len(), 8);
        assert_eq!(w.id_test.len(), 12);
        assert_eq!(w.ood_test.len(), 6);
        for rec in w.pool.iter().chain(&w.id_test).chain(&w.ood_test) {
            assert_eq!(rec.local.rows(), 9);
            assert!((norm(&rec.global) - 1.0).abs() < 1e-6);
            for r in rec.local.iter_rows() {
                assert!((norm(r) - 1.0).abs() < 1e-6);
            }
        }
        assert!(w.ood_test.iter().all(|r| r.label == OOD_LABEL));
        assert!(w.id_test.iter().all(|r| (0..4).contains(&r.label)));
    }

    #[test]
    fn pure_object_global_equals_anchor() {
        let cfg = WorldConfig {
            mix_alpha: 1.0,
            sigma_obj: 0.0,
            sigma_instance: 0.0,
            ..small()
        };
        let s = build_synthetic(&cfg).unwrap();
        for rec in &s.world.id_test {
            let u = s.world.anchors.row(rec.label as usize);
            for (a, b) in rec.global.iter().zip(u) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = build_synthetic(&small()).unwrap().world;
        let b = build_synthetic(&small()).unwrap().world;
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.ood_test, b.ood_test);
    }

    #[test]
    fn shots_exceeding_pool_rejected() {
        let cfg = WorldConfig {
            shots: 5,
            ..small()
        };
        assert!(build_synthetic(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        for cfg in [
            WorldConfig { m_classes: 1, ..small() },
            WorldConfig { o_ood_classes: 0, ..small() },
            WorldConfig { obj_fraction: 1.0, ..small() },
            WorldConfig { obj_fraction: 0.0, ..small() },
            WorldConfig { mix_alpha: 1.5, ..small() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn unseen_directions_differ_from_anchors() {
        let s = build_synthetic(&WorldConfig::default()).unwrap();
        for v in s.world.unseen.iter_rows() {
            for u in s.world.anchors.iter_rows() {
                assert!(dot(u, v) < 0.999);
            }
        }
    }
}
