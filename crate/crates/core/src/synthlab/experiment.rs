//! Ablation presets: train arms of the tiny model on shared synthetic data
//! and compare mIoU across seeds.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ModelMode, TinyModel};
use super::scene::{derive_seed, feature_dim, pool_features, SceneLayout, SyntheticScene};
use super::train::{train, Sample, TrainConfig, TrainOutput};
use crate::decode::{aggregate_category_logits, decode_semantic, Background, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossParams};
use crate::depthq::Preset as DepthPreset;
use crate::metrics::{miou, ConfusionMatrix};
use crate::targets::{build_depth_targets, build_multihot_targets_in, merge_targets};
use crate::vocab::{build_vocabulary, with_characters, CategoryTokenMap, TokenId, Vocabulary};

/// Category names in class-index order; class 0 is the scene background.
pub const CATEGORY_NAMES: [&str; 10] = [
    "wall",
    "floor",
    "sky",
    "tree",
    "road",
    "car",
    "person",
    "traffic light",
    "potted plant",
    "sea",
];

const SUBWORDS: [&str; 12] = [
    "wall", "floor", "sky", "tree", "road", "car", "person", "traffic", "light", "potted", "plant", "sea",
];

/// Env var capping the worker threads used for experiment jobs.
pub const THREADS_ENV: &str = "DENSE_NTP_THREADS";

/// Sub-words, single characters and `fillers` unrelated tokens.
pub fn experiment_vocabulary(fillers: usize) -> Result<Vocabulary> {
    let mut base = with_characters(&SUBWORDS);
    base.extend((0..fillers).map(|i| format!("tok{i:05}")));
    build_vocabulary(&base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Table3Mini,
    Table4Mini,
    Table5Mini,
    Table6Mini,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Table3Mini, Preset::Table4Mini, Preset::Table5Mini, Preset::Table6Mini];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table3Mini => "table3-mini",
            Preset::Table4Mini => "table4-mini",
            Preset::Table5Mini => "table5-mini",
            Preset::Table6Mini => "table6-mini",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub n_classes: usize,
    pub n_shapes: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: usize,
    /// Unrelated text tokens added to the vocabulary.
    pub fillers: usize,
    pub mode: ModelMode,
    pub epochs: usize,
    pub lr: f64,
    pub coverage_tau: f64,
    pub loss: LossParams,
    /// Scale sweep: ground truth and evaluation size.
    pub scale_base: usize,
    /// Scale sweep: pixels per token at every scale.
    pub scale_patch: usize,
    pub scales: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            patch: 8,
            n_classes: 6,
            n_shapes: 5,
            noise_sigma: 0.3,
            n_train: 32,
            n_test: 16,
            hidden: 32,
            fillers: 400,
            mode: ModelMode::Linear,
            epochs: 10,
            lr: 0.01,
            coverage_tau: 0.0,
            loss: LossParams::default(),
            scale_base: 64,
            scale_patch: 16,
            scales: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.n_classes < 2 || self.n_classes > CATEGORY_NAMES.len() {
            return bad("n_classes must lie in 2..=10");
        }
        if self.n_train == 0 || self.n_test == 0 || self.epochs == 0 || self.hidden == 0 {
            return bad("n_train, n_test, epochs and hidden must be positive");
        }
        if self.patch == 0 || !self.width.is_multiple_of(self.patch) || !self.height.is_multiple_of(self.patch) {
            return bad("width and height must be multiples of patch");
        }
        if self.scale_patch == 0 || self.scales.iter().any(|s| !(*s > 0.0)) {
            return bad("scales and scale_patch must be positive");
        }
        Ok(())
    }
}

/// One trained configuration within a preset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arm {
    pub name: String,
    pub loss: LossKind,
    pub params: LossParams,
    /// Token-grid scale for the scale sweep.
    pub scale: Option<f64>,
}

pub fn preset_arms(preset: Preset, cfg: &ExperimentConfig) -> Vec<Arm> {
    let arm = |loss: LossKind| Arm {
        name: loss.as_str().to_string(),
        loss,
        params: cfg.loss,
        scale: None,
    };
    match preset {
        Preset::Table3Mini => [LossKind::RawBce, LossKind::IndivMean, LossKind::Ntpm].map(arm).to_vec(),
        Preset::Table4Mini => [
            LossKind::NtpCe,
            LossKind::RawBce,
            LossKind::Focal,
            LossKind::Ohem,
            LossKind::BalancedBce,
            LossKind::Ntpm,
        ]
        .map(arm)
        .to_vec(),
        Preset::Table5Mini => cfg
            .scales
            .iter()
            .map(|&s| Arm {
                name: format!("ntpm_s{s}"),
                scale: Some(s),
                ..arm(LossKind::Ntpm)
            })
            .collect(),
        Preset::Table6Mini => [8, 16, 32, 64, 128]
            .map(|k| Arm {
                name: format!("ntpm_k{k}"),
                params: LossParams { k, ..cfg.loss },
                ..arm(LossKind::Ntpm)
            })
            .to_vec(),
    }
}

/// Rendering geometry for one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    render_w: usize,
    render_h: usize,
    patch: usize,
    eval_w: usize,
    eval_h: usize,
}

fn geometry(cfg: &ExperimentConfig, arm: &Arm) -> Result<Geometry> {
    match arm.scale {
        None => Ok(Geometry {
            render_w: cfg.width,
            render_h: cfg.height,
            patch: cfg.patch,
            eval_w: cfg.width,
            eval_h: cfg.height,
        }),
        Some(s) => {
            let size = (cfg.scale_base as f64 * s).round() as usize;
            if !size.is_multiple_of(cfg.scale_patch) || size < cfg.scale_base {
                return Err(Error::InvalidParameter(format!(
                    "scale {s} gives {size} px, not a multiple of patch {} at least {}",
                    cfg.scale_patch, cfg.scale_base
                )));
            }
            Ok(Geometry {
                render_w: size,
                render_h: size,
                patch: cfg.scale_patch,
                eval_w: cfg.scale_base,
                eval_h: cfg.scale_base,
            })
        }
    }
}

/// Shared, seed-derived pieces of every arm.
struct Setup {
    cat_map: CategoryTokenMap,
    slice: Vec<TokenId>,
    vocab_size: usize,
    train_layouts: Vec<SceneLayout>,
    test_layouts: Vec<SceneLayout>,
}

fn layouts(cfg: &ExperimentConfig, seed: u64, tag: u64, n: usize) -> Vec<SceneLayout> {
    (0..)
        .filter_map(|j| SceneLayout::generate(derive_seed(seed, tag + j), cfg.n_classes, cfg.n_shapes).ok())
        .take(n)
        .collect()
}

fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    let vocab = experiment_vocabulary(cfg.fillers)?;
    let cat_map = CategoryTokenMap::from_names(&CATEGORY_NAMES[..cfg.n_classes], &vocab)?;
    let slice: Vec<TokenId> = vocab.text_ids().collect();
    Ok(Setup {
        cat_map,
        vocab_size: vocab.text_ids().end as usize,
        slice,
        train_layouts: layouts(cfg, seed, 1_000, cfg.n_train),
        test_layouts: layouts(cfg, seed, 1_000_000, cfg.n_test),
    })
}

/// Result of one arm under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRun {
    pub seed: u64,
    pub miou: f64,
    #[serde(skip)]
    pub curve: Vec<f64>,
}

fn render_sample(cfg: &ExperimentConfig, s: &Setup, layout: &SceneLayout, g: &Geometry) -> Result<Option<Sample>> {
    let scene = match layout.render(g.render_w, g.render_h, cfg.noise_sigma) {
        Ok(sc) => sc,
        Err(Error::DegenerateScene) => return Ok(None),
        Err(e) => return Err(e),
    };
    let targets = build_multihot_targets_in(&scene.semantic, g.patch, &s.cat_map, cfg.coverage_tau, &s.slice)?;
    Ok(Some(Sample {
        features: pool_features(&scene, g.patch)?,
        targets,
    }))
}

pub fn run_arm(cfg: &ExperimentConfig, arm: &Arm, seed: u64) -> Result<ArmRun> {
    cfg.validate()?;
    let s = setup(cfg, seed)?;
    run_arm_with(cfg, &s, arm, seed)
}

fn fit(cfg: &ExperimentConfig, s: &Setup, arm: &Arm, g: &Geometry, seed: u64) -> Result<TrainOutput> {
    let mut data = Vec::with_capacity(s.train_layouts.len());
    for layout in &s.train_layouts {
        if let Some(sample) = render_sample(cfg, s, layout, g)? {
            data.push(sample);
        }
    }
    let model = TinyModel::new(cfg.mode, feature_dim(cfg.n_classes), cfg.hidden, s.vocab_size, derive_seed(seed, 7));
    let tc = TrainConfig {
        loss: arm.loss,
        params: arm.params,
        steps: cfg.epochs * data.len(),
        lr: cfg.lr,
        seed: derive_seed(seed, 8),
    };
    train(model, &data, &tc)
}

fn confusion(cfg: &ExperimentConfig, s: &Setup, g: &Geometry, model: &TinyModel) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.n_classes);
    for layout in &s.test_layouts {
        let Some(sample) = render_sample(cfg, s, layout, g)? else {
            continue;
        };
        let z = model.forward(&sample.features)?;
        let cat = aggregate_category_logits(&z, &s.cat_map)?;
        let pred = decode_semantic(&cat, g.eval_w, g.eval_h, DEFAULT_TEMPERATURE, Background::None)?;
        let gt = if (g.eval_w, g.eval_h) == (g.render_w, g.render_h) {
            layout.render(g.render_w, g.render_h, cfg.noise_sigma)?.semantic
        } else {
            match layout.render(g.eval_w, g.eval_h, cfg.noise_sigma) {
                Ok(sc) => sc.semantic,
                Err(Error::DegenerateScene) => continue,
                Err(e) => return Err(e),
            }
        };
        cm.accumulate(&gt, &pred)?;
    }
    Ok(cm)
}

fn run_arm_with(cfg: &ExperimentConfig, s: &Setup, arm: &Arm, seed: u64) -> Result<ArmRun> {
    let g = geometry(cfg, arm)?;
    let out = fit(cfg, s, arm, &g, seed)?;
    Ok(ArmRun {
        seed,
        miou: miou(&confusion(cfg, s, &g, &out.model)?)?,
        curve: out.curve,
    })
}

/// Trains one arm on the seed's training scenes and returns the model.
pub fn train_arm(cfg: &ExperimentConfig, arm: &Arm, seed: u64) -> Result<TrainOutput> {
    cfg.validate()?;
    let s = setup(cfg, seed)?;
    fit(cfg, &s, arm, &geometry(cfg, arm)?, seed)
}

/// Confusion matrix of `model` over the seed's test scenes at the base
/// geometry.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &TinyModel, seed: u64) -> Result<ConfusionMatrix> {
    cfg.validate()?;
    let s = setup(cfg, seed)?;
    if model.vocab_size != s.vocab_size || model.in_dim != feature_dim(cfg.n_classes) {
        return Err(Error::VocabularyMismatch(format!(
            "model has vocab {} and input dim {}, config expects {} and {}",
            model.vocab_size,
            model.in_dim,
            s.vocab_size,
            feature_dim(cfg.n_classes)
        )));
    }
    let arm = Arm {
        name: String::new(),
        loss: LossKind::Ntpm,
        params: cfg.loss,
        scale: None,
    };
    confusion(cfg, &s, &geometry(cfg, &arm)?, model)
}

/// One rendered test scene with its token features and category map.
#[derive(Debug, Clone)]
pub struct SceneCase {
    pub scene: SyntheticScene,
    pub sample: Sample,
    pub cat_map: CategoryTokenMap,
}

/// The `index`-th test scene of a seed at the base geometry.
pub fn test_case(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<SceneCase> {
    cfg.validate()?;
    let s = setup(cfg, seed)?;
    let layout = s
        .test_layouts
        .get(index)
        .ok_or_else(|| Error::InvalidParameter(format!("scene index {index} exceeds n_test {}", cfg.n_test)))?;
    let scene = layout.render(cfg.width, cfg.height, cfg.noise_sigma)?;
    let targets = build_multihot_targets_in(&scene.semantic, cfg.patch, &s.cat_map, cfg.coverage_tau, &s.slice)?;
    let features = pool_features(&scene, cfg.patch)?;
    Ok(SceneCase {
        scene,
        sample: Sample { features, targets },
        cat_map: s.cat_map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub name: String,
    pub loss: LossKind,
    pub k: usize,
    pub scale: Option<f64>,
    /// Percentage points.
    pub miou_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub miou_std: f64,
    pub curve_path: Option<String>,
    pub per_seed: Vec<ArmRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmReport>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Loss curves as CSV: `step,<seed>...` for one arm.
    pub fn curve_csv(&self, arm: &ArmReport) -> String {
        let mut out = String::from("step");
        for r in &arm.per_seed {
            out.push_str(&format!(",seed_{}", r.seed));
        }
        out.push('\n');
        let len = arm.per_seed.iter().map(|r| r.curve.len()).max().unwrap_or(0);
        for step in 0..len {
            out.push_str(&step.to_string());
            for r in &arm.per_seed {
                out.push(',');
                if let Some(v) = r.curve.get(step) {
                    out.push_str(&format!("{v:.10e}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker threads for experiment jobs: `DENSE_NTP_THREADS` when set.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn run_experiment(preset: Preset, seeds: &[u64]) -> Result<ExperimentReport> {
    run_experiment_with(preset, &ExperimentConfig::default(), seeds)
}

/// Runs every (arm, seed) job in parallel and reduces in arm order.
pub fn run_experiment_with(preset: Preset, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one seed is required".into()));
    }
    let arms = preset_arms(preset, cfg);
    let setups: Vec<Setup> = seeds.iter().map(|&s| setup(cfg, s)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..seeds.len()).map(move |s| (a, s))).collect();
    let run = || -> Result<Vec<ArmRun>> {
        jobs.par_iter()
            .map(|&(a, s)| run_arm_with(cfg, &setups[s], &arms[a], seeds[s]))
            .collect()
    };
    let runs = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let mut runs = runs.into_iter();
    let arms = arms
        .into_iter()
        .map(|arm| {
            let per_seed: Vec<ArmRun> = runs.by_ref().take(seeds.len()).collect();
            let scores: Vec<f64> = per_seed.iter().map(|r| 100.0 * r.miou).collect();
            let (miou_mean, miou_std) = mean_std(&scores);
            ArmReport {
                name: arm.name,
                loss: arm.loss,
                k: arm.params.k,
                scale: arm.scale,
                miou_mean,
                miou_std,
                curve_path: None,
                per_seed,
            }
        })
        .collect();
    Ok(ExperimentReport {
        preset: preset.name().to_string(),
        seeds: seeds.to_vec(),
        config: cfg.clone(),
        arms,
    })
}

/// A small random (model, sample) pair for gradient checking: a 2×2 token
/// grid, a random model mode, and (for odd seeds) depth-bin targets merged
/// with the semantic ones so several validity slices are exercised.
pub fn gradcheck_case(seed: u64) -> Result<(TinyModel, Sample)> {
    let n_classes = 3;
    let vocab = experiment_vocabulary(12)?;
    let cat_map = CategoryTokenMap::from_names(&CATEGORY_NAMES[..n_classes], &vocab)?;
    let slice: Vec<TokenId> = vocab.text_ids().collect();
    let (size, patch) = (8, 4);
    let scene = (0..)
        .find_map(|j| {
            SceneLayout::generate(derive_seed(seed, 40 + j), n_classes, 3)
                .and_then(|l| l.render(size, size, 0.2))
                .ok()
        })
        .expect("some layout renders");
    let mut targets = build_multihot_targets_in(&scene.semantic, patch, &cat_map, 0.0, &slice)?;
    let with_depth = seed % 2 == 1;
    let vocab_size = if with_depth {
        let bins = DepthPreset::Nyuv2.quantizer().quantize_map(size, size, &scene.depth_m)?;
        targets = merge_targets(&targets, &build_depth_targets(&bins, patch, &vocab)?)?;
        vocab.len()
    } else {
        vocab.text_ids().end as usize
    };
    let mode = if seed % 4 < 2 { ModelMode::Linear } else { ModelMode::Attn1 };
    let model = TinyModel::new(mode, feature_dim(n_classes), 4, vocab_size, derive_seed(seed, 41));
    Ok((
        model,
        Sample {
            features: pool_features(&scene, patch)?,
            targets,
        },
    ))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_and_arity() {
        let cfg = ExperimentConfig::default();
        assert_eq!("table6-mini".parse::<Preset>().unwrap(), Preset::Table6Mini);
        assert_eq!("table9".parse::<Preset>(), Err(Error::UnknownPreset("table9".into())));
        assert_eq!(preset_arms(Preset::Table3Mini, &cfg).len(), 3);
        assert_eq!(preset_arms(Preset::Table4Mini, &cfg).len(), 6);
        assert_eq!(preset_arms(Preset::Table5Mini, &cfg).len(), 7);
        let t6 = preset_arms(Preset::Table6Mini, &cfg);
        assert_eq!(t6.iter().map(|a| a.params.k).collect::<Vec<_>>(), vec![8, 16, 32, 64, 128]);
    }

    #[test]
    fn scale_geometry() {
        let cfg = ExperimentConfig::default();
        for arm in preset_arms(Preset::Table5Mini, &cfg) {
            let g = geometry(&cfg, &arm).unwrap();
            assert_eq!(g.render_w % 16, 0);
            assert_eq!(g.eval_w, 64);
        }
    }

    #[test]
    fn category_names_tokenize() {
        let v = experiment_vocabulary(10).unwrap();
        let m = CategoryTokenMap::from_names(&CATEGORY_NAMES, &v).unwrap();
        assert_eq!(m.token_set(7).len(), 2);
        assert_eq!(m.token_set(0).len(), 1);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }
}
