//! Procedural scenes: a resolution-independent layout of shapes over a
//! background class, rasterized on demand.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xorshift::XorShiftRng;

use crate::error::{Error, Result};
use crate::targets::{DenseMap, MapKind, SEMANTIC_IGNORE};

/// Fraction of pixels knocked out as invalid in every rendered scene.
pub const INVALID_FRACTION: f64 = 0.05;
/// Depth range of generated scenes, in meters.
pub const SCENE_DEPTH_RANGE: (f64, f64) = (0.5, 10.0);

/// Mixes a tag into a seed so independent streams never share state.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64, tag: u64) -> XorShiftRng {
    XorShiftRng::seed_from_u64(derive_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Rect,
    Ellipse,
}

/// Depth plane `d0 + gx·u + gy·v` over normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Plane {
    d0: f64,
    gx: f64,
    gy: f64,
}

impl Plane {
    fn random(rng: &mut XorShiftRng) -> Self {
        let (lo, hi) = SCENE_DEPTH_RANGE;
        Self {
            d0: rng.random_range(lo + 1.0..hi - 1.0),
            gx: rng.random_range(-1.0..1.0),
            gy: rng.random_range(-1.0..1.0),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (lo, hi) = SCENE_DEPTH_RANGE;
        (self.d0 + self.gx * (u - 0.5) + self.gy * (v - 0.5)).clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Shape {
    class: u32,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    plane: Plane,
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (dx, dy) = ((u - self.cx) / self.rx, (v - self.cy) / self.ry);
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// Shapes in painting order over background class 0, in `[0, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub seed: u64,
    pub n_classes: usize,
    background: Plane,
    shapes: Vec<Shape>,
}

impl SceneLayout {
    pub fn generate(seed: u64, n_classes: usize, n_shapes: usize) -> Result<Self> {
        if n_classes < 2 || n_shapes == 0 {
            return Err(Error::DegenerateScene);
        }
        let mut rng = rng_from(seed, 1);
        let background = Plane::random(&mut rng);
        let shapes = (0..n_shapes)
            .map(|_| Shape {
                class: rng.random_range(1..n_classes as u32),
                kind: if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse },
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                rx: rng.random_range(0.08..0.35),
                ry: rng.random_range(0.08..0.35),
                plane: Plane::random(&mut rng),
            })
            .collect();
        Ok(Self {
            seed,
            n_classes,
            background,
            shapes,
        })
    }

    fn top(&self, u: f64, v: f64) -> Option<&Shape> {
        self.shapes.iter().rev().find(|s| s.contains(u, v))
    }

    pub fn class_at(&self, u: f64, v: f64) -> u32 {
        self.top(u, v).map_or(0, |s| s.class)
    }

    pub fn depth_at(&self, u: f64, v: f64) -> f64 {
        self.top(u, v).map_or(self.background, |s| s.plane).at(u, v)
    }

    /// Class map sampled at pixel centers, without invalid pixels.
    pub fn semantic(&self, width: usize, height: usize) -> DenseMap {
        let values = (0..width * height)
            .map(|p| {
                let (u, v) = pixel_center(p, width, height);
                self.class_at(u, v)
            })
            .collect();
        DenseMap::new(width, height, values, MapKind::Semantic).expect("sized by construction")
    }

    pub fn render(&self, width: usize, height: usize, noise_sigma: f64) -> Result<SyntheticScene> {
        render(self, width, height, noise_sigma)
    }
}

fn pixel_center(p: usize, width: usize, height: usize) -> (f64, f64) {
    (
        ((p % width) as f64 + 0.5) / width as f64,
        ((p / width) as f64 + 0.5) / height as f64,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub n_classes: usize,
    /// Invalid pixels carry the ignore value.
    pub semantic: DenseMap,
    /// Meters; invalid pixels are 0.
    pub depth_m: Vec<f64>,
    pub valid: Vec<bool>,
    /// Pixel-major, `feature_dim` values per pixel: class one-hot, depth
    /// over the range maximum, each perturbed by Gaussian noise.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl SyntheticScene {
    pub fn width(&self) -> usize {
        self.semantic.width
    }

    pub fn height(&self) -> usize {
        self.semantic.height
    }

    pub fn feature(&self, p: usize) -> &[f64] {
        &self.features[p * self.feature_dim..(p + 1) * self.feature_dim]
    }
}

pub fn feature_dim(n_classes: usize) -> usize {
    n_classes + 1
}

fn render(layout: &SceneLayout, width: usize, height: usize, noise_sigma: f64) -> Result<SyntheticScene> {
    if width == 0 || height == 0 {
        return Err(Error::GridMismatch(format!("cannot render a {width}x{height} scene")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma {noise_sigma}")));
    }
    let dim = feature_dim(layout.n_classes);
    // one stream per resolution so each rendering is reproducible on its own
    let res_tag = ((width as u64) << 32) | height as u64;
    let mut rng = rng_from(derive_seed(layout.seed, 2), res_tag);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n = width * height;
    let mut sem = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    for p in 0..n {
        let (u, v) = pixel_center(p, width, height);
        let class = layout.class_at(u, v);
        let d = layout.depth_at(u, v);
        let ok = rng.random::<f64>() >= INVALID_FRACTION;
        for j in 0..dim {
            let clean = if j < layout.n_classes {
                (j as u32 == class) as u8 as f64
            } else {
                d / SCENE_DEPTH_RANGE.1
            };
            let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            features.push(clean + eps);
        }
        sem.push(if ok { class } else { SEMANTIC_IGNORE });
        depth.push(if ok { d } else { 0.0 });
        valid.push(ok);
    }
    let mut seen = vec![false; layout.n_classes];
    for &c in sem.iter().filter(|&&c| c != SEMANTIC_IGNORE) {
        seen[c as usize] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateScene);
    }
    Ok(SyntheticScene {
        seed: layout.seed,
        n_classes: layout.n_classes,
        semantic: DenseMap::new(width, height, sem, MapKind::Semantic)?,
        depth_m: depth,
        valid,
        features,
        feature_dim: dim,
    })
}

pub fn generate_scene(
    seed: u64,
    width: usize,
    height: usize,
    n_classes: usize,
    n_shapes: usize,
    noise_sigma: f64,
) -> Result<SyntheticScene> {
    SceneLayout::generate(seed, n_classes, n_shapes)?.render(width, height, noise_sigma)
}

/// Per-token mean features over a token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub grid_w: usize,
    pub grid_h: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// Tokens whose whole patch was invalid (their features are zero).
    pub empty: Vec<bool>,
}

impl TokenFeatures {
    pub fn new(grid_w: usize, grid_h: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid_w * grid_h * dim {
            return Err(Error::ShapeError(format!(
                "{} feature values for {grid_w}x{grid_h} tokens of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            dim,
            data,
            empty: vec![false; grid_w * grid_h],
        })
    }

    pub fn len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn pool_features(scene: &SyntheticScene, patch: usize) -> Result<TokenFeatures> {
    let (w, h) = (scene.width(), scene.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::GridMismatch(format!("{w}x{h} scene is not divisible by patch {patch}")));
    }
    let (gw, gh, dim) = (w / patch, h / patch, scene.feature_dim);
    let mut data = vec![0.0; gw * gh * dim];
    let mut counts = vec![0usize; gw * gh];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !scene.valid[p] {
                continue;
            }
            let t = (y / patch) * gw + x / patch;
            counts[t] += 1;
            for (acc, f) in data[t * dim..(t + 1) * dim].iter_mut().zip(scene.feature(p)) {
                *acc += f;
            }
        }
    }
    for (t, &c) in counts.iter().enumerate() {
        if c > 0 {
            data[t * dim..(t + 1) * dim].iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let mut tf = TokenFeatures::new(gw, gh, dim, data)?;
    tf.empty = counts.iter().map(|&c| c == 0).collect();
    Ok(tf)
}

/// Fraction of tokens whose patch holds at least two valid classes.
pub fn boundary_fraction(semantic: &DenseMap, patch: usize) -> Result<f64> {
    let (w, h) = (semantic.width, semantic.height);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::GridMismatch(format!("{w}x{h} map is not divisible by patch {patch}")));
    }
    let (gw, gh) = (w / patch, h / patch);
    let mut first: Vec<Option<u32>> = vec![None; gw * gh];
    let mut mixed = vec![false; gw * gh];
    for y in 0..h {
        for x in 0..w {
            let v = semantic.get(x, y);
            if semantic.is_ignore(v) {
                continue;
            }
            let t = (y / patch) * gw + x / patch;
            match first[t] {
                None => first[t] = Some(v),
                Some(f) if f != v => mixed[t] = true,
                _ => {}
            }
        }
    }
    Ok(mixed.iter().filter(|&&m| m).count() as f64 / (gw * gh) as f64)
}
