//! Dense predictions from token logits.
//!
//! Semantic decoding averages each category's token logits per vision
//! token, bilinearly upsamples the per-category fields, and takes an argmax.
//! Depth decoding does the same over the `<custom_1>`..`<custom_1000>` slice.
//! Also here: referring-crop geometry and a PCA view of hidden states.
//!
//! Upsampling uses half-pixel centers (`src = (dst + 0.5) · in/out − 0.5`)
//! with the source coordinate clamped to the grid, so edge pixels replicate.

use rand::{Rng, SeedableRng};
use rand_xorshift::XorShiftRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{sigmoid, LogitsGrid};
use crate::targets::{DenseMap, MapKind, SEMANTIC_IGNORE};
use crate::vocab::{CategoryTokenMap, Vocabulary, MAX_BIN};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_BG_SCALE: f64 = 0.25;
pub const DEFAULT_BG_SCORE: f64 = 0.5;
pub const DEFAULT_DEPTH_PRE_UPSAMPLE: usize = 2;
pub const DEFAULT_PAD_RATIO: f64 = 1.2;
pub const DEFAULT_SHORT_EDGE: u32 = 1280;

const PCA_ITERS: usize = 200;
const PCA_TOL: f64 = 1e-9;
const PCA_SEED: u64 = 0x5eed_0f_bca;

/// Per-token category scores, token-major (`data[i * n_categories + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLogits {
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_categories: usize,
    pub data: Vec<f64>,
}

impl CategoryLogits {
    pub fn new(grid_w: usize, grid_h: usize, n_categories: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid_w * grid_h * n_categories || n_categories == 0 {
            return Err(Error::ShapeError(format!(
                "{} scores for a {grid_w}x{grid_h} grid with {n_categories} categories",
                data.len()
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            n_categories,
            data,
        })
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.n_categories + k]
    }

    /// Category `k` as a row-major `grid_h × grid_w` field.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.n_categories).copied().collect()
    }
}

pub fn aggregate_category_logits(logits: &LogitsGrid, cat_map: &CategoryTokenMap) -> Result<CategoryLogits> {
    let v = logits.vocab_size();
    for (k, set) in cat_map.token_sets().iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyTokenSet(k));
        }
        if let Some(&bad) = set.iter().find(|&&id| id as usize >= v) {
            return Err(Error::VocabularyMismatch(format!(
                "category {k} uses token {bad} but logits cover {v} tokens"
            )));
        }
    }
    let n = cat_map.len();
    let mut data = Vec::with_capacity(logits.len() * n);
    for i in 0..logits.len() {
        let z = logits.token(i);
        for set in cat_map.token_sets() {
            // sets are sorted, so the summation order is fixed
            let sum: f64 = set.iter().map(|&id| z[id as usize]).sum();
            data.push(sum / set.len() as f64);
        }
    }
    CategoryLogits::new(logits.grid_w(), logits.grid_h(), n, data)
}

/// Source index pair and weight of the second for each output coordinate.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if a == b {
        return a;
    }
    (a + w * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resize of one row-major channel.
pub fn bilinear_upsample(channel: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(channel.len(), in_w * in_h, "channel size");
    let xs = axis_taps(in_w, out_w);
    let ys = axis_taps(in_h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = lerp(channel[y0 * in_w + x0], channel[y0 * in_w + x1], wx);
            let bot = lerp(channel[y1 * in_w + x0], channel[y1 * in_w + x1], wx);
            out.push(lerp(top, bot, wy));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    #[default]
    None,
    /// Categories compete as `σ(scale · Ẑ)` against a constant background.
    SigmoidBg { scale: f64, bg_score: f64 },
}

impl Background {
    pub fn sigmoid_default() -> Self {
        Background::SigmoidBg {
            scale: DEFAULT_BG_SCALE,
            bg_score: DEFAULT_BG_SCORE,
        }
    }
}

fn check_decode_args(cat: &CategoryLogits, out_w: usize, out_h: usize, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    if out_w < cat.grid_w || out_h < cat.grid_h {
        return Err(Error::GridMismatch(format!(
            "output {out_w}x{out_h} is smaller than the {}x{} token grid",
            cat.grid_w, cat.grid_h
        )));
    }
    Ok(())
}

/// Pixel-resolution category fields, one vector per category.
fn upsampled_channels(cat: &CategoryLogits, out_w: usize, out_h: usize) -> Vec<Vec<f64>> {
    (0..cat.n_categories)
        .into_par_iter()
        .map(|k| bilinear_upsample(&cat.channel(k), cat.grid_w, cat.grid_h, out_w, out_h))
        .collect()
}

/// Per-pixel scores after the background transform; the background channel,
/// when present, is last.
fn pixel_scores(cat: &CategoryLogits, out_w: usize, out_h: usize, background: Background) -> Vec<Vec<f64>> {
    let mut channels = upsampled_channels(cat, out_w, out_h);
    if let Background::SigmoidBg { scale, bg_score } = background {
        for ch in &mut channels {
            for z in ch.iter_mut() {
                *z = sigmoid(scale * *z);
            }
        }
        channels.push(vec![bg_score; out_w * out_h]);
    }
    channels
}

/// Hard decode. `temperature` is validated but only affects [`soft_map`].
pub fn decode_semantic(
    cat: &CategoryLogits,
    out_w: usize,
    out_h: usize,
    temperature: f64,
    background: Background,
) -> Result<DenseMap> {
    check_decode_args(cat, out_w, out_h, temperature)?;
    let channels = pixel_scores(cat, out_w, out_h, background);
    let n = cat.n_categories;
    let values = (0..out_w * out_h)
        .map(|p| {
            // earlier categories keep ties; a category must strictly beat
            // the background channel (last) to be chosen
            let mut best = 0;
            for k in 1..n {
                if channels[k][p] > channels[best][p] {
                    best = k;
                }
            }
            match channels.get(n) {
                Some(bg) if bg[p] >= channels[best][p] => SEMANTIC_IGNORE,
                _ => best as u32,
            }
        })
        .collect();
    DenseMap::new(out_w, out_h, values, MapKind::Semantic)
}

/// Temperature softmax over the decode channels, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMap {
    pub width: usize,
    pub height: usize,
    /// Includes the background channel in sigmoid-background mode.
    pub channels: usize,
    pub temperature: f64,
    pub data: Vec<f32>,
}

impl SoftMap {
    pub fn prob(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

pub fn soft_map(
    cat: &CategoryLogits,
    out_w: usize,
    out_h: usize,
    temperature: f64,
    background: Background,
) -> Result<SoftMap> {
    check_decode_args(cat, out_w, out_h, temperature)?;
    let channels = pixel_scores(cat, out_w, out_h, background);
    let c = channels.len();
    let px = out_w * out_h;
    let mut data = vec![0f32; c * px];
    for p in 0..px {
        let max = channels.iter().map(|ch| ch[p]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = channels.iter().map(|ch| ((ch[p] - max) / temperature).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (k, e) in exps.iter().enumerate() {
            data[k * px + p] = (e / total) as f32;
        }
    }
    Ok(SoftMap {
        width: out_w,
        height: out_h,
        channels: c,
        temperature,
        data,
    })
}

/// Nearest-neighbor resize of a label map (half-pixel centers).
pub fn resize_nearest(map: &DenseMap, out_w: usize, out_h: usize) -> DenseMap {
    let pick = |d: usize, n_in: usize, n_out: usize| (((d as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut values = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = pick(y, map.height, out_h);
        for x in 0..out_w {
            values.push(map.get(pick(x, map.width, out_w), sy));
        }
    }
    DenseMap {
        width: out_w,
        height: out_h,
        values,
        ignore_value: map.ignore_value,
        kind: map.kind,
    }
}

/// Bin map from the depth-bin logits.
pub fn decode_depth(
    logits: &LogitsGrid,
    vocab: &Vocabulary,
    out_w: usize,
    out_h: usize,
    pre_upsample: usize,
) -> Result<DenseMap> {
    if pre_upsample == 0 {
        return Err(Error::InvalidParameter("pre_upsample must be at least 1".into()));
    }
    let first = vocab.custom(1).expect("bin 1 exists") as usize;
    let last = vocab.custom(MAX_BIN).expect("bin 1000 exists") as usize;
    if logits.vocab_size() <= last {
        return Err(Error::VocabularyMismatch(format!(
            "depth bins need {} logits per token, got {}",
            last + 1,
            logits.vocab_size()
        )));
    }
    let (gw, gh) = (logits.grid_w(), logits.grid_h());
    let (uw, uh) = (gw * pre_upsample, gh * pre_upsample);
    let xs = axis_taps(gw, uw);
    let ys = axis_taps(gh, uh);
    let values: Vec<u32> = (0..uw * uh)
        .into_par_iter()
        .map(|p| {
            let (x0, x1, wx) = xs[p % uw];
            let (y0, y1, wy) = ys[p / uw];
            let t = |x: usize, y: usize| &logits.token(y * gw + x)[first..=last];
            let (a, b, c, d) = (t(x0, y0), t(x1, y0), t(x0, y1), t(x1, y1));
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..a.len() {
                let v = lerp(lerp(a[j], b[j], wx), lerp(c[j], d[j], wx), wy);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u32 + 1
        })
        .collect();
    let up = DenseMap::new(uw, uh, values, MapKind::DepthBins)?;
    Ok(resize_nearest(&up, out_w, out_h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// `(x0, y0, x1, y1)` in pixels.
    pub bbox: (f64, f64, f64, f64),
    pub pad_ratio: f64,
    pub target_short_edge: u32,
    pub box_color: [u8; 3],
}

impl CropSpec {
    pub fn new(bbox: (f64, f64, f64, f64)) -> Self {
        Self {
            bbox,
            pad_ratio: DEFAULT_PAD_RATIO,
            target_short_edge: DEFAULT_SHORT_EDGE,
            box_color: [255, 0, 0],
        }
    }
}

/// Crop rectangle in image pixels plus its resized dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CropMapping {
    /// Padded box before clamping.
    pub padded: (f64, f64, f64, f64),
    /// Integer crop rectangle `[x0, x1) × [y0, y1)` after clamping.
    pub rect: (usize, usize, usize, usize),
    pub resize_w: usize,
    pub resize_h: usize,
}

impl CropMapping {
    pub fn scale_x(&self) -> f64 {
        self.resize_w as f64 / (self.rect.2 - self.rect.0) as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.resize_h as f64 / (self.rect.3 - self.rect.1) as f64
    }

    /// Crop-space pixel sampled by image pixel `(x, y)`, if inside the crop.
    pub fn to_crop(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let (x0, y0, x1, y1) = self.rect;
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            return None;
        }
        let cx = ((x - x0) as f64 + 0.5) * self.scale_x();
        let cy = ((y - y0) as f64 + 0.5) * self.scale_y();
        Some((
            (cx as usize).min(self.resize_w - 1),
            (cy as usize).min(self.resize_h - 1),
        ))
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

pub fn crop_with_padding(image_w: usize, image_h: usize, spec: &CropSpec) -> Result<CropMapping> {
    let (x0, y0, x1, y1) = spec.bbox;
    let degenerate = Error::DegenerateBox(x0, y0, x1, y1);
    let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
    if !finite || x0 >= x1 || y0 >= y1 || !(spec.pad_ratio >= 1.0) || spec.target_short_edge == 0 {
        return Err(degenerate);
    }
    if x0 < 0.0 || y0 < 0.0 || x1 > image_w as f64 || y1 > image_h as f64 {
        return Err(degenerate);
    }
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (hw, hh) = ((x1 - x0) * spec.pad_ratio / 2.0, (y1 - y0) * spec.pad_ratio / 2.0);
    let padded = (cx - hw, cy - hh, cx + hw, cy + hh);
    let rect = (
        padded.0.floor().max(0.0) as usize,
        padded.1.floor().max(0.0) as usize,
        (padded.2.ceil() as usize).min(image_w),
        (padded.3.ceil() as usize).min(image_h),
    );
    let (w, h) = (rect.2 - rect.0, rect.3 - rect.1);
    if w == 0 || h == 0 {
        return Err(degenerate);
    }
    let scale = spec.target_short_edge as f64 / w.min(h) as f64;
    let (resize_w, resize_h) = if w <= h {
        (spec.target_short_edge as usize, round_half_up(h as f64 * scale))
    } else {
        (round_half_up(w as f64 * scale), spec.target_short_edge as usize)
    };
    Ok(CropMapping {
        padded,
        rect,
        resize_w,
        resize_h,
    })
}

/// Places a crop-space mask back onto a background canvas.
pub fn paste_back(crop_mask: &DenseMap, mapping: &CropMapping, canvas_w: usize, canvas_h: usize) -> Result<DenseMap> {
    if crop_mask.width != mapping.resize_w || crop_mask.height != mapping.resize_h {
        return Err(Error::GridMismatch(format!(
            "crop mask is {}x{}, mapping expects {}x{}",
            crop_mask.width, crop_mask.height, mapping.resize_w, mapping.resize_h
        )));
    }
    if mapping.rect.2 > canvas_w || mapping.rect.3 > canvas_h {
        return Err(Error::GridMismatch(format!(
            "crop rectangle {:?} exceeds {canvas_w}x{canvas_h} canvas",
            mapping.rect
        )));
    }
    let mut out = DenseMap::with_ignore(canvas_w, canvas_h, vec![0; canvas_w * canvas_h], crop_mask.kind, crop_mask.ignore_value)?;
    let (x0, y0, x1, y1) = mapping.rect;
    for y in y0..y1 {
        for x in x0..x1 {
            let (cx, cy) = mapping.to_crop(x, y).expect("inside rect");
            out.set(x, y, crop_mask.get(cx, cy));
        }
    }
    Ok(out)
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Draws the outline of the crop box (clipped to the image).
pub fn draw_box(image: &mut RgbImage, spec: &CropSpec, thickness: usize) {
    let (x0, y0, x1, y1) = spec.bbox;
    let clampx = |v: f64| (v.max(0.0) as usize).min(image.width);
    let clampy = |v: f64| (v.max(0.0) as usize).min(image.height);
    let (x0, x1, y0, y1) = (clampx(x0), clampx(x1), clampy(y0), clampy(y1));
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + thickness || x + thickness >= x1 || y < y0 + thickness || y + thickness >= y1;
            if edge {
                image.put(x, y, spec.box_color);
            }
        }
    }
}

/// Deterministic color for label `k` (ignore values render black).
pub fn palette(k: u32) -> [u8; 3] {
    let h = k.wrapping_mul(2654435761);
    [(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]
}

pub fn colorize(map: &DenseMap) -> RgbImage {
    let mut img = RgbImage::filled(map.width, map.height, [0, 0, 0]);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.get(x, y);
            if !map.is_ignore(v) {
                img.put(x, y, palette(v));
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub image: RgbImage,
    /// Unit principal directions (zero vectors where rank ran out).
    pub components: [Vec<f64>; 3],
    pub eigenvalues: [f64; 3],
    /// True when fewer than three components carry variance.
    pub rank_deficient: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top three principal components of per-token features, rendered as RGB.
pub fn pca_rgb(hidden: &[Vec<f64>], grid_w: usize, grid_h: usize) -> Result<PcaResult> {
    let l = hidden.len();
    if l != grid_w * grid_h {
        return Err(Error::GridMismatch(format!("{l} feature vectors for a {grid_w}x{grid_h} grid")));
    }
    if l < 3 {
        return Err(Error::ShapeError(format!("need at least 3 tokens, got {l}")));
    }
    let d = hidden[0].len();
    if d < 3 || hidden.iter().any(|h| h.len() != d) {
        return Err(Error::ShapeError("features must share a dimension of at least 3".into()));
    }
    let mut mean = vec![0.0; d];
    for h in hidden {
        for (m, v) in mean.iter_mut().zip(h) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let centered: Vec<Vec<f64>> = hidden
        .iter()
        .map(|h| h.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += x[a] * x[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= l as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let floor = 1e-9 * trace.max(f64::MIN_POSITIVE);

    let mut rng = XorShiftRng::seed_from_u64(PCA_SEED);
    let mut components: [Vec<f64>; 3] = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut eigenvalues = [0.0; 3];
    let mut rank_deficient = false;
    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..d).map(|a| dot(&m[a * d..(a + 1) * d], v)).collect() };
    for c in 0..3 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let mut lambda = 0.0;
        for _ in 0..PCA_ITERS {
            let w = matvec(&cov, &v);
            let norm = dot(&w, &w).sqrt();
            if norm <= floor {
                lambda = 0.0;
                break;
            }
            let next_lambda = dot(&v, &w);
            let next: Vec<f64> = w.into_iter().map(|x| x / norm).collect();
            let moved = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            // the direction must settle too, or deflation leaves a residue
            let converged = (next_lambda - lambda).abs() <= PCA_TOL * next_lambda.abs().max(1.0) && moved <= PCA_TOL;
            lambda = next_lambda;
            if converged {
                break;
            }
        }
        if trace <= 0.0 || lambda <= floor {
            rank_deficient = true;
            continue;
        }
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        eigenvalues[c] = lambda;
        components[c] = v;
    }

    let mut data = vec![0u8; l * 3];
    for (c, comp) in components.iter().enumerate() {
        let proj: Vec<f64> = centered.iter().map(|x| dot(x, comp)).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, p) in proj.iter().enumerate() {
            data[i * 3 + c] = if hi - lo <= floor.sqrt() {
                128
            } else {
                ((p - lo) / (hi - lo) * 255.0).round() as u8
            };
        }
    }
    Ok(PcaResult {
        image: RgbImage {
            width: grid_w,
            height: grid_h,
            data,
        },
        components,
        eigenvalues,
        rank_deficient,
    })
}
