//! Segmentation and depth metrics, plus the label-set reward.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::targets::DenseMap;

pub const DELTA1: f64 = 1.25;

/// Pixel tallies `counts[gt][pred]`. Column `n_classes` collects
/// predictions that are not a class (ignore value or out of range); pixels
/// whose ground truth is ignore are skipped entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * (n_classes + 1)],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `pred == n_classes` reads the void column.
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.n_classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one pixel; `gt` must be a class index.
    pub fn add(&mut self, gt: u32, pred: Option<u32>) -> Result<()> {
        let g = gt as usize;
        if g >= self.n_classes {
            return Err(Error::UnknownClass(gt));
        }
        let p = match pred {
            Some(p) if (p as usize) < self.n_classes => p as usize,
            _ => self.n_classes,
        };
        self.counts[g * (self.n_classes + 1) + p] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, gt: &DenseMap, pred: &DenseMap) -> Result<()> {
        if gt.width != pred.width || gt.height != pred.height {
            return Err(Error::GridMismatch(format!(
                "gt {}x{} vs prediction {}x{}",
                gt.width, gt.height, pred.width, pred.height
            )));
        }
        for (&g, &p) in gt.values.iter().zip(&pred.values) {
            if gt.is_ignore(g) {
                continue;
            }
            self.add(g, (!pred.is_ignore(p)).then_some(p))?;
        }
        Ok(())
    }

    pub fn from_maps(n_classes: usize, gt: &DenseMap, pred: &DenseMap) -> Result<Self> {
        let mut cm = Self::new(n_classes);
        cm.accumulate(gt, pred)?;
        Ok(cm)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::ShapeError(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(intersection, union)` for class `c`.
    pub fn intersection_union(&self, c: usize) -> (u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..=self.n_classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.n_classes).map(|g| self.get(g, c)).sum();
        (tp, row + col - tp)
    }

    /// IoU per class; `None` where the class is absent from both sides.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let (i, u) = self.intersection_union(c);
                (u > 0).then(|| i as f64 / u as f64)
            })
            .collect()
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::NoValidPixels);
    }
    let ious: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Cumulative IoU: intersections and unions summed before dividing.
pub fn ciou(samples: &[(u64, u64)]) -> Result<f64> {
    let (i, u) = samples
        .iter()
        .fold((0u64, 0u64), |(si, su), &(i, u)| (si + i, su + u));
    if u == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(i as f64 / u as f64)
}

/// Foreground `(intersection, union)` of one mask pair; ignore pixels in
/// the ground truth are skipped.
pub fn mask_intersection_union(gt: &DenseMap, pred: &DenseMap, fg: u32) -> Result<(u64, u64)> {
    if gt.width != pred.width || gt.height != pred.height {
        return Err(Error::GridMismatch(format!(
            "gt {}x{} vs prediction {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let (mut i, mut u) = (0, 0);
    for (&g, &p) in gt.values.iter().zip(&pred.values) {
        if gt.is_ignore(g) {
            continue;
        }
        let (a, b) = (g == fg, p == fg);
        i += (a && b) as u64;
        u += (a || b) as u64;
    }
    Ok((i, u))
}

/// Fraction of valid pixels with `max(p/g, g/p) < thresh`. A pixel is
/// valid when both depths are positive and finite and `valid` (if given)
/// marks it.
pub fn delta_threshold(pred_m: &[f64], gt_m: &[f64], valid: Option<&[bool]>, thresh: f64) -> Result<f64> {
    if !(thresh > 1.0) {
        return Err(Error::InvalidParameter(format!("threshold must exceed 1, got {thresh}")));
    }
    if pred_m.len() != gt_m.len() || valid.is_some_and(|v| v.len() != gt_m.len()) {
        return Err(Error::GridMismatch("depth maps differ in length".into()));
    }
    let ok = |d: f64| d > 0.0 && d.is_finite();
    let (mut hit, mut n) = (0u64, 0u64);
    for (idx, (&p, &g)) in pred_m.iter().zip(gt_m).enumerate() {
        if !ok(p) || !ok(g) || valid.is_some_and(|v| !v[idx]) {
            continue;
        }
        n += 1;
        hit += ((p / g).max(g / p) < thresh) as u64;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(hit as f64 / n as f64)
}

/// Rectangular validity crop given as fractions trimmed from each side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidCrop {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl ValidCrop {
    pub fn mask(&self, width: usize, height: usize) -> Vec<bool> {
        let x0 = (self.left * width as f64).round() as usize;
        let x1 = width - ((self.right * width as f64).round() as usize).min(width);
        let y0 = (self.top * height as f64).round() as usize;
        let y1 = height - ((self.bottom * height as f64).round() as usize).min(height);
        (0..height)
            .flat_map(|y| (0..width).map(move |x| x >= x0 && x < x1 && y >= y0 && y < y1))
            .collect()
    }
}

/// `|A ∩ B| / |A ∪ B|` over category names; two empty sets score 1.
pub fn label_set_iou<S: AsRef<str>>(pred_refs: &[S], gt_refs: &[S]) -> f64 {
    let a: BTreeSet<&str> = pred_refs.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = gt_refs.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MetricReport {
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub ciou: Option<f64>,
    pub delta1: Option<f64>,
    pub label_set_iou: Option<f64>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self {
            miou: miou(cm).ok(),
            per_class_iou: cm.per_class_iou(),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::MapKind;

    fn sem(v: Vec<u32>) -> DenseMap {
        DenseMap::new(v.len(), 1, v, MapKind::Semantic).unwrap()
    }

    #[test]
    fn miou_examples() {
        let cm = ConfusionMatrix::from_maps(2, &sem(vec![0, 0, 1, 1]), &sem(vec![0, 0, 1, 1])).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_maps(2, &sem(vec![0; 4]), &sem(vec![1; 4])).unwrap();
        assert_eq!(miou(&cm).unwrap(), 0.0);
        let cm = ConfusionMatrix::from_maps(2, &sem(vec![0, 0, 1, 1]), &sem(vec![0, 1, 1, 1])).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_and_void() {
        // class 2 never appears; void predictions count against recall
        let cm = ConfusionMatrix::from_maps(3, &sem(vec![0, 0, 1, 255]), &sem(vec![0, 255, 1, 0])).unwrap();
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.get(0, 3), 1);
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(1.0), None]);
        assert_eq!(miou(&ConfusionMatrix::new(3)), Err(Error::NoValidPixels));
        assert_eq!(
            ConfusionMatrix::from_maps(2, &sem(vec![7]), &sem(vec![0])),
            Err(Error::UnknownClass(7))
        );
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = ConfusionMatrix::from_maps(2, &sem(vec![0, 1]), &sem(vec![0, 0])).unwrap();
        let b = ConfusionMatrix::from_maps(2, &sem(vec![1, 1]), &sem(vec![1, 0])).unwrap();
        a.merge(&b).unwrap();
        let whole = ConfusionMatrix::from_maps(2, &sem(vec![0, 1, 1, 1]), &sem(vec![0, 0, 1, 0])).unwrap();
        assert_eq!(a, whole);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn ciou_examples() {
        assert_eq!(ciou(&[(5, 5)]).unwrap(), 1.0);
        assert_eq!(ciou(&[(1, 2), (3, 3)]).unwrap(), 0.8);
        assert_eq!(ciou(&[(0, 4), (0, 2)]).unwrap(), 0.0);
        assert_eq!(ciou(&[(0, 0)]), Err(Error::NoValidPixels));
        let iu = mask_intersection_union(&sem(vec![1, 1, 0, 0]), &sem(vec![1, 0, 1, 0]), 1).unwrap();
        assert_eq!(iu, (1, 3));
    }

    #[test]
    fn delta_examples() {
        let gt = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(delta_threshold(&gt, &gt, None, DELTA1).unwrap(), 1.0);
        let far: Vec<f64> = gt.iter().map(|g| g * 1.3).collect();
        assert_eq!(delta_threshold(&far, &gt, None, DELTA1).unwrap(), 0.0);
        let half = vec![1.0, 2.0, 6.0, 8.0];
        assert_eq!(delta_threshold(&half, &gt, None, DELTA1).unwrap(), 0.5);
        assert_eq!(delta_threshold(&[1.25], &[1.0], None, DELTA1).unwrap(), 0.0);
        assert_eq!(delta_threshold(&[0.0], &[1.0], None, DELTA1), Err(Error::NoValidPixels));
        assert!(delta_threshold(&gt, &gt, None, 1.0).is_err());
        let mask = [true, false, false, false];
        assert_eq!(delta_threshold(&half, &gt, Some(&mask), DELTA1).unwrap(), 1.0);
    }

    #[test]
    fn valid_crop_mask() {
        let crop = ValidCrop {
            left: 0.25,
            bottom: 0.5,
            ..ValidCrop::default()
        };
        let m = crop.mask(4, 2);
        assert_eq!(m, vec![false, true, true, true, false, false, false, false]);
    }

    #[test]
    fn label_set_examples() {
        assert_eq!(label_set_iou(&["a", "b"], &["b", "a"]), 1.0);
        assert_eq!(label_set_iou(&["a"], &["b"]), 0.0);
        assert_eq!(label_set_iou(&["sky", "road"], &["road", "car", "tree"]), 0.25);
        assert_eq!(label_set_iou::<&str>(&[], &[]), 1.0);
    }
}
