//! Pixel ground truth → per-vision-token supervision.
//!
//! A [`TargetSet`] carries, for every token `i` of the grid, the positive ID
//! set `P_i`, the single-label majority target used by the softmax baseline,
//! and the valid-ID set `M_i`. Validity is stored as a short list of task
//! slices (contiguous blocks of the vocabulary owned by one task) plus one
//! flag per token and slice; `M_i` is the union of the slices flagged valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{CategoryTokenMap, TokenId, Vocabulary, MAX_BIN};

pub const SEMANTIC_IGNORE: u32 = 255;
pub const DEPTH_IGNORE: u32 = 0;
/// Default pixels per token side.
pub const DEFAULT_PATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Semantic,
    DepthBins,
}

impl MapKind {
    pub fn default_ignore(self) -> u32 {
        match self {
            MapKind::Semantic => SEMANTIC_IGNORE,
            MapKind::DepthBins => DEPTH_IGNORE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Semantic => "semantic",
            MapKind::DepthBins => "depth_bins",
        }
    }
}

/// Pixel-resolution label or depth-bin map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u32>,
    pub ignore_value: u32,
    pub kind: MapKind,
}

impl DenseMap {
    pub fn new(width: usize, height: usize, values: Vec<u32>, kind: MapKind) -> Result<Self> {
        Self::with_ignore(width, height, values, kind, kind.default_ignore())
    }

    pub fn with_ignore(
        width: usize,
        height: usize,
        values: Vec<u32>,
        kind: MapKind,
        ignore_value: u32,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::GridMismatch(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            ignore_value,
            kind,
        })
    }

    pub fn filled(width: usize, height: usize, value: u32, kind: MapKind) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            ignore_value: kind.default_ignore(),
            kind,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.values[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_ignore(&self, v: u32) -> bool {
        v == self.ignore_value
    }
}

/// Which task a vocabulary slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Semantic,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSlice {
    pub task: Task,
    /// Sorted, de-duplicated IDs supervised by this task.
    pub ids: Vec<TokenId>,
}

impl TaskSlice {
    pub fn new(task: Task, mut ids: Vec<TokenId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { task, ids }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Per-token membership of one vocabulary ID, see [`TargetSet::fill_roles`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Invalid = 0,
    Negative = 1,
    Positive = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    grid_w: usize,
    grid_h: usize,
    slices: Vec<TaskSlice>,
    positives: Vec<Vec<TokenId>>,
    majority: Vec<Option<Vec<TokenId>>>,
    /// `slice_valid[i * slices.len() + s]`
    slice_valid: Vec<bool>,
}

impl TargetSet {
    /// An empty target set: no slices, no positives.
    pub fn empty(grid_w: usize, grid_h: usize) -> Self {
        let n = grid_w * grid_h;
        Self {
            grid_w,
            grid_h,
            slices: Vec::new(),
            positives: vec![Vec::new(); n],
            majority: vec![None; n],
            slice_valid: Vec::new(),
        }
    }

    /// Assembles a target set from explicit parts and checks the
    /// `majority ⊆ P_i ⊆ M_i` invariants.
    pub fn from_parts(
        grid_w: usize,
        grid_h: usize,
        slices: Vec<TaskSlice>,
        positives: Vec<Vec<TokenId>>,
        majority: Vec<Option<Vec<TokenId>>>,
        slice_valid: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n = grid_w * grid_h;
        if positives.len() != n || majority.len() != n || slice_valid.len() != n {
            return Err(Error::GridMismatch(format!(
                "per-token parts do not match a {grid_w}x{grid_h} grid"
            )));
        }
        let mut flat = Vec::with_capacity(n * slices.len());
        for row in &slice_valid {
            if row.len() != slices.len() {
                return Err(Error::ShapeError(format!(
                    "validity row has {} flags for {} slices",
                    row.len(),
                    slices.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let mut ts = Self {
            grid_w,
            grid_h,
            slices,
            positives: positives
                .into_iter()
                .map(|mut p| {
                    p.sort_unstable();
                    p.dedup();
                    p
                })
                .collect(),
            majority,
            slice_valid: flat,
        };
        for m in ts.majority.iter_mut().flatten() {
            m.sort_unstable();
            m.dedup();
        }
        ts.check()?;
        Ok(ts)
    }

    fn check(&self) -> Result<()> {
        for i in 0..self.len() {
            for &v in &self.positives[i] {
                if !self.is_valid(i, v) {
                    return Err(Error::ShapeError(format!(
                        "token {i}: positive id {v} is outside the valid set"
                    )));
                }
            }
            if let Some(m) = &self.majority[i] {
                if m.is_empty() || m.iter().any(|v| self.positives[i].binary_search(v).is_err()) {
                    return Err(Error::ShapeError(format!(
                        "token {i}: majority target is not a subset of the positives"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    /// Token count `L`.
    pub fn len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slices(&self) -> &[TaskSlice] {
        &self.slices
    }

    pub fn positives(&self, i: usize) -> &[TokenId] {
        &self.positives[i]
    }

    pub fn majority(&self, i: usize) -> Option<&[TokenId]> {
        self.majority[i].as_deref()
    }

    pub fn slice_valid(&self, i: usize, s: usize) -> bool {
        self.slice_valid[i * self.slices.len() + s]
    }

    /// Whether `id ∈ M_i`.
    pub fn is_valid(&self, i: usize, id: TokenId) -> bool {
        self.slices
            .iter()
            .enumerate()
            .any(|(s, slice)| self.slice_valid(i, s) && slice.contains(id))
    }

    /// Whether `M_i` is non-empty.
    pub fn has_valid(&self, i: usize) -> bool {
        self.slices
            .iter()
            .enumerate()
            .any(|(s, slice)| self.slice_valid(i, s) && !slice.ids.is_empty())
    }

    /// Sorted `M_i`.
    pub fn valid_ids(&self, i: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self
            .slices
            .iter()
            .enumerate()
            .filter(|(s, _)| self.slice_valid(i, *s))
            .flat_map(|(_, slice)| slice.ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Writes the role of every vocabulary ID for token `i` into `roles`
    /// (length `|V|`). IDs outside `roles` are ignored.
    pub fn fill_roles(&self, i: usize, roles: &mut [Role]) {
        roles.fill(Role::Invalid);
        for (s, slice) in self.slices.iter().enumerate() {
            if self.slice_valid(i, s) {
                for &v in &slice.ids {
                    if let Some(r) = roles.get_mut(v as usize) {
                        *r = Role::Negative;
                    }
                }
            }
        }
        for &v in &self.positives[i] {
            if let Some(r) = roles.get_mut(v as usize) {
                *r = Role::Positive;
            }
        }
    }

    /// Largest vocabulary ID referenced by any slice, plus one.
    pub fn id_bound(&self) -> usize {
        self.slices
            .iter()
            .filter_map(|s| s.ids.last())
            .map(|&v| v as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

fn check_grid(width: usize, height: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) || width == 0 || height == 0 {
        return Err(Error::GridMismatch(format!(
            "{width}x{height} pixels is not divisible into {patch}-pixel patches"
        )));
    }
    Ok((width / patch, height / patch))
}

/// Per-token class pixel counts (ignore pixels excluded), token-major.
pub fn patch_class_histograms(gt: &DenseMap, patch: usize, n_classes: usize) -> Result<Vec<Vec<u32>>> {
    let (gw, gh) = check_grid(gt.width, gt.height, patch)?;
    let mut hist = vec![vec![0u32; n_classes]; gw * gh];
    for y in 0..gt.height {
        let ty = y / patch;
        for x in 0..gt.width {
            let v = gt.get(x, y);
            if gt.is_ignore(v) {
                continue;
            }
            if v as usize >= n_classes {
                return Err(Error::UnknownClass(v));
            }
            hist[ty * gw + x / patch][v as usize] += 1;
        }
    }
    Ok(hist)
}

/// Multi-hot semantic targets whose semantic slice is the union of the
/// category token sets.
pub fn build_multihot_targets(
    gt: &DenseMap,
    patch: usize,
    cat_map: &CategoryTokenMap,
    coverage_tau: f64,
) -> Result<TargetSet> {
    build_multihot_targets_in(gt, patch, cat_map, coverage_tau, &cat_map.all_ids())
}

/// Like [`build_multihot_targets`] with an explicit semantic slice, e.g. the
/// whole text vocabulary so every non-positive text token is a negative.
pub fn build_multihot_targets_in(
    gt: &DenseMap,
    patch: usize,
    cat_map: &CategoryTokenMap,
    coverage_tau: f64,
    slice_ids: &[TokenId],
) -> Result<TargetSet> {
    if !(0.0..1.0).contains(&coverage_tau) {
        return Err(Error::InvalidParameter(format!(
            "coverage_tau must lie in [0, 1), got {coverage_tau}"
        )));
    }
    let (gw, gh) = check_grid(gt.width, gt.height, patch)?;
    let hist = patch_class_histograms(gt, patch, cat_map.len())?;
    let slice = TaskSlice::new(Task::Semantic, slice_ids.to_vec());
    if let Some(k) = (0..cat_map.len()).find(|&k| cat_map.token_set(k).iter().any(|v| !slice.contains(*v))) {
        return Err(Error::VocabularyMismatch(format!(
            "category {k} has token ids outside the semantic slice"
        )));
    }

    let n = gw * gh;
    let mut positives = Vec::with_capacity(n);
    let mut majority = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for counts in &hist {
        let total: u32 = counts.iter().sum();
        if total == 0 {
            positives.push(Vec::new());
            majority.push(None);
            valid.push(vec![false]);
            continue;
        }
        let mut pos = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 && c as f64 / total as f64 > coverage_tau {
                pos.extend_from_slice(cat_map.token_set(k));
            }
        }
        // first maximum wins, i.e. smallest class index on ties
        let (best, _) = counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (k, &c)| if c > acc.1 { (k, c) } else { acc });
        positives.push(pos);
        majority.push(Some(cat_map.token_set(best).to_vec()));
        valid.push(vec![true]);
    }
    // The majority class always clears the coverage threshold unless tau
    // removes every class; keep the invariant by dropping the majority then.
    for (p, m) in positives.iter_mut().zip(majority.iter_mut()) {
        p.sort_unstable();
        p.dedup();
        if let Some(ids) = m {
            if ids.iter().any(|v| p.binary_search(v).is_err()) {
                *m = None;
            }
        }
    }
    TargetSet::from_parts(gw, gh, vec![slice], positives, majority, valid)
}

/// Depth-bin targets: every distinct nonzero bin in a patch is positive.
pub fn build_depth_targets(bins: &DenseMap, patch: usize, vocab: &Vocabulary) -> Result<TargetSet> {
    let (gw, gh) = check_grid(bins.width, bins.height, patch)?;
    if let Some(&b) = bins.values.iter().find(|&&b| b > MAX_BIN) {
        return Err(Error::BinOutOfRange(b));
    }
    let n = gw * gh;
    let mut counts: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    for y in 0..bins.height {
        for x in 0..bins.width {
            let b = bins.get(x, y);
            if b == DEPTH_IGNORE {
                continue;
            }
            let cell = &mut counts[(y / patch) * gw + x / patch];
            match cell.iter_mut().find(|(bin, _)| *bin == b) {
                Some(e) => e.1 += 1,
                None => cell.push((b, 1)),
            }
        }
    }
    let custom = |b: u32| vocab.custom(b).expect("bin checked against MAX_BIN");
    let mut positives = Vec::with_capacity(n);
    let mut majority = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for mut cell in counts {
        if cell.is_empty() {
            positives.push(Vec::new());
            majority.push(None);
            valid.push(vec![false]);
            continue;
        }
        cell.sort_unstable();
        let best = cell
            .iter()
            .fold((0u32, 0u32), |acc, &(b, c)| if c > acc.1 { (b, c) } else { acc });
        positives.push(cell.iter().map(|&(b, _)| custom(b)).collect());
        majority.push(Some(vec![custom(best.0)]));
        valid.push(vec![true]);
    }
    let slice = TaskSlice::new(Task::Depth, vocab.depth_bin_ids().collect());
    TargetSet::from_parts(gw, gh, vec![slice], positives, majority, valid)
}

/// Per-token union of two target sets. The majority label of `a` is kept.
pub fn merge_targets(a: &TargetSet, b: &TargetSet) -> Result<TargetSet> {
    if a.grid_w != b.grid_w || a.grid_h != b.grid_h {
        return Err(Error::GridMismatch(format!(
            "{}x{} vs {}x{} token grids",
            a.grid_w, a.grid_h, b.grid_w, b.grid_h
        )));
    }
    let mut slices = a.slices.clone();
    // index into `slices` for each of b's slices
    let mut b_slot = Vec::with_capacity(b.slices.len());
    for s in &b.slices {
        match slices.iter().position(|t| t == s) {
            Some(p) => b_slot.push(p),
            None => {
                slices.push(s.clone());
                b_slot.push(slices.len() - 1);
            }
        }
    }
    let n = a.len();
    let mut positives = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = a.positives[i].clone();
        p.extend_from_slice(&b.positives[i]);
        positives.push(p);
        let mut row = vec![false; slices.len()];
        for s in 0..a.slices.len() {
            row[s] = a.slice_valid(i, s);
        }
        for (s, &slot) in b_slot.iter().enumerate() {
            row[slot] |= b.slice_valid(i, s);
        }
        valid.push(row);
    }
    TargetSet::from_parts(a.grid_w, a.grid_h, slices, positives, a.majority.clone(), valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, with_characters};
    use proptest::prelude::*;

    fn setup() -> (Vocabulary, CategoryTokenMap) {
        let v = build_vocabulary(&with_characters(&["c0", "c1", "c2", "c3"])).unwrap();
        let m = CategoryTokenMap::from_names(&["c0", "c1", "c2", "c3"], &v).unwrap();
        (v, m)
    }

    #[test]
    fn single_class_patch() {
        let (_, m) = setup();
        let gt = DenseMap::new(2, 2, vec![3; 4], MapKind::Semantic).unwrap();
        let t = build_multihot_targets(&gt, 2, &m, 0.0).unwrap();
        assert_eq!(t.positives(0), m.token_set(3));
        assert_eq!(t.majority(0), Some(m.token_set(3)));
    }

    #[test]
    fn half_half_patch_tie_breaks_to_smaller_class() {
        let (_, m) = setup();
        let gt = DenseMap::new(2, 2, vec![2, 1, 1, 2], MapKind::Semantic).unwrap();
        let t = build_multihot_targets(&gt, 2, &m, 0.0).unwrap();
        assert_eq!(t.positives(0), &[1, 2]);
        assert_eq!(t.majority(0), Some(&[1][..]));
    }

    #[test]
    fn fully_ignored_patch_loses_semantic_slice() {
        let (_, m) = setup();
        let gt = DenseMap::new(4, 2, vec![255, 255, 0, 0, 255, 255, 0, 1], MapKind::Semantic).unwrap();
        let t = build_multihot_targets(&gt, 2, &m, 0.0).unwrap();
        assert!(t.positives(0).is_empty());
        assert_eq!(t.majority(0), None);
        assert!(!t.has_valid(0));
        assert!(t.valid_ids(0).is_empty());
        assert!(t.has_valid(1));
        assert_eq!(t.positives(1), &[0, 1]);
    }

    #[test]
    fn errors() {
        let (v, m) = setup();
        let gt = DenseMap::new(3, 2, vec![0; 6], MapKind::Semantic).unwrap();
        assert!(matches!(build_multihot_targets(&gt, 2, &m, 0.0), Err(Error::GridMismatch(_))));
        let gt = DenseMap::new(2, 2, vec![0, 9, 0, 0], MapKind::Semantic).unwrap();
        assert_eq!(build_multihot_targets(&gt, 2, &m, 0.0), Err(Error::UnknownClass(9)));
        let bins = DenseMap::new(2, 1, vec![3, 1001], MapKind::DepthBins).unwrap();
        assert_eq!(build_depth_targets(&bins, 1, &v), Err(Error::BinOutOfRange(1001)));
        assert!(DenseMap::new(2, 2, vec![0; 3], MapKind::Semantic).is_err());
    }

    #[test]
    fn depth_targets() {
        let (v, _) = setup();
        let bins = DenseMap::new(4, 2, vec![500, 500, 499, 500, 500, 500, 0, 499], MapKind::DepthBins).unwrap();
        let t = build_depth_targets(&bins, 2, &v).unwrap();
        assert_eq!(t.positives(0), &[v.custom(500).unwrap()]);
        assert_eq!(t.positives(1), &[v.custom(499).unwrap(), v.custom(500).unwrap()]);
        // 499 twice, 500 once
        assert_eq!(t.majority(1), Some(&[v.custom(499).unwrap()][..]));
        assert!(!t.is_valid(1, v.custom(0).unwrap()));

        let zeros = DenseMap::new(2, 2, vec![0; 4], MapKind::DepthBins).unwrap();
        let t = build_depth_targets(&zeros, 2, &v).unwrap();
        assert!(!t.has_valid(0));
    }

    #[test]
    fn merge_unions_per_token() {
        let (v, m) = setup();
        let gt = DenseMap::new(2, 1, vec![0, 1], MapKind::Semantic).unwrap();
        let sem = build_multihot_targets(&gt, 1, &m, 0.0).unwrap();
        let empty = TargetSet::empty(2, 1);
        assert_eq!(merge_targets(&sem, &empty).unwrap(), sem);

        let bins = DenseMap::new(2, 1, vec![10, 0], MapKind::DepthBins).unwrap();
        let dep = build_depth_targets(&bins, 1, &v).unwrap();
        let both = merge_targets(&sem, &dep).unwrap();
        assert_eq!(both.positives(0).len(), 2);
        assert_eq!(both.positives(1).len(), 1);
        assert_eq!(both.majority(0), sem.majority(0));
        assert!(both.is_valid(0, v.custom(10).unwrap()));
        assert!(!both.is_valid(1, v.custom(10).unwrap()));

        assert_eq!(merge_targets(&sem, &sem).unwrap(), sem);
        assert!(matches!(merge_targets(&sem, &TargetSet::empty(1, 2)), Err(Error::GridMismatch(_))));
    }

    proptest! {
        #[test]
        fn rasterization_is_lossless(vals in proptest::collection::vec(prop_oneof![0u32..4, Just(255u32)], 36)) {
            let gt = DenseMap::new(6, 6, vals.clone(), MapKind::Semantic).unwrap();
            let hist = patch_class_histograms(&gt, 3, 4).unwrap();
            let mut global = [0u32; 4];
            for v in vals.iter().filter(|&&v| v != 255) {
                global[*v as usize] += 1;
            }
            let mut summed = [0u32; 4];
            for h in &hist {
                for k in 0..4 { summed[k] += h[k]; }
            }
            prop_assert_eq!(summed, global);
        }

        #[test]
        fn coverage_threshold_only_shrinks(vals in proptest::collection::vec(0u32..4, 36), t1 in 0.0f64..0.99, t2 in 0.0f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (_, m) = setup();
            let gt = DenseMap::new(6, 6, vals, MapKind::Semantic).unwrap();
            let a = build_multihot_targets(&gt, 3, &m, lo).unwrap();
            let b = build_multihot_targets(&gt, 3, &m, hi).unwrap();
            for i in 0..a.len() {
                prop_assert!(b.positives(i).iter().all(|v| a.positives(i).contains(v)));
            }
        }

        #[test]
        fn single_class_image(k in 0u32..4) {
            let (_, m) = setup();
            let gt = DenseMap::new(6, 6, vec![k; 36], MapKind::Semantic).unwrap();
            let t = build_multihot_targets(&gt, 3, &m, 0.0).unwrap();
            for i in 0..t.len() {
                prop_assert_eq!(t.positives(i), m.token_set(k as usize));
                prop_assert_eq!(t.majority(i), Some(m.token_set(k as usize)));
            }
        }
    }
}
