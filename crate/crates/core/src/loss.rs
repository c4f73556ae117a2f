//! Multi-label next-token objectives over vision-token logits.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the raw logits `Z` (dense, `L × |V|`, zero outside `M_i`).
//!
//! | kind | per-token structure | reduction |
//! |---|---|---|
//! | `ntpm` | mean over `P_i` + mean over the top-k negatives | sum over tokens |
//! | `indiv_mean` | mean over `P_i` + mean over all of `C_i` | sum over tokens |
//! | `ntp_ce` | softmax cross-entropy against the majority label over `M_i` | sum over tokens |
//! | `raw_bce` | binary cross-entropy on every valid element | mean over valid elements |
//! | `focal` | focal-modulated BCE | mean over valid elements |
//! | `ohem` | BCE on the hardest fraction of elements, ranked jointly | mean over kept elements |
//! | `balanced_bce` | BCE with negatives reweighted by `|P_i| / |C_i|` | divided by valid elements |
//!
//! Top-k selection is a constant index set for differentiation: the gradient
//! does not flow through the ranking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{Role, TargetSet};
use crate::vocab::TokenId;

/// Default negative top-k.
pub const DEFAULT_K: usize = 32;

/// Per-vision-token raw logits over the vocabulary, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    grid_w: usize,
    grid_h: usize,
    vocab_size: usize,
    data: Vec<f64>,
}

impl LogitsGrid {
    pub fn new(grid_w: usize, grid_h: usize, vocab_size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid_w * grid_h * vocab_size {
            return Err(Error::ShapeError(format!(
                "{} logits for {grid_w}x{grid_h} tokens over {vocab_size} ids",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.is_finite()) {
            return Err(Error::ShapeError("logits must be finite".into()));
        }
        Ok(Self {
            grid_w,
            grid_h,
            vocab_size,
            data,
        })
    }

    pub fn zeros(grid_w: usize, grid_h: usize, vocab_size: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            vocab_size,
            data: vec![0.0; grid_w * grid_h * vocab_size],
        }
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

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn get(&self, i: usize, v: usize) -> f64 {
        self.data[i * self.vocab_size + v]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of logit `z` against label `y ∈ {0, 1}`.
#[inline]
pub fn bce(z: f64, positive: bool) -> f64 {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ntpm,
    NtpCe,
    RawBce,
    Focal,
    Ohem,
    BalancedBce,
    IndivMean,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ntpm,
        LossKind::NtpCe,
        LossKind::RawBce,
        LossKind::Focal,
        LossKind::Ohem,
        LossKind::BalancedBce,
        LossKind::IndivMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ntpm => "ntpm",
            LossKind::NtpCe => "ntp_ce",
            LossKind::RawBce => "raw_bce",
            LossKind::Focal => "focal",
            LossKind::Ohem => "ohem",
            LossKind::BalancedBce => "balanced_bce",
            LossKind::IndivMean => "indiv_mean",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownBaseline(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub k: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub ohem_fraction: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            ohem_fraction: 0.25,
        }
    }
}

impl LossParams {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub kind: LossKind,
    pub value: f64,
    /// `∂L/∂Z`, token-major, same layout as [`LogitsGrid`].
    pub grad: Vec<f64>,
    /// Negative top-k used for each token (`ntpm` only, sorted by ID).
    pub relevant_negatives: Vec<Vec<TokenId>>,
    pub k: Option<usize>,
}

#[derive(Serialize)]
struct TokenEntry<'a> {
    positives: &'a [TokenId],
    selected_negatives: &'a [TokenId],
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    value: f64,
    k: Option<usize>,
    per_token: Vec<TokenEntry<'a>>,
}

impl LossReport {
    /// `{ value, k, per_token: [{positives, selected_negatives}] }`
    pub fn to_json(&self, targets: &TargetSet) -> serde_json::Value {
        let per_token = (0..targets.len())
            .map(|i| TokenEntry {
                positives: targets.positives(i),
                selected_negatives: self
                    .relevant_negatives
                    .get(i)
                    .map(Vec::as_slice)
                    .unwrap_or(&[]),
            })
            .collect();
        serde_json::to_value(ReportDoc {
            value: self.value,
            k: self.k,
            per_token,
        })
        .expect("report is always serializable")
    }
}

fn check_shapes(logits: &LogitsGrid, targets: &TargetSet) -> Result<()> {
    if logits.grid_w != targets.grid_w() || logits.grid_h != targets.grid_h() {
        return Err(Error::GridMismatch(format!(
            "logits are {}x{} tokens, targets {}x{}",
            logits.grid_w,
            logits.grid_h,
            targets.grid_w(),
            targets.grid_h()
        )));
    }
    if targets.id_bound() > logits.vocab_size {
        return Err(Error::GridMismatch(format!(
            "targets reference id {} but logits cover {} ids",
            targets.id_bound() - 1,
            logits.vocab_size
        )));
    }
    Ok(())
}

/// `-log p(Y)` under independent per-ID Bernoulli trials, restricted to `M_i`.
pub fn bernoulli_nll(logits: &LogitsGrid, targets: &TargetSet) -> Result<f64> {
    check_shapes(logits, targets)?;
    let mut roles = vec![Role::Invalid; logits.vocab_size];
    let mut total = 0.0;
    for i in 0..logits.len() {
        targets.fill_roles(i, &mut roles);
        let z = logits.token(i);
        for (v, role) in roles.iter().enumerate() {
            match role {
                Role::Invalid => {}
                Role::Positive => total += bce(z[v], true),
                Role::Negative => total += bce(z[v], false),
            }
        }
    }
    Ok(total)
}

/// Descending logit, ascending ID.
fn hardness_order(a: &(f64, TokenId), b: &(f64, TokenId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `min(k, |C_i|)` negatives of a single token, sorted by ID.
fn top_k_negatives(z: &[f64], roles: &[Role], k: usize, scratch: &mut Vec<(f64, TokenId)>) -> Vec<TokenId> {
    scratch.clear();
    scratch.extend(
        roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Negative)
            .map(|(v, _)| (z[v], v as TokenId)),
    );
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, hardness_order);
        scratch.truncate(k);
    }
    let mut ids: Vec<TokenId> = scratch.iter().map(|&(_, v)| v).collect();
    ids.sort_unstable();
    ids
}

/// Per token, the `min(k, |C_i|)` negatives with the largest predicted
/// probability. Sigmoid is monotone, so ranking uses the logits directly.
pub fn select_relevant_negatives(logits: &LogitsGrid, targets: &TargetSet, k: usize) -> Result<Vec<Vec<TokenId>>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    check_shapes(logits, targets)?;
    let mut roles = vec![Role::Invalid; logits.vocab_size];
    let mut scratch = Vec::new();
    Ok((0..logits.len())
        .map(|i| {
            targets.fill_roles(i, &mut roles);
            top_k_negatives(logits.token(i), &roles, k, &mut scratch)
        })
        .collect())
}

/// Independent positive and negative averaging; `k = None` averages over
/// every negative.
fn decoupled(logits: &LogitsGrid, targets: &TargetSet, k: Option<usize>, kind: LossKind) -> Result<LossReport> {
    check_shapes(logits, targets)?;
    let vs = logits.vocab_size;
    let mut roles = vec![Role::Invalid; vs];
    let mut scratch = Vec::new();
    let mut grad = vec![0.0; logits.data.len()];
    let mut selected = Vec::with_capacity(logits.len());
    let mut value = 0.0;
    for i in 0..logits.len() {
        targets.fill_roles(i, &mut roles);
        let z = logits.token(i);
        let g = &mut grad[i * vs..(i + 1) * vs];

        let pos = targets.positives(i);
        if !pos.is_empty() {
            let w = 1.0 / pos.len() as f64;
            let mut s = 0.0;
            for &v in pos {
                let v = v as usize;
                s += softplus(-z[v]);
                g[v] = (sigmoid(z[v]) - 1.0) * w;
            }
            value += s * w;
        }

        let negs = match k {
            Some(k) => top_k_negatives(z, &roles, k, &mut scratch),
            None => roles
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == Role::Negative)
                .map(|(v, _)| v as TokenId)
                .collect(),
        };
        if !negs.is_empty() {
            let w = 1.0 / negs.len() as f64;
            let mut s = 0.0;
            for &v in &negs {
                let v = v as usize;
                s += softplus(z[v]);
                g[v] = sigmoid(z[v]) * w;
            }
            value += s * w;
        }
        if k.is_some() {
            selected.push(negs);
        }
    }
    Ok(LossReport {
        kind,
        value,
        grad,
        relevant_negatives: selected,
        k,
    })
}

/// The multi-label objective with relevant negative sampling.
pub fn ntpm_loss(logits: &LogitsGrid, targets: &TargetSet, k: usize) -> Result<LossReport> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    decoupled(logits, targets, Some(k), LossKind::Ntpm)
}

fn validate(kind: LossKind, params: &LossParams) -> Result<()> {
    match kind {
        LossKind::Ntpm if params.k == 0 => Err(Error::InvalidK),
        LossKind::Focal if !(params.focal_gamma >= 0.0 && params.focal_gamma.is_finite()) => Err(
            Error::InvalidParameter(format!("focal gamma must be >= 0, got {}", params.focal_gamma)),
        ),
        LossKind::Focal if !(0.0..=1.0).contains(&params.focal_alpha) => Err(Error::InvalidParameter(
            format!("focal alpha must lie in [0, 1], got {}", params.focal_alpha),
        )),
        LossKind::Ohem if !(params.ohem_fraction > 0.0 && params.ohem_fraction <= 1.0) => Err(
            Error::InvalidParameter(format!("ohem fraction must lie in (0, 1], got {}", params.ohem_fraction)),
        ),
        _ => Ok(()),
    }
}

/// Any loss kind by name; `ntpm` routes to [`ntpm_loss`].
pub fn compute_loss(kind: LossKind, logits: &LogitsGrid, targets: &TargetSet, params: &LossParams) -> Result<LossReport> {
    validate(kind, params)?;
    match kind {
        LossKind::Ntpm => ntpm_loss(logits, targets, params.k),
        _ => baseline_loss(kind, logits, targets, params),
    }
}

/// The comparison objectives. `ntpm` itself is rejected here.
pub fn baseline_loss(kind: LossKind, logits: &LogitsGrid, targets: &TargetSet, params: &LossParams) -> Result<LossReport> {
    validate(kind, params)?;
    check_shapes(logits, targets)?;
    let (value, grad) = match kind {
        LossKind::Ntpm => return Err(Error::UnknownBaseline("ntpm is not a baseline".into())),
        LossKind::IndivMean => return decoupled(logits, targets, None, LossKind::IndivMean),
        LossKind::NtpCe => ntp_ce(logits, targets),
        LossKind::RawBce => weighted_bce(logits, targets, |_, _, _| 1.0),
        LossKind::BalancedBce => weighted_bce(logits, targets, |positive, n_pos, n_neg| {
            if positive {
                1.0
            } else {
                n_pos as f64 / n_neg as f64
            }
        }),
        LossKind::Focal => focal(logits, targets, params.focal_gamma, params.focal_alpha),
        LossKind::Ohem => ohem(logits, targets, params.ohem_fraction),
    };
    Ok(LossReport {
        kind,
        value,
        grad,
        relevant_negatives: Vec::new(),
        k: None,
    })
}

fn ntp_ce(logits: &LogitsGrid, targets: &TargetSet) -> (f64, Vec<f64>) {
    let vs = logits.vocab_size;
    let mut roles = vec![Role::Invalid; vs];
    let mut grad = vec![0.0; logits.data.len()];
    let mut value = 0.0;
    for i in 0..logits.len() {
        let Some(label) = targets.majority(i) else {
            continue;
        };
        targets.fill_roles(i, &mut roles);
        let z = logits.token(i);
        let valid = || roles.iter().enumerate().filter(|(_, r)| **r != Role::Invalid).map(|(v, _)| v);
        let max = valid().map(|v| z[v]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = valid().map(|v| (z[v] - max).exp()).sum();
        let lse = max + sum.ln();
        let w = 1.0 / label.len() as f64;
        let g = &mut grad[i * vs..(i + 1) * vs];
        for v in valid() {
            g[v] = (z[v] - lse).exp();
        }
        for &v in label {
            value += (lse - z[v as usize]) * w;
            g[v as usize] -= w;
        }
    }
    (value, grad)
}

/// Element-wise BCE with a per-element weight `w(positive, |P_i|, |C_i|)`,
/// divided by the number of valid elements.
fn weighted_bce(logits: &LogitsGrid, targets: &TargetSet, weight: impl Fn(bool, usize, usize) -> f64) -> (f64, Vec<f64>) {
    let vs = logits.vocab_size;
    let mut roles = vec![Role::Invalid; vs];
    let mut grad = vec![0.0; logits.data.len()];
    let mut value = 0.0;
    let mut n_valid = 0usize;
    for i in 0..logits.len() {
        targets.fill_roles(i, &mut roles);
        let n_pos = roles.iter().filter(|r| **r == Role::Positive).count();
        let n_neg = roles.iter().filter(|r| **r == Role::Negative).count();
        n_valid += n_pos + n_neg;
        let z = logits.token(i);
        let g = &mut grad[i * vs..(i + 1) * vs];
        for (v, role) in roles.iter().enumerate() {
            let positive = match role {
                Role::Invalid => continue,
                Role::Positive => true,
                Role::Negative => false,
            };
            let w = weight(positive, n_pos, n_neg);
            value += w * bce(z[v], positive);
            g[v] = w * (sigmoid(z[v]) - if positive { 1.0 } else { 0.0 });
        }
    }
    normalize(value, grad, n_valid)
}

fn normalize(value: f64, mut grad: Vec<f64>, n: usize) -> (f64, Vec<f64>) {
    if n == 0 {
        return (0.0, grad);
    }
    let s = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= s);
    (value * s, grad)
}

/// Focal term and its derivative with respect to the logit.
fn focal_term(z: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let log_p = -softplus(-z);
        let m = q.powf(gamma);
        (-alpha * m * log_p, -alpha * m * (q - gamma * p * log_p))
    } else {
        let log_q = -softplus(z);
        let m = p.powf(gamma);
        (-(1.0 - alpha) * m * log_q, -(1.0 - alpha) * m * (gamma * q * log_q - p))
    }
}

fn focal(logits: &LogitsGrid, targets: &TargetSet, gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let vs = logits.vocab_size;
    let mut roles = vec![Role::Invalid; vs];
    let mut grad = vec![0.0; logits.data.len()];
    let mut value = 0.0;
    let mut n_valid = 0usize;
    for i in 0..logits.len() {
        targets.fill_roles(i, &mut roles);
        let z = logits.token(i);
        let g = &mut grad[i * vs..(i + 1) * vs];
        for (v, role) in roles.iter().enumerate() {
            if *role == Role::Invalid {
                continue;
            }
            let (l, d) = focal_term(z[v], *role == Role::Positive, gamma, alpha);
            value += l;
            g[v] = d;
            n_valid += 1;
        }
    }
    normalize(value, grad, n_valid)
}

/// Flat indices (`token · vocab_size + id`) of the hardest
/// `ceil(fraction · n)` valid elements, ranked jointly over all tokens by
/// element loss, ties to the smaller index. Sorted ascending.
pub fn ohem_selection(logits: &LogitsGrid, targets: &TargetSet, fraction: f64) -> Result<Vec<usize>> {
    check_shapes(logits, targets)?;
    Ok(ohem_kept(logits, targets, fraction).into_iter().map(|e| e.1).collect())
}

/// (loss, flat index, positive), sorted by index.
fn ohem_kept(logits: &LogitsGrid, targets: &TargetSet, fraction: f64) -> Vec<(f64, usize, bool)> {
    let vs = logits.vocab_size;
    let mut roles = vec![Role::Invalid; vs];
    let mut elems: Vec<(f64, usize, bool)> = Vec::new();
    for i in 0..logits.len() {
        targets.fill_roles(i, &mut roles);
        let z = logits.token(i);
        for (v, role) in roles.iter().enumerate() {
            if *role != Role::Invalid {
                let positive = *role == Role::Positive;
                elems.push((bce(z[v], positive), i * vs + v, positive));
            }
        }
    }
    if elems.is_empty() {
        return elems;
    }
    let keep = ((fraction * elems.len() as f64).ceil() as usize).clamp(1, elems.len());
    let order = |a: &(f64, usize, bool), b: &(f64, usize, bool)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if keep < elems.len() {
        elems.select_nth_unstable_by(keep - 1, order);
        elems.truncate(keep);
    }
    elems.sort_unstable_by_key(|e| e.1);
    elems
}

fn ohem(logits: &LogitsGrid, targets: &TargetSet, fraction: f64) -> (f64, Vec<f64>) {
    let elems = ohem_kept(logits, targets, fraction);
    let mut grad = vec![0.0; logits.data.len()];
    if elems.is_empty() {
        return (0.0, grad);
    }
    let w = 1.0 / elems.len() as f64;
    let mut value = 0.0;
    for &(l, idx, positive) in &elems {
        value += l;
        grad[idx] = w * (sigmoid(logits.data[idx]) - if positive { 1.0 } else { 0.0 });
    }
    (value * w, grad)
}
