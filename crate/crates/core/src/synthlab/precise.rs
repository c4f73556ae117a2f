//! Double-double (~106-bit) evaluation of the model loss.
//!
//! Central differences at `h = 1e-6` lose roughly `ε·|L| / h ≈ 1e-9` to
//! cancellation when the loss is evaluated in plain `f64`, which swamps
//! any gradient component much below `1e-3`. Gradient checks therefore
//! evaluate `L(θ ± h)` with this separate implementation while the weights
//! themselves stay `f64`. Sample selections (ntpm's top-k negatives, the
//! ohem kept set) are frozen at the unperturbed weights, the same way the
//! analytic gradient treats them.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::model::{ModelMode, TinyModel};
use super::scene::TokenFeatures;
use crate::error::{Error, Result};
use crate::loss::{ohem_selection, select_relevant_negatives, LogitsGrid, LossKind, LossParams};
use crate::targets::{Role, TargetSet};
use crate::vocab::TokenId;

/// An unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// `1/n!` for `n = 1..=9`.
const INV_FACT: [Dd; 9] = [
    Dd { hi: 1.0, lo: 0.0 },
    Dd { hi: 0.5, lo: 0.0 },
    Dd { hi: 1.666_666_666_666_666_6e-1, lo: 9.251_858_538_542_97e-18 },
    Dd { hi: 4.166_666_666_666_666_4e-2, lo: 2.312_964_634_635_742_6e-18 },
    Dd { hi: 8.333_333_333_333_333e-3, lo: 1.156_482_317_317_871_3e-19 },
    Dd { hi: 1.388_888_888_888_889e-3, lo: -5.300_543_954_373_577e-20 },
    Dd { hi: 1.984_126_984_126_984e-4, lo: 1.720_955_829_342_070_6e-22 },
    Dd { hi: 2.480_158_730_158_73e-5, lo: 2.151_194_786_677_588_3e-23 },
    Dd { hi: 2.755_731_922_398_589e-6, lo: -1.858_393_274_046_472e-22 },
];

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub const fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Exact product of two doubles.
    pub fn prod(a: f64, b: f64) -> Self {
        let (hi, lo) = two_prod(a, b);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn max(self, o: Self) -> Self {
        if o > self {
            o
        } else {
            self
        }
    }

    /// Multiplies by `2^k` (exact barring overflow or underflow).
    fn ldexp(self, k: i32) -> Self {
        let (a, b) = (k / 2, k - k / 2);
        let (fa, fb) = (2f64.powi(a), 2f64.powi(b));
        Dd {
            hi: self.hi * fa * fb,
            lo: self.lo * fa * fb,
        }
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).ldexp(-10);
        // |r| < 3.4e-4, so nine Taylor terms reach ~1e-37
        let mut sum = Dd::ONE;
        let mut pow = Dd::ONE;
        for c in INV_FACT {
            pow = pow * r;
            sum = sum + pow * c;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    /// Natural log of a positive value, by Newton steps on `exp`.
    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(f64::NAN);
        }
        // one Newton step doubles the f64 start's precision
        let y = Dd::new(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }

    /// `x^γ` for `x ≥ 0`.
    pub fn pow(self, gamma: f64) -> Self {
        if gamma == 0.0 {
            return Dd::ONE;
        }
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        if gamma.fract() == 0.0 && gamma <= 64.0 {
            let mut out = Dd::ONE;
            for _ in 0..gamma as u32 {
                out = out * self;
            }
            return out;
        }
        (self.ln() * Dd::new(gamma)).exp()
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Dd::norm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl std::iter::Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

/// `log(1 + e^x)`.
pub fn softplus(x: Dd) -> Dd {
    x.max(Dd::ZERO) + (Dd::ONE + (-x.abs()).exp()).ln()
}

pub fn sigmoid(x: Dd) -> Dd {
    if x.hi >= 0.0 {
        Dd::ONE / (Dd::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (Dd::ONE + e)
    }
}

fn bce(z: Dd, positive: bool) -> Dd {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// `Σ_c m[r, c] · x_c` for each row.
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[Dd]) -> Vec<Dd> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| Dd::new(a) * b).sum())
        .collect()
}

/// Token logits, row-major `(token, vocab)`.
pub fn logits(model: &TinyModel, feats: &TokenFeatures) -> Result<Vec<Dd>> {
    if feats.dim != model.in_dim {
        return Err(Error::ShapeError(format!(
            "features have dim {}, model expects {}",
            feats.dim, model.in_dim
        )));
    }
    let (l, d) = (feats.len(), model.hidden);
    let mut h: Vec<Vec<Dd>> = (0..l)
        .map(|i| {
            let f: Vec<Dd> = feats.token(i).iter().map(|&x| Dd::new(x)).collect();
            let mut hi = matvec(model.a(), d, model.in_dim, &f);
            hi.iter_mut().zip(model.a0()).for_each(|(v, &b)| *v = *v + Dd::new(b));
            hi
        })
        .collect();
    if model.mode == ModelMode::Attn1 {
        let (wq, wk, wv) = model.attn();
        let scale = Dd::new(1.0 / (d as f64).sqrt());
        let q: Vec<Vec<Dd>> = h.iter().map(|x| matvec(wq, d, d, x)).collect();
        let k: Vec<Vec<Dd>> = h.iter().map(|x| matvec(wk, d, d, x)).collect();
        let mut out = h.clone();
        for i in 0..l {
            let s: Vec<Dd> = (0..l)
                .map(|j| scale * q[i].iter().zip(&k[j]).map(|(&a, &b)| a * b).sum::<Dd>())
                .collect();
            let m = s.iter().copied().fold(s[0], Dd::max);
            let e: Vec<Dd> = s.iter().map(|&x| (x - m).exp()).collect();
            let total: Dd = e.iter().copied().sum();
            let mut u = vec![Dd::ZERO; d];
            for j in 0..l {
                let p = e[j] / total;
                for t in 0..d {
                    u[t] = u[t] + p * h[j][t];
                }
            }
            for (o, v) in out[i].iter_mut().zip(matvec(wv, d, d, &u)) {
                *o = *o + v;
            }
        }
        h = out;
    }
    let v = model.vocab_size;
    let mut z = Vec::with_capacity(l * v);
    for hi in &h {
        z.extend(matvec(&model.head, v, d, hi));
    }
    Ok(z)
}

/// Data-dependent choices held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    None,
    /// ntpm: the relevant negatives of each token.
    Negatives(Vec<Vec<TokenId>>),
    /// ohem: flat indices of the kept elements.
    Kept(Vec<usize>),
}

impl Selection {
    /// The selection the f64 loss makes at the given logits.
    pub fn at(kind: LossKind, z: &LogitsGrid, targets: &TargetSet, params: &LossParams) -> Result<Self> {
        Ok(match kind {
            LossKind::Ntpm => Selection::Negatives(select_relevant_negatives(z, targets, params.k)?),
            LossKind::Ohem => Selection::Kept(ohem_selection(z, targets, params.ohem_fraction)?),
            _ => Selection::None,
        })
    }
}

/// The loss of `kind` at logits `z` under a frozen selection.
pub fn loss(
    kind: LossKind,
    z: &[Dd],
    vocab_size: usize,
    targets: &TargetSet,
    params: &LossParams,
    sel: &Selection,
) -> Result<Dd> {
    if z.len() != targets.len() * vocab_size {
        return Err(Error::ShapeError("logits do not match the target grid".into()));
    }
    let mut roles = vec![Role::Invalid; vocab_size];
    let mut value = Dd::ZERO;
    let mut n_valid = 0usize;
    for i in 0..targets.len() {
        targets.fill_roles(i, &mut roles);
        let zi = &z[i * vocab_size..(i + 1) * vocab_size];
        let valid = || (0..vocab_size).filter(|&v| roles[v] != Role::Invalid);
        let negatives = || (0..vocab_size).filter(|&v| roles[v] == Role::Negative);
        let n_pos = valid().filter(|&v| roles[v] == Role::Positive).count();
        let n_neg = negatives().count();
        n_valid += n_pos + n_neg;
        match kind {
            LossKind::Ntpm | LossKind::IndivMean => {
                let pos = targets.positives(i);
                if !pos.is_empty() {
                    let s: Dd = pos.iter().map(|&v| softplus(-zi[v as usize])).sum();
                    value = value + s / Dd::new(pos.len() as f64);
                }
                let negs: Vec<usize> = match (kind, sel) {
                    (LossKind::Ntpm, Selection::Negatives(n)) => n[i].iter().map(|&v| v as usize).collect(),
                    (LossKind::Ntpm, _) => return Err(Error::InvalidParameter("ntpm needs a frozen selection".into())),
                    _ => negatives().collect(),
                };
                if !negs.is_empty() {
                    let s: Dd = negs.iter().map(|&v| softplus(zi[v])).sum();
                    value = value + s / Dd::new(negs.len() as f64);
                }
            }
            LossKind::NtpCe => {
                let Some(label) = targets.majority(i) else {
                    continue;
                };
                let m = valid().map(|v| zi[v]).fold(Dd::new(f64::NEG_INFINITY), Dd::max);
                let lse = m + valid().map(|v| (zi[v] - m).exp()).sum::<Dd>().ln();
                let w = Dd::new(label.len() as f64);
                for &v in label {
                    value = value + (lse - zi[v as usize]) / w;
                }
            }
            LossKind::RawBce => {
                for v in valid() {
                    value = value + bce(zi[v], roles[v] == Role::Positive);
                }
            }
            LossKind::BalancedBce => {
                let wneg = Dd::new(n_pos as f64) / Dd::new(n_neg.max(1) as f64);
                for v in valid() {
                    let positive = roles[v] == Role::Positive;
                    let w = if positive { Dd::ONE } else { wneg };
                    value = value + w * bce(zi[v], positive);
                }
            }
            LossKind::Focal => {
                let (g, a) = (params.focal_gamma, Dd::new(params.focal_alpha));
                for v in valid() {
                    let x = zi[v];
                    value = value
                        + if roles[v] == Role::Positive {
                            a * sigmoid(-x).pow(g) * softplus(-x)
                        } else {
                            (Dd::ONE - a) * sigmoid(x).pow(g) * softplus(x)
                        };
                }
            }
            LossKind::Ohem => {}
        }
    }
    match kind {
        LossKind::RawBce | LossKind::BalancedBce | LossKind::Focal if n_valid > 0 => {
            value = value / Dd::new(n_valid as f64);
        }
        LossKind::Ohem => {
            let Selection::Kept(kept) = sel else {
                return Err(Error::InvalidParameter("ohem needs a frozen selection".into()));
            };
            if !kept.is_empty() {
                let mut roles = vec![Role::Invalid; vocab_size];
                let mut last = usize::MAX;
                for &idx in kept {
                    let i = idx / vocab_size;
                    if i != last {
                        targets.fill_roles(i, &mut roles);
                        last = i;
                    }
                    value = value + bce(z[idx], roles[idx % vocab_size] == Role::Positive);
                }
                value = value / Dd::new(kept.len() as f64);
            }
        }
        _ => {}
    }
    Ok(value)
}

/// Model loss at the current weights under a frozen selection.
pub fn model_loss(
    model: &TinyModel,
    feats: &TokenFeatures,
    targets: &TargetSet,
    kind: LossKind,
    params: &LossParams,
    sel: &Selection,
) -> Result<Dd> {
    let z = logits(model, feats)?;
    loss(kind, &z, model.vocab_size, targets, params, sel)
}
