//! A tiny differentiable token-logit model.
//!
//! ```text
//! h_i  = A·f_i + a0                                   (trainable A, a0)
//! h'_i = h_i + Wv · Σ_j softmax_j(q_i·k_j / √d) h_j    (attn1 only)
//! Z_i  = E·h'_i                                        (E fixed)
//! ```
//!
//! with `q = Wq·h`, `k = Wk·h`. The output head `E` is a random token
//! embedding drawn from the seed and never trained, so every vocabulary
//! row shares the same trainable parameters. Zeroing `Wq`, `Wk` and `Wv`
//! collapses attn1 onto the linear model.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{rng_from, TokenFeatures};
use crate::error::{Error, Result};
use crate::loss::{compute_loss, LogitsGrid, LossKind, LossParams};
use crate::targets::TargetSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    #[default]
    Linear,
    Attn1,
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelMode::Linear),
            "attn1" => Ok(ModelMode::Attn1),
            other => Err(Error::InvalidParameter(format!("unknown model mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub mode: ModelMode,
    pub in_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    /// Trainable parameters: `A`, `a0`, then (attn1) `Wq`, `Wk`, `Wv`.
    pub theta: Vec<f64>,
    /// Frozen `vocab_size × hidden` output head.
    pub head: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
pub struct Cache {
    h: Vec<f64>,
    /// attn1: queries, keys, attention rows, attended values.
    q: Vec<f64>,
    k: Vec<f64>,
    p: Vec<f64>,
    u: Vec<f64>,
    out: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

impl TinyModel {
    pub fn new(mode: ModelMode, in_dim: usize, hidden: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, 10);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let head = draw(vocab_size * hidden, 1.0 / (hidden as f64).sqrt());
        let mut theta = draw(hidden * in_dim, 1.0 / (in_dim as f64).sqrt());
        theta.extend(std::iter::repeat_n(0.0, hidden));
        if mode == ModelMode::Attn1 {
            let s = 0.5 / (hidden as f64).sqrt();
            theta.extend(draw(3 * hidden * hidden, s));
        }
        Self {
            mode,
            in_dim,
            hidden,
            vocab_size,
            theta,
            head,
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Checks parameter and head lengths against the declared shape, for
    /// models loaded from disk.
    pub fn validate(&self) -> Result<()> {
        let attn = if self.mode == ModelMode::Attn1 { 3 * self.hidden * self.hidden } else { 0 };
        let want = self.hidden * self.in_dim + self.hidden + attn;
        if self.hidden == 0 || self.in_dim == 0 || self.vocab_size == 0 {
            return Err(Error::ShapeError("model dimensions must be positive".into()));
        }
        if self.theta.len() != want || self.head.len() != self.vocab_size * self.hidden {
            return Err(Error::ShapeError(format!(
                "model has {} parameters and a {}-value head, shape needs {want} and {}",
                self.theta.len(),
                self.head.len(),
                self.vocab_size * self.hidden
            )));
        }
        if self.theta.iter().chain(&self.head).any(|w| !w.is_finite()) {
            return Err(Error::ShapeError("model weights must be finite".into()));
        }
        Ok(())
    }

    fn off_a0(&self) -> usize {
        self.hidden * self.in_dim
    }

    fn off_attn(&self) -> usize {
        self.off_a0() + self.hidden
    }

    pub(super) fn a(&self) -> &[f64] {
        &self.theta[..self.off_a0()]
    }

    pub(super) fn a0(&self) -> &[f64] {
        &self.theta[self.off_a0()..self.off_attn()]
    }

    /// `(Wq, Wk, Wv)`; empty in linear mode.
    pub(super) fn attn(&self) -> (&[f64], &[f64], &[f64]) {
        let hh = self.hidden * self.hidden;
        let o = self.off_attn();
        if self.mode == ModelMode::Linear {
            return (&[], &[], &[]);
        }
        (
            &self.theta[o..o + hh],
            &self.theta[o + hh..o + 2 * hh],
            &self.theta[o + 2 * hh..o + 3 * hh],
        )
    }

    /// Zeroes the attention parameters (no-op in linear mode).
    pub fn zero_attention(&mut self) {
        let o = self.off_attn();
        self.theta[o..].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Sets `Wq`, `Wk`, `Wv` (attn1 only), each `hidden × hidden` row-major.
    pub fn set_attention(&mut self, wq: &[f64], wk: &[f64], wv: &[f64]) -> Result<()> {
        let hh = self.hidden * self.hidden;
        if self.mode != ModelMode::Attn1 || wq.len() != hh || wk.len() != hh || wv.len() != hh {
            return Err(Error::ShapeError("attention weights need attn1 mode and hidden² entries".into()));
        }
        let o = self.off_attn();
        self.theta[o..o + hh].copy_from_slice(wq);
        self.theta[o + hh..o + 2 * hh].copy_from_slice(wk);
        self.theta[o + 2 * hh..o + 3 * hh].copy_from_slice(wv);
        Ok(())
    }

    /// Sets the input projection `A` (`hidden × in_dim`) and offset `a0`.
    pub fn set_projection(&mut self, a: &[f64], a0: &[f64]) -> Result<()> {
        if a.len() != self.hidden * self.in_dim || a0.len() != self.hidden {
            return Err(Error::ShapeError("projection has the wrong size".into()));
        }
        let o = self.off_a0();
        self.theta[..o].copy_from_slice(a);
        self.theta[o..o + self.hidden].copy_from_slice(a0);
        Ok(())
    }

    /// Final hidden state per token (`h'` in attn1, `h` otherwise): the
    /// input to the output head.
    pub fn hidden_states(&self, feats: &TokenFeatures) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.forward_cached(feats)?;
        Ok(cache.out.chunks(self.hidden).map(<[f64]>::to_vec).collect())
    }

    pub fn forward(&self, feats: &TokenFeatures) -> Result<LogitsGrid> {
        self.forward_cached(feats).map(|(z, _)| z)
    }

    pub fn forward_cached(&self, feats: &TokenFeatures) -> Result<(LogitsGrid, Cache)> {
        if feats.dim != self.in_dim {
            return Err(Error::ShapeError(format!(
                "features have dim {}, model expects {}",
                feats.dim, self.in_dim
            )));
        }
        let (l, d) = (feats.len(), self.hidden);
        let mut h = vec![0.0; l * d];
        for i in 0..l {
            let hi = &mut h[i * d..(i + 1) * d];
            matvec(self.a(), d, self.in_dim, feats.token(i), hi);
            hi.iter_mut().zip(self.a0()).for_each(|(v, b)| *v += b);
        }
        let mut cache = Cache {
            h,
            q: Vec::new(),
            k: Vec::new(),
            p: Vec::new(),
            u: Vec::new(),
            out: Vec::new(),
        };
        let out = if self.mode == ModelMode::Attn1 {
            self.attend(l, &mut cache);
            std::mem::take(&mut cache.out)
        } else {
            cache.h.clone()
        };
        let mut z = vec![0.0; l * self.vocab_size];
        for i in 0..l {
            matvec(&self.head, self.vocab_size, d, &out[i * d..(i + 1) * d], &mut z[i * self.vocab_size..(i + 1) * self.vocab_size]);
        }
        cache.out = out;
        Ok((LogitsGrid::new(feats.grid_w, feats.grid_h, self.vocab_size, z)?, cache))
    }

    fn attend(&self, l: usize, c: &mut Cache) {
        let d = self.hidden;
        let (wq, wk, wv) = self.attn();
        let scale = 1.0 / (d as f64).sqrt();
        c.q = vec![0.0; l * d];
        c.k = vec![0.0; l * d];
        for i in 0..l {
            matvec(wq, d, d, &c.h[i * d..(i + 1) * d], &mut c.q[i * d..(i + 1) * d]);
            matvec(wk, d, d, &c.h[i * d..(i + 1) * d], &mut c.k[i * d..(i + 1) * d]);
        }
        c.p = vec![0.0; l * l];
        for i in 0..l {
            let row = &mut c.p[i * l..(i + 1) * l];
            for j in 0..l {
                row[j] = scale * (0..d).map(|t| c.q[i * d + t] * c.k[j * d + t]).sum::<f64>();
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|s| *s = (*s - m).exp());
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|s| *s /= total);
        }
        c.u = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..l {
                let pij = c.p[i * l + j];
                for t in 0..d {
                    c.u[i * d + t] += pij * c.h[j * d + t];
                }
            }
        }
        c.out = c.h.clone();
        let mut tmp = vec![0.0; d];
        for i in 0..l {
            matvec(wv, d, d, &c.u[i * d..(i + 1) * d], &mut tmp);
            c.out[i * d..(i + 1) * d].iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
        }
    }

    /// `∂L/∂θ` given `∂L/∂Z`.
    pub fn backward(&self, feats: &TokenFeatures, cache: &Cache, grad_z: &[f64]) -> Vec<f64> {
        let (l, d, v) = (feats.len(), self.hidden, self.vocab_size);
        let mut g_out = vec![0.0; l * d];
        for i in 0..l {
            let gz = &grad_z[i * v..(i + 1) * v];
            let go = &mut g_out[i * d..(i + 1) * d];
            for (r, &g) in gz.iter().enumerate() {
                if g != 0.0 {
                    let e = &self.head[r * d..(r + 1) * d];
                    go.iter_mut().zip(e).for_each(|(o, w)| *o += g * w);
                }
            }
        }
        let mut grad = vec![0.0; self.theta.len()];
        let g_h = if self.mode == ModelMode::Attn1 {
            self.attend_backward(l, cache, &g_out, &mut grad)
        } else {
            g_out
        };
        let (o_a0, n) = (self.off_a0(), self.in_dim);
        for i in 0..l {
            let f = feats.token(i);
            for r in 0..d {
                let g = g_h[i * d + r];
                if g == 0.0 {
                    continue;
                }
                grad[o_a0 + r] += g;
                grad[r * n..(r + 1) * n].iter_mut().zip(f).for_each(|(o, x)| *o += g * x);
            }
        }
        grad
    }

    fn attend_backward(&self, l: usize, c: &Cache, g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.hidden;
        let hh = d * d;
        let (wq, wk, wv) = self.attn();
        let o = self.off_attn();
        let scale = 1.0 / (d as f64).sqrt();
        let mut g_h = g_out.to_vec();
        // h'_i = h_i + Wv u_i
        let mut g_u = vec![0.0; l * d];
        for i in 0..l {
            for r in 0..d {
                let g = g_out[i * d + r];
                for t in 0..d {
                    grad[o + 2 * hh + r * d + t] += g * c.u[i * d + t];
                    g_u[i * d + t] += wv[r * d + t] * g;
                }
            }
        }
        // u_i = Σ_j P_ij h_j
        let mut g_s = vec![0.0; l * l];
        for i in 0..l {
            let mut dot_sum = 0.0;
            let mut g_p = vec![0.0; l];
            for j in 0..l {
                let gu = &g_u[i * d..(i + 1) * d];
                g_p[j] = gu.iter().zip(&c.h[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                let pij = c.p[i * l + j];
                dot_sum += pij * g_p[j];
                for t in 0..d {
                    g_h[j * d + t] += pij * gu[t];
                }
            }
            for j in 0..l {
                g_s[i * l + j] = c.p[i * l + j] * (g_p[j] - dot_sum);
            }
        }
        // s_ij = scale · q_i·k_j
        let mut g_q = vec![0.0; l * d];
        let mut g_k = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..l {
                let gs = g_s[i * l + j] * scale;
                if gs == 0.0 {
                    continue;
                }
                for t in 0..d {
                    g_q[i * d + t] += gs * c.k[j * d + t];
                    g_k[j * d + t] += gs * c.q[i * d + t];
                }
            }
        }
        // q = Wq h, k = Wk h
        for i in 0..l {
            let hi = &c.h[i * d..(i + 1) * d];
            for r in 0..d {
                let (gq, gk) = (g_q[i * d + r], g_k[i * d + r]);
                for t in 0..d {
                    grad[o + r * d + t] += gq * hi[t];
                    grad[o + hh + r * d + t] += gk * hi[t];
                    g_h[i * d + t] += wq[r * d + t] * gq + wk[r * d + t] * gk;
                }
            }
        }
        g_h
    }

    pub fn loss_and_grad(
        &self,
        feats: &TokenFeatures,
        targets: &TargetSet,
        kind: LossKind,
        params: &LossParams,
    ) -> Result<(f64, Vec<f64>)> {
        let (z, cache) = self.forward_cached(feats)?;
        let report = compute_loss(kind, &z, targets, params)?;
        Ok((report.value, self.backward(feats, &cache, &report.grad)))
    }

    pub fn loss(&self, feats: &TokenFeatures, targets: &TargetSet, kind: LossKind, params: &LossParams) -> Result<f64> {
        let z = self.forward(feats)?;
        Ok(compute_loss(kind, &z, targets, params)?.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(data: Vec<f64>, dim: usize) -> TokenFeatures {
        let l = data.len() / dim;
        TokenFeatures::new(l, 1, dim, data).unwrap()
    }

    #[test]
    fn validate_catches_truncated_models() {
        for mode in [ModelMode::Linear, ModelMode::Attn1] {
            let m = TinyModel::new(mode, 3, 4, 10, 1);
            m.validate().unwrap();
            let mut short = m.clone();
            short.theta.pop();
            assert!(short.validate().is_err());
            let mut head = m.clone();
            head.head.push(0.0);
            assert!(head.validate().is_err());
            let mut nan = m;
            nan.theta[0] = f64::NAN;
            assert!(nan.validate().is_err());
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = TinyModel::new(ModelMode::Attn1, 3, 4, 10, 1);
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        let z = m.forward(&feats(vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0], 3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_indicators() {
        let mut m = TinyModel::new(ModelMode::Linear, 2, 2, 2, 1);
        m.set_projection(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        m.head = vec![1.0, 0.0, 0.0, 1.0];
        let z = m.forward(&feats(vec![1.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zeroed_attention_matches_linear() {
        let f = feats((0..12).map(|v| (v as f64 * 0.37).sin()).collect(), 3);
        let mut attn = TinyModel::new(ModelMode::Attn1, 3, 5, 7, 9);
        let lin = TinyModel {
            mode: ModelMode::Linear,
            theta: attn.theta[..attn.off_attn()].to_vec(),
            ..attn.clone()
        };
        attn.zero_attention();
        let (a, b) = (attn.forward(&f).unwrap(), lin.forward(&f).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn uniform_attention_adds_mean_pooled_branch() {
        // with zero query/key weights every token attends uniformly, so the
        // attention branch is the linear head applied to the mean of h
        let f = feats((0..12).map(|v| (v as f64 * 0.61).cos()).collect(), 3);
        let mut attn = TinyModel::new(ModelMode::Attn1, 3, 4, 6, 2);
        let hh = 16;
        let wv: Vec<f64> = (0..hh).map(|v| (v as f64 * 0.13).sin()).collect();
        attn.set_attention(&vec![0.0; hh], &vec![0.0; hh], &wv).unwrap();
        let lin = TinyModel {
            mode: ModelMode::Linear,
            theta: attn.theta[..attn.off_attn()].to_vec(),
            ..attn.clone()
        };
        let za = attn.forward(&f).unwrap();
        let zl = lin.forward(&f).unwrap();
        let (_, cache) = lin.forward_cached(&f).unwrap();
        let l = f.len();
        let mut mean = vec![0.0; 4];
        for i in 0..l {
            for t in 0..4 {
                mean[t] += cache.h[i * 4 + t] / l as f64;
            }
        }
        let mut branch_h = vec![0.0; 4];
        matvec(&wv, 4, 4, &mean, &mut branch_h);
        let mut branch = vec![0.0; 6];
        matvec(&attn.head, 6, 4, &branch_h, &mut branch);
        for i in 0..l {
            for v in 0..6 {
                let expect = zl.get(i, v) + branch[v];
                assert!((za.get(i, v) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = TinyModel::new(ModelMode::Linear, 3, 4, 5, 0);
        assert!(matches!(m.forward(&feats(vec![1.0, 2.0], 2)), Err(Error::ShapeError(_))));
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(TinyModel::new(ModelMode::Attn1, 3, 4, 5, 42), TinyModel::new(ModelMode::Attn1, 3, 4, 5, 42));
    }
}
