//! Fused loss and sampling ops with hand-written adjoints.

use crate::edl::{grad_scalar, nll_scalar, reg_scalar};
use crate::nig::EVIDENCE_FLOOR;
use crate::numerics::special::{sigmoid, sign, softplus};
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::sampler::{HierarchicalNoise, LOG_SIGMA2_FLOOR};

fn zeros_like(t: &Tensor) -> Vec<f64> {
    vec![0.0; t.len()]
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape(), data).expect("same length")
}

/// Mean over frames of the evidential loss summed over dimensions, from raw
/// `[γ|ν|α|β]` head rows.
struct EvidentialLoss {
    target: Tensor,
    lambda: f64,
}

fn constrained(raw: &[f64], d: usize, i: usize) -> (f64, f64, f64, f64) {
    (
        raw[i],
        softplus(raw[d + i]) + EVIDENCE_FLOOR,
        1.0 + EVIDENCE_FLOOR + softplus(raw[2 * d + i]),
        softplus(raw[3 * d + i]) + EVIDENCE_FLOOR,
    )
}

impl CustomOp for EvidentialLoss {
    fn name(&self) -> &'static str {
        "evidential_loss"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let d = self.target.cols();
        let scale = g.item() / raw.rows() as f64;
        let mut out = zeros_like(raw);
        for t in 0..raw.rows() {
            let row = raw.row(t);
            let y = self.target.row(t);
            let o = &mut out[t * 4 * d..(t + 1) * 4 * d];
            for i in 0..d {
                let (gm, nu, al, be) = constrained(row, d, i);
                let [dg, dn, da, db] = grad_scalar(y[i], gm, nu, al, be, self.lambda);
                o[i] = scale * dg;
                o[d + i] = scale * dn * sigmoid(row[d + i]);
                o[2 * d + i] = scale * da * sigmoid(row[2 * d + i]);
                o[3 * d + i] = scale * db * sigmoid(row[3 * d + i]);
            }
        }
        vec![Some(shaped(raw, out))]
    }
}

pub fn evidential_loss(tape: &mut Tape, raw: Var, target: &Tensor, lambda: f64) -> Var {
    let r = tape.get(raw);
    let d = target.cols();
    assert_eq!(r.cols(), 4 * d, "evidential head width");
    assert_eq!(r.rows(), target.rows(), "evidential head rows");
    let mut s = 0.0;
    for t in 0..r.rows() {
        let row = r.row(t);
        for i in 0..d {
            let (gm, nu, al, be) = constrained(row, d, i);
            let y = target.at(t, i);
            s += nll_scalar(y, gm, nu, al, be) + lambda * reg_scalar(y, gm, nu, al);
        }
    }
    let value = Tensor::scalar(s / r.rows() as f64);
    let op = EvidentialLoss {
        target: target.clone(),
        lambda,
    };
    tape.custom(&[raw], value, Box::new(op))
}

/// `z = γ + σ (ε_mean / √ν + ε_obs)` per frame with σ² held fixed.
struct PathwiseSample {
    noise: Vec<HierarchicalNoise>,
}

impl CustomOp for PathwiseSample {
    fn name(&self) -> &'static str {
        "pathwise_sample"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let d = g.cols();
        let mut out = zeros_like(raw);
        for (t, n) in self.noise.iter().enumerate() {
            let row = raw.row(t);
            let gr = g.row(t);
            let o = &mut out[t * 4 * d..(t + 1) * 4 * d];
            for i in 0..d {
                let nu = softplus(row[d + i]) + EVIDENCE_FLOOR;
                o[i] = gr[i];
                let dz_dnu = -0.5 * n.sigma2[i].sqrt() * n.eps_mean[i] * nu.powf(-1.5);
                o[d + i] = gr[i] * dz_dnu * sigmoid(row[d + i]);
            }
        }
        vec![Some(shaped(raw, out))]
    }
}

pub fn pathwise_sample(tape: &mut Tape, raw: Var, noise: Vec<HierarchicalNoise>) -> Var {
    let r = tape.get(raw);
    let d = r.cols() / 4;
    assert_eq!(noise.len(), r.rows(), "one noise draw per frame");
    let mut z = Vec::with_capacity(r.rows() * d);
    for (t, n) in noise.iter().enumerate() {
        let row = r.row(t);
        let gamma = &row[..d];
        let nu: Vec<f64> = row[d..2 * d].iter().map(|&x| softplus(x) + EVIDENCE_FLOOR).collect();
        z.extend(n.apply(gamma, &nu));
    }
    let value = Tensor::new(&[r.rows(), d], z).expect("frame grid");
    tape.custom(&[raw], value, Box::new(PathwiseSample { noise }))
}

/// `z = μ + exp(½ max(log σ², floor)) ε` from raw `[μ | log σ²]` rows.
struct GaussianSample {
    eps: Tensor,
}

impl CustomOp for GaussianSample {
    fn name(&self) -> &'static str {
        "gaussian_sample"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let d = g.cols();
        let mut out = zeros_like(raw);
        for t in 0..raw.rows() {
            let row = raw.row(t);
            for i in 0..d {
                let gi = g.at(t, i);
                out[t * 2 * d + i] = gi;
                let lv = row[d + i];
                if lv > LOG_SIGMA2_FLOOR {
                    out[t * 2 * d + d + i] = gi * 0.5 * (0.5 * lv).exp() * self.eps.at(t, i);
                }
            }
        }
        vec![Some(shaped(raw, out))]
    }
}

pub fn gaussian_sample(tape: &mut Tape, raw: Var, eps: Tensor) -> Var {
    let r = tape.get(raw);
    let d = r.cols() / 2;
    assert_eq!(eps.shape(), &[r.rows(), d], "noise grid");
    let mut z = Vec::with_capacity(r.rows() * d);
    for t in 0..r.rows() {
        let row = r.row(t);
        for i in 0..d {
            z.push(row[i] + (0.5 * row[d + i].max(LOG_SIGMA2_FLOOR)).exp() * eps.at(t, i));
        }
    }
    let value = Tensor::new(&[r.rows(), d], z).expect("frame grid");
    tape.custom(&[raw], value, Box::new(GaussianSample { eps }))
}

/// Mean over frames of `KL(N(μ, σ²) ‖ N(y, I))` from raw `[μ | log σ²]` rows.
struct KlToTarget {
    target: Tensor,
}

impl CustomOp for KlToTarget {
    fn name(&self) -> &'static str {
        "kl_to_target"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let d = self.target.cols();
        let scale = g.item() / raw.rows() as f64;
        let mut out = zeros_like(raw);
        for t in 0..raw.rows() {
            let row = raw.row(t);
            for i in 0..d {
                out[t * 2 * d + i] = scale * (row[i] - self.target.at(t, i));
                let lv = row[d + i];
                if lv > LOG_SIGMA2_FLOOR {
                    out[t * 2 * d + d + i] = scale * 0.5 * (lv.exp() - 1.0);
                }
            }
        }
        vec![Some(shaped(raw, out))]
    }
}

pub fn kl_to_target(tape: &mut Tape, raw: Var, target: &Tensor) -> Var {
    let r = tape.get(raw);
    let d = target.cols();
    assert_eq!(r.cols(), 2 * d, "gaussian head width");
    let mut s = 0.0;
    for t in 0..r.rows() {
        let row = r.row(t);
        for i in 0..d {
            let lv = row[d + i].max(LOG_SIGMA2_FLOOR);
            let res = row[i] - target.at(t, i);
            s += 0.5 * (lv.exp() + res * res - 1.0 - lv);
        }
    }
    let value = Tensor::scalar(s / r.rows() as f64);
    tape.custom(&[raw], value, Box::new(KlToTarget { target: target.clone() }))
}

/// `−(1/(T−1)) Σ_{t≥1} ‖γ_t − y_{t−1}‖₁` over the first `D` columns of the
/// head; with `clamp = Some(c)` each frame's term is floored at `−c`.
struct Flux {
    target: Tensor,
    clamp: Option<f64>,
}

impl Flux {
    fn frame_active(&self, raw: &Tensor, t: usize) -> bool {
        match self.clamp {
            None => true,
            Some(c) => frame_l1(raw, &self.target, t) < c,
        }
    }
}

fn frame_l1(raw: &Tensor, target: &Tensor, t: usize) -> f64 {
    let d = target.cols();
    raw.row(t)[..d]
        .iter()
        .zip(target.row(t - 1))
        .map(|(g, y)| (g - y).abs())
        .sum()
}

impl CustomOp for Flux {
    fn name(&self) -> &'static str {
        "flux"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let d = self.target.cols();
        let w = raw.cols();
        let t_len = raw.rows();
        let mut out = zeros_like(raw);
        if t_len >= 2 {
            let scale = -g.item() / (t_len - 1) as f64;
            for t in 1..t_len {
                if !self.frame_active(raw, t) {
                    continue;
                }
                let row = raw.row(t);
                let prev = self.target.row(t - 1);
                for i in 0..d {
                    out[t * w + i] = scale * sign(row[i] - prev[i]);
                }
            }
        }
        vec![Some(shaped(raw, out))]
    }
}

pub fn flux(tape: &mut Tape, raw: Var, target: &Tensor, clamp: Option<f64>) -> Var {
    let r = tape.get(raw);
    let t_len = r.rows();
    let value = if t_len < 2 {
        0.0
    } else {
        let s: f64 = (1..t_len)
            .map(|t| {
                let l1 = frame_l1(r, target, t);
                clamp.map_or(l1, |c| l1.min(c))
            })
            .sum();
        -s / (t_len - 1) as f64
    };
    let op = Flux {
        target: target.clone(),
        clamp,
    };
    tape.custom(&[raw], Tensor::scalar(value), Box::new(op))
}

/// Mean over frames of `Σ_d |r| + r²` with `r = y − target`.
struct Regression {
    target: Tensor,
}

impl CustomOp for Regression {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let y = inputs[0];
        let scale = g.item() / y.rows() as f64;
        let out = y
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| {
                let r = a - b;
                scale * (sign(r) + 2.0 * r)
            })
            .collect();
        vec![Some(shaped(y, out))]
    }
}

pub fn regression(tape: &mut Tape, y: Var, target: &Tensor) -> Var {
    let v = tape.get(y);
    assert_eq!(v.shape(), target.shape(), "regression shapes");
    let s: f64 = v
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let r = a - b;
            r.abs() + r * r
        })
        .sum();
    let value = Tensor::scalar(s / v.rows() as f64);
    tape.custom(&[y], value, Box::new(Regression { target: target.clone() }))
}

/// Weighted BCE on stop logits (`T × 1`), mean over frames.
struct StopBce {
    stop_index: usize,
    positive_weight: f64,
}

impl CustomOp for StopBce {
    fn name(&self) -> &'static str {
        "stop_bce"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let l = inputs[0];
        let scale = g.item() / l.len() as f64;
        let out = l
            .data()
            .iter()
            .enumerate()
            .map(|(t, &x)| {
                if t == self.stop_index {
                    scale * self.positive_weight * (sigmoid(x) - 1.0)
                } else {
                    scale * sigmoid(x)
                }
            })
            .collect();
        vec![Some(shaped(l, out))]
    }
}

pub fn stop_bce(tape: &mut Tape, logits: Var, stop_index: usize, positive_weight: f64) -> Var {
    let l = tape.get(logits);
    assert!(stop_index < l.len(), "stop index in range");
    let s: f64 = l
        .data()
        .iter()
        .enumerate()
        .map(|(t, &x)| {
            if t == stop_index {
                positive_weight * (softplus(x) - x)
            } else {
                softplus(x)
            }
        })
        .sum();
    let value = Tensor::scalar(s / l.len() as f64);
    let op = StopBce {
        stop_index,
        positive_weight,
    };
    tape.custom(&[logits], value, Box::new(op))
}
