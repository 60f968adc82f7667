use crate::numerics::Tensor;

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, total: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total as f64 * warmup_fraction).round() as usize).min(total);
        Self { peak, warmup, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay; decay applies only where `decay[i]`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor], decay: Vec<bool>) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            decay,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1e-3, 1000, 0.1);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(100) - 1e-3).abs() < 1e-18);
        assert!((s.lr(50) - 5e-4).abs() < 1e-18);
        assert!(s.lr(999) < 2e-6);
        assert_eq!(s.lr(1000), 0.0);
        assert!(s.lr(400) > s.lr(800));
    }

    #[test]
    fn adamw_minimises_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec![false]);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &[g], 0.01);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p, vec![true]);
        opt.step(&mut p, &[vec![0.5]], 0.1);
        assert!((p[0].data()[0] - (1.0 - 0.1 * (1.0 + 0.01))).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
