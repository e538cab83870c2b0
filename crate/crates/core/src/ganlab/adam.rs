use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments for a list of flat parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self { t: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected update; `blocks` yields `(param, grad)` slices in
    /// the same order and sizes as the moments.
    pub fn step<'a>(&mut self, cfg: &AdamConfig, blocks: impl Iterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in blocks.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            debug_assert_eq!(p.len(), m.len());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut a = Adam::new(&[2]);
        let mut p = vec![3.0, -2.0];
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            a.step(&cfg, std::iter::once((p.as_mut_slice(), g.as_slice())));
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let cfg = AdamConfig { lr: 0.0, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        let mut a = Adam::new(&[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        a.step(&cfg, std::iter::once((p.as_mut_slice(), [0.5, -1.0, 2.0].as_slice())));
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.t, 1);
    }
}
