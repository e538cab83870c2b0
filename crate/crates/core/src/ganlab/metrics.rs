use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ApolloError, Result};

/// Centroids from seeded k-means++ and Lloyd iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn fit<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > data.len() {
            return Err(ApolloError::Config(format!("cannot form {k} clusters from {} samples", data.len())));
        }
        let dim = data[0].len();
        if data.iter().any(|x| x.len() != dim) {
            return Err(ApolloError::Dimension("feature vectors differ in length".into()));
        }
        let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
        let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.random_range(0.0..total);
                let mut pick = data.len() - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if r < w {
                        pick = i;
                        break;
                    }
                    r -= w;
                }
                pick
            } else {
                rng.random_range(0..data.len())
            };
            centroids.push(data[next].clone());
            for (d, x) in d2.iter_mut().zip(data) {
                *d = d.min(sq_dist(x, &centroids[centroids.len() - 1]));
            }
        }
        let mut km = Self { centroids, iterations: 0 };
        let mut assign: Vec<usize> = data.iter().map(|x| km.assign(x)).collect();
        for it in 0..max_iter {
            km.iterations = it + 1;
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (x, &a) in data.iter().zip(&assign) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(x) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    km.centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            let next: Vec<usize> = data.iter().map(|x| km.assign(x)).collect();
            if next == assign {
                break;
            }
            assign = next;
        }
        Ok(km)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn histogram(&self, data: &[Vec<f64>]) -> Vec<usize> {
        let mut h = vec![0; self.k()];
        for x in data {
            h[self.assign(x)] += 1;
        }
        h
    }
}

/// Base-2 Jensen-Shannon divergence between two histograms (normalized
/// internally), with `0·log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut out = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        out += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    out.clamp(0.0, 1.0)
}

/// Number of bins whose proportions differ under a two-sided
/// two-proportion z-test at level `alpha`, and the JSD of the histograms.
pub fn ndb_from_histograms(real: &[usize], fake: &[usize], alpha: f64) -> (usize, f64) {
    let nr: usize = real.iter().sum();
    let nf: usize = fake.iter().sum();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut ndb = 0;
    for (&r, &f) in real.iter().zip(fake) {
        let (p1, p2) = (r as f64 / nr as f64, f as f64 / nf as f64);
        let p = (r + f) as f64 / (nr + nf) as f64;
        let se = (p * (1.0 - p) * (1.0 / nr as f64 + 1.0 / nf as f64)).sqrt();
        if se > 0.0 {
            let z = (p1 - p2) / se;
            let pval = 2.0 * (1.0 - std.cdf(z.abs()));
            if pval < alpha {
                ndb += 1;
            }
        }
    }
    let to_f = |h: &[usize]| h.iter().map(|&v| v as f64).collect::<Vec<_>>();
    (ndb, jsd(&to_f(real), &to_f(fake)))
}

/// Clusters `real` into `k` bins and compares the bin occupancy of `fake`.
pub fn ndb_jsd<R: Rng + ?Sized>(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize, alpha: f64, rng: &mut R) -> Result<(usize, f64)> {
    if fake.is_empty() {
        return Err(ApolloError::Input("no generated features".into()));
    }
    let km = KMeans::fit(real, k, 100, rng)?;
    Ok(ndb_from_histograms(&km.histogram(real), &km.histogram(fake), alpha))
}
