use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ctensor::{CTensor, Cplx};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ctensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Cplx::new(re, im)
        })
        .collect();
    CTensor::new(shape.to_vec(), data).unwrap()
}

pub fn cvec(rng: &mut ChaCha8Rng, n: usize) -> CTensor {
    ctensor(rng, &[n])
}
