//! Desk-scale WGAN-GP training of a polynomial generator on synthetic audio,
//! with an optional label-conditioned mode and NDB/JSD evaluation.
//!
//! Training is deterministic for a given seed and configuration: every
//! random draw comes from the ChaCha stream stored in [`TrainState`].

mod adam;
mod ckpt;
mod critic;
mod data;
mod generator;
mod metrics;

pub use adam::{Adam, AdamConfig};
pub use ckpt::{checkpoint_bytes, checkpoint_hash, read_checkpoint, state_from_bytes, write_checkpoint, Checkpoint};
pub use critic::Critic;
pub use data::{mel_features, DataConfig, SynthDataset};
pub use generator::{GenLeaves, Generator};
pub use metrics::{jsd, ndb_from_histograms, ndb_jsd, KMeans};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctensor::{CTensor, Cplx};
use crate::error::{ApolloError, Result};
use crate::graddiff::{Tape, Tensor, Var};
use crate::tfrep::{decode, SpecState, Spectrogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub head_degree: usize,
    pub head_hidden: usize,
    pub tail_in_channels: usize,
    pub tail_channels: usize,
    pub tail_degree: usize,
    pub tail_kernel: usize,
    /// CReLU after every degree in both stages.
    pub activation: bool,
    pub critic_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            head_degree: 2,
            head_hidden: 64,
            tail_in_channels: 4,
            tail_channels: 8,
            tail_degree: 4,
            tail_kernel: 3,
            activation: true,
            critic_widths: vec![16, 32, 32, 64],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub gp_lambda: f64,
    pub d_steps_per_g: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub conditional: bool,
    pub latent_dim: usize,
    pub arch: ArchConfig,
    pub data: DataConfig,
    /// Evaluate NDB/JSD every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_fakes: usize,
    pub ndb_k: usize,
    pub ndb_alpha: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            gp_lambda: 10.0,
            d_steps_per_g: 5,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch: 8,
            steps: 2000,
            seed: 0,
            conditional: false,
            latent_dim: 32,
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            eval_every: 0,
            eval_fakes: 512,
            ndb_k: 50,
            ndb_alpha: 0.05,
        }
    }
}

impl GanConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch == 0 || self.d_steps_per_g == 0 || self.latent_dim == 0 {
            return Err(ApolloError::Config("batch, critic steps and latent size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.gp_lambda >= 0.0) {
            return Err(ApolloError::Config("learning rate and penalty weight must be finite and nonnegative".into()));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(ApolloError::Config(format!("Adam betas must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub gen: Generator,
    pub critic: Critic,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.gen == o.gen
            && self.critic == o.critic
            && self.adam_g == o.adam_g
            && self.adam_d == o.adam_d
            && self.step == o.step
            && self.rng.get_seed() == o.rng.get_seed()
            && self.rng.get_stream() == o.rng.get_stream()
            && self.rng.get_word_pos() == o.rng.get_word_pos()
    }
}

fn gen_sizes(g: &Generator) -> Vec<usize> {
    g.head.iter().chain(g.tail.params.iter()).map(|(_, p)| 2 * p.len()).collect()
}

impl TrainState {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let classes = cfg.conditional.then_some(cfg.data.n_classes);
        let gen = Generator::init(&cfg.arch, cfg.latent_dim, classes, cfg.data.grid_shape(), &mut rng)?;
        let critic = Critic::init(&cfg.arch.critic_widths, cfg.arch.leaky_slope, classes, &mut rng)?;
        let adam_g = Adam::new(&gen_sizes(&gen));
        let adam_d = Adam::new(&critic.params.iter().map(Tensor::len).collect::<Vec<_>>());
        Ok(Self { gen, critic, adam_g, adam_d, step: 0, rng })
    }
}

/// I.i.d. complex Gaussian entries with unit complex variance.
pub fn sample_latent<R: Rng + ?Sized>(batch: usize, latent_dim: usize, rng: &mut R) -> CTensor {
    let d = Normal::new(0.0, 0.5f64.sqrt()).expect("positive variance");
    let data = (0..batch * latent_dim).map(|_| Cplx::new(d.sample(rng), d.sample(rng))).collect();
    CTensor::new(vec![batch, latent_dim], data).expect("shape and data agree")
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data[i * k + l] = 1.0;
    }
    t
}

fn one_hot_c(labels: &[usize], k: usize) -> CTensor {
    let t = one_hot(labels, k);
    CTensor::from_real(&t.shape, &t.data).expect("shape and data agree")
}

/// Splits `[B, 1, H, W]` complex grids into real and imaginary tensors.
fn split(grid: &CTensor) -> (Tensor, Tensor) {
    let shape = grid.shape().to_vec();
    (Tensor::new(shape.clone(), grid.re()).expect("same length"), Tensor::new(shape, grid.im()).expect("same length"))
}

fn real_batch<R: Rng + ?Sized>(data: &SynthDataset, batch: usize, rng: &mut R) -> (CTensor, Vec<usize>) {
    let (h, w) = data.cfg.grid_shape();
    let mut out = Vec::with_capacity(batch * h * w);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.random_range(0..data.len());
        out.extend_from_slice(data.grids[i].data());
        labels.push(data.labels[i]);
    }
    (CTensor::new(vec![batch, 1, h, w], out).expect("grid sizes agree"), labels)
}

fn sum_sq(t: &mut Tape, a: Var) -> Result<Var> {
    let sq = t.mul(a, a)?;
    t.sum_items(sq)
}

/// Records `mean_b (‖∇ₓD(x̂_b)‖ − 1)²` for `x̂ = εx_real + (1 − ε)x_fake`, one
/// `ε` per item, with the gradient taken over both channels.
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &dyn Fn(&mut Tape, Var, Var) -> Result<Var>,
    real: (&Tensor, &Tensor),
    fake: (&Tensor, &Tensor),
    eps: &[f64],
) -> Result<Var> {
    if real.0.shape != fake.0.shape || real.1.shape != fake.1.shape || real.0.shape != real.1.shape {
        return Err(ApolloError::Dimension("real and fake batches differ in shape".into()));
    }
    let b = real.0.shape[0];
    if eps.len() != b {
        return Err(ApolloError::Dimension(format!("{} mixing weights for a batch of {b}", eps.len())));
    }
    let per = real.0.len() / b;
    let mix = |r: &Tensor, f: &Tensor| {
        let data = (0..r.len()).map(|i| eps[i / per] * r.data[i] + (1.0 - eps[i / per]) * f.data[i]).collect();
        Tensor::new(r.shape.clone(), data).expect("same shape")
    };
    let hre = tape.leaf(mix(real.0, fake.0));
    let him = tape.leaf(mix(real.1, fake.1));
    let scores = critic(tape, hre, him)?;
    let total = tape.sum_all(scores);
    let g = tape.grad(total, &[hre, him])?;
    let a = sum_sq(tape, g[0])?;
    let c = sum_sq(tape, g[1])?;
    let n2 = tape.add(a, c)?;
    let n2 = tape.add_scalar(n2, 1e-24);
    let norm = tape.sqrt(n2);
    let dev = tape.add_scalar(norm, -1.0);
    let sq = tape.mul(dev, dev)?;
    Ok(tape.mean_all(sq))
}

/// Evaluates the gradient penalty of `critic` with fresh mixing weights.
pub fn gp_penalty<R: Rng + ?Sized>(
    critic: &Critic,
    real: (&Tensor, &Tensor),
    fake: (&Tensor, &Tensor),
    labels: Option<&Tensor>,
    rng: &mut R,
) -> Result<f64> {
    let eps: Vec<f64> = (0..real.0.shape[0]).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut tape = Tape::new();
    let p = critic.leaves(&mut tape);
    let l = labels.map(|l| tape.leaf(l.clone()));
    let f = |t: &mut Tape, re: Var, im: Var| critic.forward(t, &p, re, im, l);
    let gp = gradient_penalty(&mut tape, &f, real, fake, &eps)?;
    Ok(tape.scalar_value(gp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
}

fn l2(blocks: &[Vec<f64>]) -> f64 {
    blocks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn nonfinite(step: u64, what: &str, d_loss: f64, g_loss: f64, gp: f64, dn: f64, gn: f64) -> ApolloError {
    ApolloError::NonFinite(format!(
        "{what} at step {step}: d_loss={d_loss} g_loss={g_loss} gp={gp} |grad D|={dn} |grad G|={gn}"
    ))
}

/// `d_steps_per_g` critic updates followed by one generator update.
pub fn train_step(state: &mut TrainState, cfg: &GanConfig, data: &SynthDataset) -> Result<StepStats> {
    let adam = cfg.adam();
    let classes = cfg.conditional.then_some(cfg.data.n_classes);
    let (mut d_loss, mut gp_val, mut d_norm) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.d_steps_per_g {
        let (real, labels) = real_batch(data, cfg.batch, &mut state.rng);
        let z = sample_latent(cfg.batch, cfg.latent_dim, &mut state.rng);
        let eps: Vec<f64> = (0..cfg.batch).map(|_| state.rng.random_range(0.0..1.0)).collect();
        let glabels = classes.map(|k| one_hot_c(&labels, k));
        let fake = state.gen.forward(&z, glabels.as_ref())?;
        let (rre, rim) = split(&real);
        let (fre, fim) = split(&fake);

        let mut tape = Tape::new();
        let p = state.critic.leaves(&mut tape);
        let lab = classes.map(|k| tape.leaf(one_hot(&labels, k)));
        let critic = &state.critic;
        let f = |t: &mut Tape, re: Var, im: Var| critic.forward(t, &p, re, im, lab);
        let (a, b) = (tape.leaf(rre.clone()), tape.leaf(rim.clone()));
        let sr = f(&mut tape, a, b)?;
        let (a, b) = (tape.leaf(fre.clone()), tape.leaf(fim.clone()));
        let sf = f(&mut tape, a, b)?;
        let gp = gradient_penalty(&mut tape, &f, (&rre, &rim), (&fre, &fim), &eps)?;
        let mr = tape.mean_all(sr);
        let mf = tape.mean_all(sf);
        let wd = tape.sub(mf, mr)?;
        let pen = tape.scale(gp, cfg.gp_lambda);
        let loss = tape.add(wd, pen)?;
        d_loss = tape.scalar_value(loss);
        gp_val = tape.scalar_value(gp);
        let gs = tape.grad(loss, &p)?;
        let grads: Vec<Vec<f64>> = gs.iter().map(|g| tape.value(*g).data.clone()).collect();
        d_norm = l2(&grads);
        if !d_loss.is_finite() || !d_norm.is_finite() {
            return Err(nonfinite(state.step, "critic update", d_loss, f64::NAN, gp_val, d_norm, f64::NAN));
        }
        let blocks = state.critic.params.iter_mut().map(|t| t.data.as_mut_slice()).zip(grads.iter().map(Vec::as_slice));
        state.adam_d.step(&adam, blocks);
    }

    let (_, labels) = real_batch(data, cfg.batch, &mut state.rng);
    let z = sample_latent(cfg.batch, cfg.latent_dim, &mut state.rng);
    let mut tape = Tape::new();
    let leaves = state.gen.leaves(&mut tape);
    let p = state.critic.leaves(&mut tape);
    let zv = tape.cconst(&z);
    let glab = classes.map(|k| tape.cconst(&one_hot_c(&labels, k)));
    let dlab = classes.map(|k| tape.leaf(one_hot(&labels, k)));
    let fake = state.gen.forward_tape(&mut tape, &leaves, zv, glab)?;
    let fim = match fake.im {
        Some(v) => v,
        None => tape.leaf(Tensor::zeros(&tape.cshape(fake))),
    };
    let scores = state.critic.forward(&mut tape, &p, fake.re, fim, dlab)?;
    let m = tape.mean_all(scores);
    let loss = tape.neg(m);
    let g_loss = tape.scalar_value(loss);
    let flat: Vec<_> = leaves.head.iter().chain(leaves.tail.iter()).map(|(_, v)| *v).collect();
    let grads = tape.cgrad(loss, &flat)?;
    let gflat: Vec<Vec<f64>> = grads.iter().map(|g| g.data().iter().flat_map(|z| [z.re, z.im]).collect()).collect();
    let g_norm = l2(&gflat);
    if !g_loss.is_finite() || !g_norm.is_finite() {
        return Err(nonfinite(state.step, "generator update", d_loss, g_loss, gp_val, d_norm, g_norm));
    }
    let mut pflat: Vec<Vec<f64>> = state
        .gen
        .head
        .iter()
        .chain(state.gen.tail.params.iter())
        .map(|(_, p)| p.data().iter().flat_map(|z| [z.re, z.im]).collect())
        .collect();
    state.adam_g.step(&adam, pflat.iter_mut().map(Vec::as_mut_slice).zip(gflat.iter().map(Vec::as_slice)));
    let mut it = pflat.into_iter();
    for (_, p) in state.gen.head.iter_mut().chain(state.gen.tail.params.iter_mut()) {
        let v = it.next().expect("one block per parameter");
        for (z, pair) in p.data_mut().iter_mut().zip(v.chunks_exact(2)) {
            *z = Cplx::new(pair[0], pair[1]);
        }
    }
    state.step += 1;
    Ok(StepStats { step: state.step, d_loss, g_loss, gp: gp_val, d_grad_norm: d_norm, g_grad_norm: g_norm })
}

/// Generator output grids `[H, W]` for the given latents.
pub fn generate_grids(gen: &Generator, z: &CTensor, labels: Option<&[usize]>, n_classes: usize) -> Result<Vec<CTensor>> {
    let b = z.shape()[0];
    let (h, w) = gen.grid_shape();
    let lab = labels.map(|l| one_hot_c(l, n_classes));
    let out = gen.forward(z, lab.as_ref())?;
    (0..b).map(|i| CTensor::new(vec![h, w], out.data()[i * h * w..(i + 1) * h * w].to_vec())).collect()
}

/// Decodes a generator grid to a waveform using the dataset's mean scale.
pub fn grid_to_signal(grid: &CTensor, data_cfg: &DataConfig, scale: (f64, f64)) -> Result<Vec<f64>> {
    let spec = Spectrogram {
        grid: grid.clone(),
        cfg: data_cfg.stft(),
        nyquist_row: None,
        scale,
        state: SpecState::Sqrt,
    };
    Ok(decode(&spec, data_cfg.clip_len)?.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Draws `n` latents (and uniform labels in conditional mode, unless given)
/// and returns the decoded waveforms.
pub fn generate<R: Rng + ?Sized>(
    gen: &Generator,
    n: usize,
    data_cfg: &DataConfig,
    scale: (f64, f64),
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if let Some(l) = labels {
        if l.len() != n || l.iter().any(|&c| c >= data_cfg.n_classes) {
            return Err(ApolloError::Input(format!("need {n} labels below {}", data_cfg.n_classes)));
        }
    }
    let mut out = Vec::with_capacity(n);
    let chunk = 32;
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let z = sample_latent(b, gen.latent_dim(), rng);
        let lab: Option<Vec<usize>> = if gen.conditional() {
            Some(match labels {
                Some(l) => l[start..start + b].to_vec(),
                None => (0..b).map(|_| rng.random_range(0..data_cfg.n_classes)).collect(),
            })
        } else {
            None
        };
        for g in generate_grids(gen, &z, lab.as_deref(), data_cfg.n_classes)? {
            out.push(grid_to_signal(&g, data_cfg, scale)?);
        }
        start += b;
    }
    Ok(out)
}

/// Grids along the straight line between two latents, endpoints included.
pub fn interpolate(gen: &Generator, z0: &CTensor, z1: &CTensor, steps: usize, label: Option<usize>, n_classes: usize) -> Result<Vec<CTensor>> {
    if z0.shape() != [gen.latent_dim()] || z1.shape() != [gen.latent_dim()] {
        return Err(ApolloError::Dimension(format!("latents must have length {}", gen.latent_dim())));
    }
    if steps < 2 {
        return Err(ApolloError::Config("interpolation needs at least two steps".into()));
    }
    let mut data = Vec::with_capacity(steps * gen.latent_dim());
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        data.extend(z0.data().iter().zip(z1.data()).map(|(a, b)| a * (1.0 - t) + b * t));
    }
    let z = CTensor::new(vec![steps, gen.latent_dim()], data)?;
    let labels = label.map(|l| vec![l; steps]);
    generate_grids(gen, &z, labels.as_deref(), n_classes)
}

/// Position of each grid along the line from the first grid to the last:
/// `Re⟨g_i − g_0, g_last − g_0⟩ / ‖g_last − g_0‖²`, so the endpoints map to
/// 0 and 1. Returns zeros when the endpoints coincide.
pub fn endpoint_projection(grids: &[CTensor]) -> Vec<f64> {
    let (Some(first), Some(last)) = (grids.first(), grids.last()) else {
        return Vec::new();
    };
    let dir: Vec<Cplx> = last.data().iter().zip(first.data()).map(|(b, a)| b - a).collect();
    let den: f64 = dir.iter().map(|z| z.norm_sqr()).sum();
    grids
        .iter()
        .map(|g| {
            if den == 0.0 {
                return 0.0;
            }
            let num: f64 = g.data().iter().zip(first.data()).zip(&dir).map(|((x, a), d)| ((x - a) * d.conj()).re).sum();
            num / den
        })
        .collect()
}

/// Fitted real-feature clusters for repeated NDB/JSD evaluation.
#[derive(Clone, Debug)]
pub struct NdbReference {
    pub kmeans: KMeans,
    pub real_hist: Vec<usize>,
    pub alpha: f64,
}

impl NdbReference {
    pub fn fit(data: &SynthDataset, k: usize, alpha: f64, seed: u64) -> Result<Self> {
        let feats = data.features()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kmeans = KMeans::fit(&feats, k, 100, &mut rng)?;
        let real_hist = kmeans.histogram(&feats);
        Ok(Self { kmeans, real_hist, alpha })
    }

    pub fn score(&self, fake_feats: &[Vec<f64>]) -> (usize, f64) {
        ndb_from_histograms(&self.real_hist, &self.kmeans.histogram(fake_feats), self.alpha)
    }

    /// NDB and JSD of `n` fresh generations.
    pub fn evaluate(&self, gen: &Generator, data: &SynthDataset, n: usize, seed: u64) -> Result<(usize, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigs = generate(gen, n, &data.cfg, data.mean_scale, None, &mut rng)?;
        let bank = data.cfg.mel_bank()?;
        let feats = sigs.iter().map(|s| mel_features(s, &data.cfg, &bank)).collect::<Result<Vec<_>>>()?;
        Ok(self.score(&feats))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub ndb: Option<usize>,
    pub jsd: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GanConfig {
        GanConfig {
            batch: 2,
            d_steps_per_g: 2,
            latent_dim: 8,
            arch: ArchConfig { head_hidden: 8, tail_channels: 4, critic_widths: vec![4, 4, 4, 4], ..ArchConfig::default() },
            data: DataConfig { clips_per_class: 8, ..DataConfig::default() },
            ..GanConfig::default()
        }
    }

    #[test]
    fn latent_law() {
        let mut rng = crate::testutil::rng(1);
        let z = sample_latent(1000, 100, &mut rng);
        let var = z.norm_sqr() / z.len() as f64;
        assert!((0.98..=1.02).contains(&var), "{var}");
        let mean_mod = z.data().iter().map(|v| v.norm()).sum::<f64>() / z.len() as f64;
        assert!((mean_mod - std::f64::consts::PI.sqrt() / 2.0).abs() < 0.01, "{mean_mod}");
        let mut a = crate::testutil::rng(5);
        let mut b = crate::testutil::rng(5);
        assert_eq!(sample_latent(3, 4, &mut a), sample_latent(3, 4, &mut b));
    }

    #[test]
    fn penalty_of_linear_and_constant_critics() {
        let mut rng = crate::testutil::rng(2);
        let d = Normal::new(0.0, 1.0).unwrap();
        let mk = |rng: &mut ChaCha8Rng| Tensor::new(vec![3, 1, 4, 4], (0..48).map(|_| d.sample(rng)).collect()).unwrap();
        let (rr, ri, fr, fi) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let raw: Vec<f64> = (0..32).map(|_| d.sample(&mut rng)).collect();
        let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = Tensor::new(vec![32, 1], raw.iter().map(|v| v / nrm).collect()).unwrap();
        let eps = [0.2, 0.5, 0.9];

        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let linear = |t: &mut Tape, re: Var, im: Var| {
            let a = t.reshape(re, &[3, 16])?;
            let b = t.reshape(im, &[3, 16])?;
            let wa = t.leaf(Tensor::new(vec![16, 1], w.data[..16].to_vec())?);
            let wb = t.leaf(Tensor::new(vec![16, 1], w.data[16..].to_vec())?);
            let x = t.matmul(a, wa)?;
            let y = t.matmul(b, wb)?;
            let s = t.add(x, y)?;
            t.reshape(s, &[3])
        };
        let _ = wv;
        let gp = gradient_penalty(&mut tape, &linear, (&rr, &ri), (&fr, &fi), &eps).unwrap();
        assert!(tape.scalar_value(gp) < 1e-20, "{}", tape.scalar_value(gp));

        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let constant = |_: &mut Tape, _: Var, _: Var| Ok(c);
        let gp = gradient_penalty(&mut tape, &constant, (&rr, &ri), (&fr, &fi), &eps).unwrap();
        assert!((tape.scalar_value(gp) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rate_only_advances_the_step() {
        let cfg = GanConfig { lr: 0.0, ..tiny_cfg() };
        let data = SynthDataset::generate(&cfg.data).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.clone();
        train_step(&mut s, &cfg, &data).unwrap();
        assert_eq!(s.gen, before.gen);
        assert_eq!(s.critic, before.critic);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        for conditional in [false, true] {
            let cfg = GanConfig { conditional, ..tiny_cfg() };
            let data = SynthDataset::generate(&cfg.data).unwrap();
            let mut a = TrainState::new(&cfg).unwrap();
            let mut b = TrainState::new(&cfg).unwrap();
            for _ in 0..3 {
                let sa = train_step(&mut a, &cfg, &data).unwrap();
                let sb = train_step(&mut b, &cfg, &data).unwrap();
                assert_eq!(sa, sb);
                assert!(sa.d_loss.is_finite() && sa.g_loss.is_finite());
            }
            assert_eq!(a, b);
            assert_ne!(a.gen, TrainState::new(&cfg).unwrap().gen);
        }
    }

    #[test]
    fn generation_shapes_and_interpolation() {
        let cfg = tiny_cfg();
        let data = SynthDataset::generate(&cfg.data).unwrap();
        let s = TrainState::new(&cfg).unwrap();
        let mut r1 = crate::testutil::rng(3);
        let mut r2 = crate::testutil::rng(3);
        let a = generate(&s.gen, 3, &data.cfg, data.mean_scale, None, &mut r1).unwrap();
        let b = generate(&s.gen, 3, &data.cfg, data.mean_scale, None, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.len() == 1024 && x.iter().all(|v| v.abs() <= 1.0)));
        assert!(generate(&s.gen, 0, &data.cfg, data.mean_scale, None, &mut r1).unwrap().is_empty());
        let z = sample_latent(2, 8, &mut r1);
        let z0 = CTensor::vector(z.data()[..8].to_vec());
        let z1 = CTensor::vector(z.data()[8..].to_vec());
        let grids = interpolate(&s.gen, &z0, &z1, 10, None, 4).unwrap();
        assert_eq!(grids.len(), 10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(grids[i].max_abs_diff(&grids[j]) > 0.0);
            }
        }
    }
}
