use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ApolloError, Result};
use crate::graddiff::{Tape, Tensor, Var};

/// Real-valued residual critic on the two-channel (re, im) view.
///
/// Each block is `(lrelu(conv3×3/2(x) + b) + conv1×1/2(x)) / √2`. The first
/// block keeps separate weights for the real and imaginary input channels.
/// Scores come from a linear map of the spatially averaged features, plus an
/// inner product with a label embedding in conditional mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub widths: Vec<usize>,
    pub slope: f64,
    pub n_classes: Option<usize>,
    pub params: Vec<Tensor>,
}

fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive variance");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape and data agree")
}

impl Critic {
    pub fn init<R: Rng + ?Sized>(widths: &[usize], slope: f64, n_classes: Option<usize>, rng: &mut R) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(ApolloError::Config(format!("critic widths must be nonempty and positive, got {widths:?}")));
        }
        let mut params = Vec::new();
        let w0 = widths[0];
        params.push(he(&[w0, 1, 3, 3], 18, rng));
        params.push(he(&[w0, 1, 3, 3], 18, rng));
        params.push(Tensor::zeros(&[w0]));
        params.push(he(&[w0, 1, 1, 1], 2, rng));
        params.push(he(&[w0, 1, 1, 1], 2, rng));
        for pair in widths.windows(2) {
            let (ci, co) = (pair[0], pair[1]);
            params.push(he(&[co, ci, 3, 3], ci * 9, rng));
            params.push(Tensor::zeros(&[co]));
            params.push(he(&[co, ci, 1, 1], ci, rng));
        }
        let last = *widths.last().expect("nonempty");
        params.push(he(&[last, 1], last, rng));
        params.push(Tensor::zeros(&[1]));
        if let Some(k) = n_classes {
            params.push(he(&[k, last], last, rng));
        }
        Ok(Self { widths: widths.to_vec(), slope, n_classes, params })
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Scores `[B]` for `re, im: [B, 1, H, W]`; `labels: [B, classes]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], re: Var, im: Var, labels: Option<Var>) -> Result<Var> {
        if self.n_classes.is_some() != labels.is_some() {
            return Err(ApolloError::Input("critic label mode does not match its inputs".into()));
        }
        let a = tape.conv2d(re, p[0], 2, 1)?;
        let b = tape.conv2d(im, p[1], 2, 1)?;
        let main = tape.add(a, b)?;
        let s1 = tape.conv2d(re, p[3], 2, 0)?;
        let s2 = tape.conv2d(im, p[4], 2, 0)?;
        let short = tape.add(s1, s2)?;
        let mut x = self.finish_block(tape, main, p[2], short)?;
        let mut i = 5;
        for _ in 1..self.widths.len() {
            let main = tape.conv2d(x, p[i], 2, 1)?;
            let short = tape.conv2d(x, p[i + 2], 2, 0)?;
            x = self.finish_block(tape, main, p[i + 1], short)?;
            i += 3;
        }
        let shape = tape.shape(x).to_vec();
        let (bsz, c) = (shape[0], shape[1]);
        let flat = tape.reshape(x, &[bsz * c, shape[2] * shape[3]])?;
        let summed = tape.sum_items(flat)?;
        let pooled = tape.scale(summed, 1.0 / (shape[2] * shape[3]) as f64);
        let feat = tape.reshape(pooled, &[bsz, c])?;
        let lin = tape.matmul(feat, p[i])?;
        let bias = tape.broadcast_rows(p[i + 1], bsz)?;
        let out = tape.add(lin, bias)?;
        let mut score = tape.reshape(out, &[bsz])?;
        if let Some(y) = labels {
            let emb = tape.matmul(y, p[i + 2])?;
            let prod = tape.mul(emb, feat)?;
            let proj = tape.sum_items(prod)?;
            score = tape.add(score, proj)?;
        }
        Ok(score)
    }

    fn finish_block(&self, tape: &mut Tape, main: Var, bias: Var, short: Var) -> Result<Var> {
        let shape = tape.shape(main).to_vec();
        let bb = tape.broadcast_channels(bias, &shape)?;
        let pre = tape.add(main, bb)?;
        let act = tape.leaky_relu(pre, self.slope);
        let sum = tape.add(act, short)?;
        Ok(tape.scale(sum, std::f64::consts::FRAC_1_SQRT_2))
    }

    /// Scores without recording gradients beyond this call.
    pub fn scores(&self, re: &Tensor, im: &Tensor, labels: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let r = tape.leaf(re.clone());
        let i = tape.leaf(im.clone());
        let l = labels.map(|l| tape.leaf(l.clone()));
        let s = self.forward(&mut tape, &p, r, i, l)?;
        Ok(tape.value(s).data.clone())
    }
}
