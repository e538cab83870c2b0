//! Eager reverse-mode tape over real tensors.
//!
//! Every primitive computes its value at record time. `grad` appends the
//! vector-Jacobian products to the same tape, so gradients are themselves
//! differentiable (needed by the gradient penalty).

use std::rc::Rc;

use crate::error::{dim_err, ApolloError, Result};

/// A dense real tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err!("shape {:?} needs {} entries, got {}", shape, shape.iter().product::<usize>(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a strided, padded 2-D convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// View input as [outer, mid, inner] and sum to [mid].
    SumKeep { a: Var, outer: usize, inner: usize },
    /// Broadcast [mid] to [outer, mid, inner].
    Expand { a: Var, outer: usize, inner: usize },
    Upsample(Var, usize),
    SumPool(Var, usize),
    Mask(Var, Rc<Vec<f64>>),
    Relu(Var, Rc<Vec<f64>>),
    LeakyRelu(Var, Rc<Vec<f64>>),
    Tanh(Var),
    Sqrt(Var),
    Recip(Var),
    Conv { x: Var, w: Var, g: ConvGeom },
    ConvT { x: Var, w: Var, g: ConvGeom },
    ConvW { a: Var, gy: Var, g: ConvGeom },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(dim_err!("{what} expects a [batch, channel, height, width] tensor, got {:?}", t.shape)),
    }
}

pub(crate) fn conv_out(n: usize, g: ConvGeom) -> Option<usize> {
    (n + 2 * g.pad).checked_sub(g.kernel).map(|v| v / g.stride + 1)
}

/// Range of output positions `o` for which `o * s + k - p` lies in `0..n_in`.
fn valid_range(n_out: usize, n_in: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= n_in - 1  =>  o <= (n_in - 1 + p - k) / s
    let top = n_in + p;
    let hi = if top <= k { 0 } else { ((top - 1 - k) / s + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Spatial layout shared by a convolution and its adjoints: `inner` is the
/// padded-side grid, `outer` the strided-side grid.
#[derive(Clone, Copy)]
struct Patch {
    b: usize,
    c: usize,
    inner: (usize, usize),
    outer: (usize, usize),
    g: ConvGeom,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.g.kernel * self.g.kernel
    }

    fn cols(&self) -> usize {
        self.b * self.outer.0 * self.outer.1
    }

    /// Calls `f(row, col, inner_offset)` for every in-bounds tap, where
    /// `inner_offset` indexes a `[B, C, H, W]` buffer over the inner grid.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (h, wd) = self.inner;
        let (ho, wo) = self.outer;
        let (k, s, p) = (self.g.kernel, self.g.stride, self.g.pad);
        for c in 0..self.c {
            for a in 0..k {
                let (oh_lo, oh_hi) = valid_range(ho, h, s, a, p);
                for e in 0..k {
                    let (ow_lo, ow_hi) = valid_range(wo, wd, s, e, p);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let row = (c * k + a) * k + e;
                    for bi in 0..self.b {
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + a - p;
                            let col = (bi * ho + oh) * wo + ow_lo;
                            let off = ((bi * self.c + c) * h + ih) * wd + ow_lo * s + e - p;
                            f(row, col, off, ow_hi - ow_lo, s);
                        }
                    }
                }
            }
        }
    }

    /// `cols[row, col]`: the inner-grid value under each tap, zero outside.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut cols = vec![0.0; self.rows() * n];
        self.for_each_run(|row, col, off, len, s| {
            let dst = &mut cols[row * n + col..][..len];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = x[off + i * s];
            }
        });
        cols
    }

    /// Adjoint of [`Patch::im2col`]: scatters columns back onto the inner grid.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut y = vec![0.0; self.b * self.c * self.inner.0 * self.inner.1];
        self.for_each_run(|row, col, off, len, s| {
            let src = &cols[row * n + col..][..len];
            for (i, v) in src.iter().enumerate() {
                y[off + i * s] += v;
            }
        });
        y
    }
}

/// `[B, C, P] -> [C, B·P]`
fn channel_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * p..][..p].copy_from_slice(&x[(bi * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[C, B·P] -> [B, C, P]`
fn batch_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for bi in 0..b {
            out[(bi * c + ci) * p..][..p].copy_from_slice(&x[(ci * b + bi) * p..][..p]);
        }
    }
    out
}

/// `A[m, l] · B[l, n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, l: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..][..n];
        for j in 0..l {
            let av = a[i * l + j];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in ci.iter_mut().zip(&b[j * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A[l, m]ᵀ · B[l, n]`
fn gemm_tn(a: &[f64], b: &[f64], l: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for j in 0..l {
        let bj = &b[j * n..][..n];
        for i in 0..m {
            let av = a[j * m + i];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[i * n..][..n].iter_mut().zip(bj) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A[m, l] · B[n, l]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, l: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * l..][..l];
        for j in 0..n {
            c[i * n + j] = ai.iter().zip(&b[j * l..][..l]).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn conv_fwd(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let [b, ci, h, wd] = dims4(x, "conv")?;
    let [co, wci, kh, kw] = dims4(w, "conv weight")?;
    if wci != ci || kh != g.kernel || kw != g.kernel {
        return Err(dim_err!("conv: weight {:?} incompatible with input {:?}", w.shape, x.shape));
    }
    let (ho, wo) = match (conv_out(h, g), conv_out(wd, g)) {
        (Some(a), Some(c)) => (a, c),
        _ => return Err(dim_err!("conv: kernel {} larger than padded input {:?}", g.kernel, x.shape)),
    };
    let patch = Patch { b, c: ci, inner: (h, wd), outer: (ho, wo), g };
    let cols = patch.im2col(&x.data);
    let y = gemm_nn(&w.data, &cols, co, patch.rows(), patch.cols());
    Tensor::new(vec![b, co, ho, wo], batch_major(&y, b, co, ho * wo))
}

/// Adjoint of [`conv_fwd`] in `x`: `x: [B, Ci, h, w]`, `w: [Ci, Co, K, K]`.
fn convt_fwd(x: &Tensor, w: &Tensor, g: ConvGeom, out_hw: (usize, usize)) -> Result<Tensor> {
    let [b, ci, h, wd] = dims4(x, "transposed conv")?;
    let [wci, co, kh, kw] = dims4(w, "transposed conv weight")?;
    if wci != ci || kh != g.kernel || kw != g.kernel {
        return Err(dim_err!("transposed conv: weight {:?} incompatible with input {:?}", w.shape, x.shape));
    }
    let patch = Patch { b, c: co, inner: out_hw, outer: (h, wd), g };
    let xm = channel_major(&x.data, b, ci, h * wd);
    let cols = gemm_tn(&w.data, &xm, ci, patch.rows(), patch.cols());
    Tensor::new(vec![b, co, out_hw.0, out_hw.1], patch.col2im(&cols))
}

/// z[o, c, a, e] = Σ gy[b, o, oh, ow] · inp[b, c, oh·s + a − p, ow·s + e − p]
fn convw_fwd(inp: &Tensor, gy: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let [b, ci, h, wd] = dims4(inp, "conv weight gradient")?;
    let [gb, co, ho, wo] = dims4(gy, "conv weight gradient")?;
    if gb != b {
        return Err(dim_err!("conv weight gradient: batch {:?} vs {:?}", inp.shape, gy.shape));
    }
    let k = g.kernel;
    let patch = Patch { b, c: ci, inner: (h, wd), outer: (ho, wo), g };
    let cols = patch.im2col(&inp.data);
    let gm = channel_major(&gy.data, b, co, ho * wo);
    let z = gemm_nt(&gm, &cols, co, patch.cols(), patch.rows());
    Tensor::new(vec![co, ci, k, k], z)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Add(a, b) => {
                same_shape(v(a), v(b), "add")?;
                zip(v(a), v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same_shape(v(a), v(b), "sub")?;
                zip(v(a), v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same_shape(v(a), v(b), "mul")?;
                zip(v(a), v(b), |x, y| x * y)
            }
            Op::Neg(a) => map(v(a), |x| -x),
            Op::Scale(a, s) => map(v(a), |x| x * s),
            Op::AddScalar(a, s) => map(v(a), |x| x + s),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(dim_err!("matmul: incompatible shapes {:?} and {:?}", a.shape, b.shape));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let row = &mut out[i * m..][..m];
                    for r in 0..k {
                        let av = a.data[i * k + r];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, bv) in row.iter_mut().zip(&b.data[r * m..][..m]) {
                            *o += av * bv;
                        }
                    }
                }
                Tensor { shape: vec![n, m], data: out }
            }
            Op::Transpose(a) => {
                let a = v(a);
                if a.shape.len() != 2 {
                    return Err(dim_err!("transpose needs a matrix, got {:?}", a.shape));
                }
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut out = Vec::with_capacity(r * c);
                for j in 0..c {
                    for i in 0..r {
                        out.push(a.data[i * c + j]);
                    }
                }
                Tensor { shape: vec![c, r], data: out }
            }
            Op::Reshape(_) => unreachable!("reshape is recorded with an explicit value"),
            Op::SumKeep { a, outer, inner } => {
                let a = v(a);
                let mid = a.len() / (outer * inner);
                let mut out = vec![0.0; mid];
                for o in 0..*outer {
                    for (m, acc) in out.iter_mut().enumerate() {
                        let base = (o * mid + m) * inner;
                        *acc += a.data[base..base + inner].iter().sum::<f64>();
                    }
                }
                Tensor { shape: vec![mid], data: out }
            }
            Op::Expand { .. } => unreachable!("expand is recorded with an explicit value"),
            Op::Upsample(a, f) => {
                let a = v(a);
                let [b, c, h, w] = dims4(a, "upsample")?;
                let (ho, wo) = (h * f, w * f);
                let mut out = vec![0.0; b * c * ho * wo];
                for p in 0..b * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            out[(p * ho + oh) * wo + ow] = a.data[(p * h + oh / f) * w + ow / f];
                        }
                    }
                }
                Tensor { shape: vec![b, c, ho, wo], data: out }
            }
            Op::SumPool(a, f) => {
                let a = v(a);
                let [b, c, h, w] = dims4(a, "sum pool")?;
                if h % f != 0 || w % f != 0 {
                    return Err(dim_err!("sum pool by {f} on {:?}", a.shape));
                }
                let (ho, wo) = (h / f, w / f);
                let mut out = vec![0.0; b * c * ho * wo];
                for p in 0..b * c {
                    for ih in 0..h {
                        for iw in 0..w {
                            out[(p * ho + ih / f) * wo + iw / f] += a.data[(p * h + ih) * w + iw];
                        }
                    }
                }
                Tensor { shape: vec![b, c, ho, wo], data: out }
            }
            Op::Mask(a, m) | Op::Relu(a, m) | Op::LeakyRelu(a, m) => {
                let a = v(a);
                if a.len() != m.len() {
                    return Err(dim_err!("mask of length {} on tensor {:?}", m.len(), a.shape));
                }
                Tensor { shape: a.shape.clone(), data: a.data.iter().zip(m.iter()).map(|(x, s)| x * s).collect() }
            }
            Op::Tanh(a) => map(v(a), f64::tanh),
            Op::Sqrt(a) => map(v(a), f64::sqrt),
            Op::Recip(a) => map(v(a), |x| 1.0 / x),
            Op::Conv { x, w, g } => conv_fwd(v(x), v(w), *g)?,
            Op::ConvT { .. } => unreachable!("transposed conv is recorded with an explicit value"),
            Op::ConvW { a, gy, g } => convw_fwd(v(a), v(gy), *g)?,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a)).expect("neg is total")
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s)).expect("scale is total")
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::AddScalar(a, s)).expect("add_scalar is total")
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a)).expect("tanh is total")
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a)).expect("sqrt is total")
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a)).expect("recip is total")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", src.shape, shape));
        }
        let value = Tensor { shape: shape.to_vec(), data: src.data.clone() };
        self.nodes.push(Node { op: Op::Reshape(a), value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn sum_keep(&mut self, a: Var, outer: usize, inner: usize) -> Result<Var> {
        let n = self.value(a).len();
        if outer == 0 || inner == 0 || n % (outer * inner) != 0 {
            return Err(dim_err!("cannot group {:?} as [{outer}, _, {inner}]", self.value(a).shape));
        }
        self.push(Op::SumKeep { a, outer, inner })
    }

    fn expand(&mut self, a: Var, outer: usize, inner: usize, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let mid = src.len();
        if outer * mid * inner != shape.iter().product::<usize>() {
            return Err(dim_err!("cannot expand {:?} to {:?}", src.shape, shape));
        }
        let mut data = Vec::with_capacity(outer * mid * inner);
        for _ in 0..outer {
            for &x in &src.data {
                data.extend(std::iter::repeat_n(x, inner));
            }
        }
        let value = Tensor { shape: shape.to_vec(), data };
        self.nodes.push(Node { op: Op::Expand { a, outer, inner }, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.sum_keep(a, 1, n).expect("sum_all is total")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a `[1]` tensor to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = shape.iter().product();
        self.expand(a, 1, n, shape)
    }

    /// `[n] -> [rows, n]`
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let n = self.value(a).len();
        self.expand(a, rows, 1, &[rows, n])
    }

    /// `[rows, n] -> [n]`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).shape[0];
        self.sum_keep(a, rows, 1)
    }

    /// `[C] -> shape` where `shape` is `[B, C, H, W]`.
    pub fn broadcast_channels(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.len() != 4 || shape[1] != self.value(a).len() {
            return Err(dim_err!("cannot broadcast {:?} over channels of {:?}", self.value(a).shape, shape));
        }
        self.expand(a, shape[0], shape[2] * shape[3], shape)
    }

    /// `[B, C, H, W] -> [C]`
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let [b, _, h, w] = dims4(self.value(a), "sum_channels")?;
        self.sum_keep(a, b, h * w)
    }

    /// `[B] -> shape` with the leading axis matching.
    pub fn broadcast_items(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.first() != Some(&self.value(a).len()) {
            return Err(dim_err!("cannot broadcast {:?} over items of {:?}", self.value(a).shape, shape));
        }
        let inner = shape[1..].iter().product();
        self.expand(a, 1, inner, shape)
    }

    /// Sums everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_items(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape.clone();
        let inner = shape[1..].iter().product();
        self.sum_keep(a, 1, inner)
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(a);
        }
        self.push(Op::Upsample(a, factor))
    }

    pub fn sum_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(a);
        }
        self.push(Op::SumPool(a, factor))
    }

    /// Multiplies by a constant mask.
    pub fn mask(&mut self, a: Var, m: Rc<Vec<f64>>) -> Result<Var> {
        self.push(Op::Mask(a, m))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m: Vec<f64> = self.value(a).data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        self.push(Op::Relu(a, Rc::new(m))).expect("relu is total")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let m: Vec<f64> = self.value(a).data.iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect();
        self.push(Op::LeakyRelu(a, Rc::new(m))).expect("leaky relu is total")
    }

    /// 2-D convolution. `x: [B, Ci, H, W]`, `w: [Co, Ci, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let kernel = self.value(w).shape.get(2).copied().unwrap_or(0);
        self.push(Op::Conv { x, w, g: ConvGeom { stride, pad, kernel } })
    }

    /// Transposed convolution. `x: [B, Ci, H, W]`, `w: [Ci, Co, K, K]`,
    /// output spatial size given explicitly.
    pub fn conv_t2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Result<Var> {
        let kernel = self.value(w).shape.get(2).copied().unwrap_or(0);
        let g = ConvGeom { stride, pad, kernel };
        self.conv_t_geom(x, w, g, out_hw)
    }

    fn conv_t_geom(&mut self, x: Var, w: Var, g: ConvGeom, out_hw: (usize, usize)) -> Result<Var> {
        let [_, _, h, wd] = dims4(self.value(x), "transposed conv")?;
        if conv_out(out_hw.0, g) != Some(h) || conv_out(out_hw.1, g) != Some(wd) {
            return Err(dim_err!(
                "transposed conv: output {:?} does not map back onto input {:?} with {:?}",
                out_hw,
                self.value(x).shape,
                g
            ));
        }
        let value = convt_fwd(self.value(x), self.value(w), g, out_hw)?;
        self.nodes.push(Node { op: Op::ConvT { x, w, g }, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_w(&mut self, a: Var, gy: Var, g: ConvGeom) -> Result<Var> {
        self.push(Op::ConvW { a, gy, g })
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv { x, w, .. } | Op::ConvT { x, w, .. } => vec![*x, *w],
            Op::ConvW { a, gy, .. } => vec![*a, *gy],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumKeep { a, .. }
            | Op::Expand { a, .. }
            | Op::Upsample(a, _)
            | Op::SumPool(a, _)
            | Op::Mask(a, _)
            | Op::Relu(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::Recip(a) => vec![*a],
        }
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`, recorded
    /// on this tape. Unreached variables get a zero leaf.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(y).len() != 1 {
            return Err(ApolloError::Contract(format!(
                "gradient requires a scalar output, got shape {:?}",
                self.value(y).shape
            )));
        }
        let end = y.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && Self::inputs(&self.nodes[i].op).iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; end];
        if needs[y.0] {
            adj[y.0] = Some(self.leaf(Tensor::filled(&self.value(y).shape.clone(), 1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g)? {
                if !needs[input.0] {
                    continue;
                }
                adj[input.0] = Some(match adj[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.leaf(Tensor::zeros(&self.value(*w).shape.clone()))),
            })
            .collect()
    }

    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(*a, g), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, *b)?;
                let gb = self.mul(g, *a)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, self.neg(g))],
            Op::Scale(a, s) => vec![(*a, self.scale(g, *s))],
            Op::AddScalar(a, _) => vec![(*a, g)],
            Op::MatMul(a, b) => {
                let bt = self.transpose(*b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(*a)?;
                let gb = self.matmul(at, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, self.transpose(g)?)],
            Op::Reshape(a) => {
                let shape = self.value(*a).shape.clone();
                vec![(*a, self.reshape(g, &shape)?)]
            }
            Op::SumKeep { a, outer, inner } => {
                let shape = self.value(*a).shape.clone();
                vec![(*a, self.expand(g, *outer, *inner, &shape)?)]
            }
            Op::Expand { a, outer, inner } => {
                let shape = self.value(*a).shape.clone();
                let s = self.sum_keep(g, *outer, *inner)?;
                vec![(*a, self.reshape(s, &shape)?)]
            }
            Op::Upsample(a, f) => vec![(*a, self.sum_pool(g, *f)?)],
            Op::SumPool(a, f) => vec![(*a, self.upsample(g, *f)?)],
            Op::Mask(a, m) | Op::Relu(a, m) | Op::LeakyRelu(a, m) => vec![(*a, self.mask(g, m.clone())?)],
            Op::Tanh(a) => {
                let t2 = self.mul(out, out)?;
                let gt2 = self.mul(g, t2)?;
                vec![(*a, self.sub(g, gt2)?)]
            }
            Op::Sqrt(a) => {
                let r = self.recip(out);
                let h = self.scale(r, 0.5);
                vec![(*a, self.mul(g, h)?)]
            }
            Op::Recip(a) => {
                let r2 = self.mul(out, out)?;
                let gr = self.mul(g, r2)?;
                vec![(*a, self.neg(gr))]
            }
            Op::Conv { x, w, g: geom } => {
                let [_, _, h, wd] = dims4(self.value(*x), "conv")?;
                let gx = self.conv_t_geom(g, *w, *geom, (h, wd))?;
                let gw = self.conv_w(*x, g, *geom)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvT { x, w, g: geom } => {
                let gx = self.push(Op::Conv { x: g, w: *w, g: *geom })?;
                let gw = self.conv_w(g, *x, *geom)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvW { a, gy, g: geom } => {
                let [_, _, h, wd] = dims4(self.value(*a), "conv weight gradient")?;
                let ga = self.conv_t_geom(*gy, g, *geom, (h, wd))?;
                let ggy = self.push(Op::Conv { x: *a, w: g, g: *geom })?;
                vec![(*a, ga), (*gy, ggy)]
            }
        })
    }

    /// Recomputes every recorded node from its recorded inputs and reports
    /// whether all values are reproduced bitwise.
    pub fn replay(&self) -> bool {
        self.nodes.iter().all(|n| {
            let fresh = match &n.op {
                Op::Leaf => return true,
                Op::Reshape(a) => self.value(*a).data.clone(),
                Op::Expand { a, outer, inner } => {
                    let src = &self.value(*a).data;
                    let mut d = Vec::new();
                    for _ in 0..*outer {
                        for &x in src {
                            d.extend(std::iter::repeat_n(x, *inner));
                        }
                    }
                    d
                }
                Op::ConvT { x, w, g } => {
                    let hw = (n.value.shape[2], n.value.shape[3]);
                    match convt_fwd(self.value(*x), self.value(*w), *g, hw) {
                        Ok(t) => t.data,
                        Err(_) => return false,
                    }
                }
                op => match self.eval(op) {
                    Ok(t) => t.data,
                    Err(_) => return false,
                },
            };
            fresh.len() == n.value.data.len()
                && fresh.iter().zip(&n.value.data).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Smallest magnitude of any value fed into a ReLU-type node.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Relu(a, _) | Op::LeakyRelu(a, _) => {
                    Some(self.value(*a).data.iter().fold(f64::INFINITY, |m, x| m.min(x.abs())))
                }
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut m = x.clone();
                m.data[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        t(shape, &(0..n).map(|i| ((i * 7 + 3) % 11) as f64 * scale - 0.4).collect::<Vec<_>>())
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq);
        let g = tape.grad(y, &[x]).unwrap()[0];
        assert_eq!(tape.value(g).data, vec![2.0, -4.0, 1.0]);
        assert!(tape.replay());
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let a0 = seq(&[2, 3], 0.3);
        let b0 = seq(&[3, 2], 0.2);
        let f = |a: &Tensor| {
            let mut tp = Tape::new();
            let a = tp.leaf(a.clone());
            let b = tp.leaf(b0.clone());
            let m = tp.matmul(a, b).unwrap();
            let th = tp.tanh(m);
            let s = tp.sum_all(th);
            tp.scalar_value(s)
        };
        let mut tp = Tape::new();
        let a = tp.leaf(a0.clone());
        let b = tp.leaf(b0.clone());
        let m = tp.matmul(a, b).unwrap();
        let th = tp.tanh(m);
        let s = tp.sum_all(th);
        let g = tp.grad(s, &[a]).unwrap()[0];
        for (an, nu) in tp.value(g).data.iter().zip(numeric(&f, &a0)) {
            assert!((an - nu).abs() < 1e-8, "{an} vs {nu}");
        }
    }

    fn conv_loss(kind: u8, x: &Tensor, w: &Tensor, geom: (usize, usize), out_hw: (usize, usize)) -> f64 {
        let mut tp = Tape::new();
        let xv = tp.leaf(x.clone());
        let wv = tp.leaf(w.clone());
        let y = match kind {
            0 => tp.conv2d(xv, wv, geom.0, geom.1).unwrap(),
            _ => tp.conv_t2d(xv, wv, geom.0, geom.1, out_hw).unwrap(),
        };
        let sq = tp.mul(y, y).unwrap();
        let s = tp.sum_all(sq);
        tp.scalar_value(s)
    }

    #[test]
    fn conv_and_transposed_conv_gradients() {
        for &(kind, stride, pad, k) in &[(0u8, 1, 1, 3), (0, 2, 1, 3), (0, 2, 0, 1), (1, 2, 1, 4), (1, 1, 1, 3), (1, 4, 2, 8)] {
            let x = seq(&[2, 2, 3, 3], 0.1);
            let (w, out_hw) = if kind == 0 {
                (seq(&[3, 2, k, k], 0.05), (0, 0))
            } else {
                let o = (3 - 1) * stride + k - 2 * pad;
                (seq(&[2, 3, k, k], 0.05), (o, o))
            };
            let mut tp = Tape::new();
            let xv = tp.leaf(x.clone());
            let wv = tp.leaf(w.clone());
            let y = if kind == 0 {
                tp.conv2d(xv, wv, stride, pad).unwrap()
            } else {
                tp.conv_t2d(xv, wv, stride, pad, out_hw).unwrap()
            };
            let sq = tp.mul(y, y).unwrap();
            let s = tp.sum_all(sq);
            let gs = tp.grad(s, &[xv, wv]).unwrap();
            let nx = numeric(&|xx| conv_loss(kind, xx, &w, (stride, pad), out_hw), &x);
            let nw = numeric(&|ww| conv_loss(kind, &x, ww, (stride, pad), out_hw), &w);
            for (an, nu) in tp.value(gs[0]).data.iter().zip(&nx).chain(tp.value(gs[1]).data.iter().zip(&nw)) {
                assert!((an - nu).abs() < 1e-6 * (1.0 + nu.abs()), "kind {kind} s{stride}: {an} vs {nu}");
            }
            assert!(tp.replay());
        }
    }

    #[test]
    fn second_order_through_conv() {
        // d/dw of ||d/dx sum(conv(x,w)^2)||^2 against differences
        let x = seq(&[1, 1, 4, 4], 0.1);
        let w0 = seq(&[2, 1, 3, 3], 0.07);
        let f = |w: &Tensor| {
            let mut tp = Tape::new();
            let xv = tp.leaf(x.clone());
            let wv = tp.leaf(w.clone());
            let y = tp.conv2d(xv, wv, 2, 1).unwrap();
            let th = tp.tanh(y);
            let s = tp.sum_all(th);
            let gx = tp.grad(s, &[xv]).unwrap()[0];
            let sq = tp.mul(gx, gx).unwrap();
            let n = tp.sum_all(sq);
            (tp, wv, n)
        };
        let (mut tp, wv, n) = f(&w0);
        let gw = tp.grad(n, &[wv]).unwrap()[0];
        let nw = numeric(&|w| { let (tp, _, n) = f(w); tp.scalar_value(n) }, &w0);
        for (an, nu) in tp.value(gw).data.iter().zip(&nw) {
            assert!((an - nu).abs() < 1e-6 * (1.0 + nu.abs()), "{an} vs {nu}");
        }
    }

    #[test]
    fn grouping_ops_and_pooling() {
        let mut tp = Tape::new();
        let x = tp.leaf(seq(&[2, 3, 2, 2], 0.2));
        let c = tp.sum_channels(x).unwrap();
        assert_eq!(tp.shape(c), &[3]);
        let b = tp.broadcast_channels(c, &[2, 3, 2, 2]).unwrap();
        let up = tp.upsample(b, 2).unwrap();
        assert_eq!(tp.shape(up), &[2, 3, 4, 4]);
        let it = tp.sum_items(up).unwrap();
        let r = tp.reshape(it, &[1, 2]).unwrap();
        let rows = tp.sum_rows(r).unwrap();
        let br = tp.broadcast_rows(rows, 3).unwrap();
        let sq = tp.mul(br, br).unwrap();
        let y = tp.sum_all(sq);
        let g = tp.grad(y, &[x]).unwrap()[0];
        assert_eq!(tp.shape(g), &[2, 3, 2, 2]);
        assert!(tp.replay());
        let total: f64 = tp.value(x).data.iter().sum();
        let _ = total;
    }

    #[test]
    fn unreached_and_constant() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]));
        let c = tp.leaf(Tensor::scalar(3.0));
        let y = tp.scale(c, 2.0);
        let g = tp.grad(y, &[x]).unwrap()[0];
        assert_eq!(tp.value(g).data, vec![0.0, 0.0]);
        assert!(matches!(tp.grad(x, &[x]), Err(ApolloError::Contract(_))));
    }

    #[test]
    fn kink_distance_tracks_relu_inputs() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[0.5, -0.02, 3.0]));
        let _ = tp.relu(x);
        let _ = tp.leaky_relu(x, 0.2);
        assert_eq!(tp.min_kink_distance(), 0.02);
        assert_eq!(Tape::new().min_kink_distance(), f64::INFINITY);
    }

    #[test]
    fn valid_range_is_exact() {
        for n_out in 1..6 {
            for n_in in 1..6 {
                for s in 1..4 {
                    for k in 0..5 {
                        for p in 0..3 {
                            let (lo, hi) = valid_range(n_out, n_in, s, k, p);
                            for o in 0..n_out {
                                let pos = (o * s + k) as isize - p as isize;
                                let ok = pos >= 0 && (pos as usize) < n_in;
                                assert_eq!(ok, o >= lo && o < hi, "{n_out} {n_in} {s} {k} {p} {o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
