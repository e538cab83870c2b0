//! Dense complex tensors and the multilinear algebra the polynomial
//! expansions are written in: Hadamard and Khatri-Rao products, mode-m
//! vector products, mode-1 unfolding and CP reconstruction.
//!
//! Storage is row-major with the last index varying fastest. Transposes
//! never conjugate.

use std::ops::Deref;

use num_complex::Complex64;

use crate::error::{dim_err, ApolloError, Result};

pub type Cplx = Complex64;

pub const ZERO: Cplx = Cplx::new(0.0, 0.0);
pub const ONE: Cplx = Cplx::new(1.0, 0.0);

/// Dense complex tensor of arbitrary order.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Cplx>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Cplx>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("tensor dims must be positive, got {:?}", shape));
        }
        if numel(&shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} entries, got {}",
                shape,
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![ZERO; numel(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![ONE; numel(shape)] }
    }

    pub fn filled(shape: &[usize], v: Cplx) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn from_real(shape: &[usize], re: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), re.iter().map(|&r| Cplx::new(r, 0.0)).collect())
    }

    /// Builds from separate real and imaginary planes.
    pub fn from_parts(shape: &[usize], re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(dim_err!("real plane has {} entries, imaginary {}", re.len(), im.len()));
        }
        Self::new(shape.to_vec(), re.iter().zip(im).map(|(&r, &i)| Cplx::new(r, i)).collect())
    }

    pub fn vector(data: Vec<Cplx>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Cplx>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Cplx] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Cplx] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Cplx> {
        self.data
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.im).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows of a matrix (order-2 tensor).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, idx: &[usize]) -> Cplx {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: Cplx) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|c| c.im == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn map(&self, f: impl Fn(Cplx) -> Cplx) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&c| f(c)).collect() }
    }

    pub fn scale(&self, s: Cplx) -> Self {
        self.map(|c| c * s)
    }

    pub fn add(&self, other: &CTensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &CTensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &CTensor, what: &str, f: impl Fn(Cplx, Cplx) -> Cplx) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise modulus of the difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &CTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Plain (non-conjugating) transpose of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        if self.order() != 2 {
            return Err(dim_err!("transpose needs a matrix, got shape {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Vec<Cplx> {
        let c = self.shape[1];
        (0..self.shape[0]).map(|i| self.data[i * c + j]).collect()
    }
}

/// Matrix product; each entry accumulates over the inner index in order
/// starting from zero.
pub fn matmul(a: &CTensor, b: &CTensor) -> Result<CTensor> {
    if a.order() != 2 || b.order() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err!("matmul: incompatible shapes {:?} and {:?}", a.shape, b.shape));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![ZERO; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = ZERO;
            for r in 0..k {
                acc += a.data[i * k + r] * b.data[r * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    CTensor::new(vec![n, m], out)
}

/// `wᵀx` for a `d × k` matrix and a length-`d` vector.
pub fn matvec_t(w: &CTensor, x: &CTensor) -> Result<CTensor> {
    if w.order() != 2 || x.order() != 1 || w.shape[0] != x.shape[0] {
        return Err(dim_err!("transposed matvec: matrix {:?} vs vector {:?}", w.shape, x.shape));
    }
    let (d, k) = (w.shape[0], w.shape[1]);
    let mut out = vec![ZERO; k];
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = ZERO;
        for i in 0..d {
            acc += w.data[i * k + r] * x.data[i];
        }
        *o = acc;
    }
    Ok(CTensor::vector(out))
}

/// `w x` for an `o × k` matrix and a length-`k` vector.
pub fn matvec(w: &CTensor, x: &CTensor) -> Result<CTensor> {
    if w.order() != 2 || x.order() != 1 || w.shape[1] != x.shape[0] {
        return Err(dim_err!("matvec: matrix {:?} vs vector {:?}", w.shape, x.shape));
    }
    let (o, k) = (w.shape[0], w.shape[1]);
    let out = (0..o)
        .map(|i| {
            let mut acc = ZERO;
            for r in 0..k {
                acc += w.data[i * k + r] * x.data[r];
            }
            acc
        })
        .collect();
    Ok(CTensor::vector(out))
}

/// Elementwise product.
pub fn hadamard(a: &CTensor, b: &CTensor) -> Result<CTensor> {
    if a.shape != b.shape {
        return Err(dim_err!("hadamard: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(CTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

/// Column-wise Kronecker product; the row index of `a` varies slower.
pub fn khatri_rao(a: &CTensor, c: &CTensor) -> Result<CTensor> {
    if a.order() != 2 || c.order() != 2 {
        return Err(dim_err!("khatri_rao needs matrices, got {:?} and {:?}", a.shape, c.shape));
    }
    if a.shape[1] != c.shape[1] {
        return Err(dim_err!(
            "khatri_rao: column counts differ ({:?} vs {:?})",
            a.shape,
            c.shape
        ));
    }
    let (i_n, j_n, n) = (a.shape[0], c.shape[0], a.shape[1]);
    let mut out = Vec::with_capacity(i_n * j_n * n);
    for i in 0..i_n {
        for j in 0..j_n {
            for col in 0..n {
                out.push(a.data[i * n + col] * c.data[j * n + col]);
            }
        }
    }
    CTensor::new(vec![i_n * j_n, n], out)
}

/// Left-associated Khatri-Rao product `m₀ ⊙ m₁ ⊙ … ⊙ m_last`.
pub fn khatri_rao_all(mats: &[&CTensor]) -> Result<CTensor> {
    let (first, rest) = mats
        .split_first()
        .ok_or_else(|| dim_err!("khatri_rao_all over an empty list"))?;
    let mut acc = (*first).clone();
    if acc.order() != 2 {
        return Err(dim_err!("khatri_rao needs matrices, got {:?}", acc.shape));
    }
    for m in rest {
        acc = khatri_rao(&acc, m)?;
    }
    Ok(acc)
}

/// Contracts mode `m` (1-based) of `t` with `u`, without conjugation.
pub fn mode_m_product(t: &CTensor, u: &CTensor, m: usize) -> Result<CTensor> {
    if m == 0 || m > t.order() {
        return Err(dim_err!("mode {m} out of range for order-{} tensor", t.order()));
    }
    if u.order() != 1 || u.len() != t.shape[m - 1] {
        return Err(dim_err!(
            "mode-{m} product: vector {:?} vs tensor {:?}",
            u.shape,
            t.shape
        ));
    }
    let outer: usize = t.shape[..m - 1].iter().product();
    let jm = t.shape[m - 1];
    let inner: usize = t.shape[m..].iter().product();
    let mut out = vec![ZERO; outer * inner];
    for a in 0..outer {
        for b in 0..inner {
            let mut acc = ZERO;
            for j in 0..jm {
                acc += t.data[(a * jm + j) * inner + b] * u.data[j];
            }
            out[a * inner + b] = acc;
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(m - 1);
    Ok(CTensor { shape, data: out })
}

/// Mode-1 unfolding: `J₁ × (J₂⋯J_M)` with `i₂` varying fastest.
pub fn unfold1(t: &CTensor) -> Result<CTensor> {
    if t.order() < 2 {
        return Err(dim_err!("unfold1 needs order ≥ 2, got {:?}", t.shape));
    }
    let rows = t.shape[0];
    let rest = &t.shape[1..];
    let cols: usize = rest.iter().product();
    let mut out = vec![ZERO; rows * cols];
    let mut idx = vec![0usize; rest.len()];
    for flat in 0..cols {
        // flat is the row-major offset (last index fastest); map to i₂-fastest column
        let mut rem = flat;
        for p in (0..rest.len()).rev() {
            idx[p] = rem % rest[p];
            rem /= rest[p];
        }
        let mut col = 0;
        for p in (0..rest.len()).rev() {
            col = col * rest[p] + idx[p];
        }
        for r in 0..rows {
            out[r * cols + col] = t.data[r * cols + flat];
        }
    }
    CTensor::new(vec![rows, cols], out)
}

/// Inverse of [`unfold1`].
pub fn fold1(mat: &CTensor, shape: &[usize]) -> Result<CTensor> {
    if shape.len() < 2 || mat.order() != 2 || mat.shape[0] != shape[0] {
        return Err(dim_err!("fold1: matrix {:?} cannot fold into {:?}", mat.shape, shape));
    }
    let rest = &shape[1..];
    let cols: usize = rest.iter().product();
    if mat.shape[1] != cols {
        return Err(dim_err!("fold1: matrix {:?} cannot fold into {:?}", mat.shape, shape));
    }
    let rows = shape[0];
    let mut out = vec![ZERO; rows * cols];
    let mut idx = vec![0usize; rest.len()];
    for flat in 0..cols {
        let mut rem = flat;
        for p in (0..rest.len()).rev() {
            idx[p] = rem % rest[p];
            rem /= rest[p];
        }
        let mut col = 0;
        for p in (0..rest.len()).rev() {
            col = col * rest[p] + idx[p];
        }
        for r in 0..rows {
            out[r * cols + flat] = mat.data[r * cols + col];
        }
    }
    CTensor::new(shape.to_vec(), out)
}

/// Sum over `r` of the outer products of the `r`-th factor columns.
///
/// Accumulation runs over `r` outermost, and each rank-one term is formed as
/// `U¹[i₁,r] · (U^M ⊙ … ⊙ U²)[j,r]`, so `unfold1(cp_reconstruct(U))` is
/// bitwise equal to `U¹ (U^M ⊙ … ⊙ U²)ᵀ` computed with [`matmul`].
pub fn cp_reconstruct(factors: &[&CTensor]) -> Result<CTensor> {
    let first = factors
        .first()
        .ok_or_else(|| dim_err!("cp_reconstruct needs at least one factor"))?;
    for f in factors {
        if f.order() != 2 {
            return Err(dim_err!("cp factor must be a matrix, got {:?}", f.shape));
        }
        if f.shape[1] != first.shape[1] {
            return Err(dim_err!(
                "cp factors disagree on rank: {:?} vs {:?}",
                first.shape,
                f.shape
            ));
        }
    }
    let rank = first.shape[1];
    let rows = first.shape[0];
    let shape: Vec<usize> = factors.iter().map(|f| f.shape[0]).collect();
    if factors.len() == 1 {
        let mut out = vec![ZERO; rows];
        for r in 0..rank {
            for (i, o) in out.iter_mut().enumerate() {
                *o += first.data[i * rank + r];
            }
        }
        return CTensor::new(shape, out);
    }
    let tail: Vec<&CTensor> = factors[1..].iter().rev().copied().collect();
    let kr = khatri_rao_all(&tail)?;
    let cols = kr.shape[0];
    let mut unfolded = vec![ZERO; rows * cols];
    for r in 0..rank {
        for i in 0..rows {
            let a = first.data[i * rank + r];
            for j in 0..cols {
                unfolded[i * cols + j] += a * kr.data[j * rank + r];
            }
        }
    }
    fold1(&CTensor::new(vec![rows, cols], unfolded)?, &shape)
}

/// Maximum entrywise deviation between `(⊙A)ᵀ(⊙C)` and
/// `(A₁ᵀC₁) ∗ … ∗ (A_NᵀC_N)`.
pub fn mixed_product_check(a: &[CTensor], c: &[CTensor]) -> Result<f64> {
    if a.is_empty() || a.len() != c.len() {
        return Err(dim_err!("mixed product: {} A matrices vs {} C matrices", a.len(), c.len()));
    }
    for (nu, (an, cn)) in a.iter().zip(c).enumerate() {
        if an.order() != 2 || cn.order() != 2 || an.shape[0] != cn.shape[0] {
            return Err(dim_err!(
                "mixed product: A_{nu} {:?} and C_{nu} {:?} are not row-compatible",
                an.shape,
                cn.shape
            ));
        }
        if an.shape[1] != a[0].shape[1] || cn.shape[1] != c[0].shape[1] {
            return Err(dim_err!("mixed product: column counts must agree across each set"));
        }
    }
    let ka = khatri_rao_all(&a.iter().collect::<Vec<_>>())?;
    let kc = khatri_rao_all(&c.iter().collect::<Vec<_>>())?;
    let lhs = matmul(&ka.transpose()?, &kc)?;
    let mut rhs = matmul(&a[0].transpose()?, &c[0])?;
    for (an, cn) in a.iter().zip(c).skip(1) {
        rhs = hadamard(&rhs, &matmul(&an.transpose()?, cn)?)?;
    }
    Ok(lhs.max_abs_diff(&rhs))
}

/// A complex tensor whose imaginary parts are all exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RTensor(CTensor);

impl RTensor {
    pub fn new(t: CTensor) -> Result<Self> {
        if !t.is_real() {
            return Err(ApolloError::Parameter(format!(
                "tensor of shape {:?} has nonzero imaginary parts",
                t.shape
            )));
        }
        Ok(Self(t))
    }

    pub fn from_values(shape: &[usize], re: &[f64]) -> Result<Self> {
        Ok(Self(CTensor::from_real(shape, re)?))
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.re()
    }

    pub fn into_inner(self) -> CTensor {
        self.0
    }
}

impl Deref for RTensor {
    type Target = CTensor;
    fn deref(&self) -> &CTensor {
        &self.0
    }
}
