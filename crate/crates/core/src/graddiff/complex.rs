//! Complex values on the real tape, stored as separate real and imaginary
//! channels. An absent imaginary channel is exactly zero, which keeps
//! real-tagged parameters real all the way through differentiation.

use std::rc::Rc;

use crate::ctensor::{CTensor, Cplx};
use crate::error::Result;

use super::tape::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Option<Var>,
}

impl CVar {
    pub fn real(re: Var) -> Self {
        Self { re, im: None }
    }
}

fn opt_add(t: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(t.add(a, b)?),
        (x, None) | (None, x) => x,
    })
}

impl Tape {
    pub fn cleaf(&mut self, v: &CTensor) -> CVar {
        let re = self.leaf(Tensor { shape: v.shape().to_vec(), data: v.re() });
        let im = self.leaf(Tensor { shape: v.shape().to_vec(), data: v.im() });
        CVar { re, im: Some(im) }
    }

    /// Leaf whose imaginary channel is structurally zero.
    pub fn cleaf_real(&mut self, v: &CTensor) -> CVar {
        CVar::real(self.leaf(Tensor { shape: v.shape().to_vec(), data: v.re() }))
    }

    pub fn cvalue(&self, v: CVar) -> CTensor {
        let re = self.value(v.re);
        match v.im {
            Some(im) => CTensor::from_parts(&re.shape, &re.data, &self.value(im).data),
            None => CTensor::from_real(&re.shape, &re.data),
        }
        .expect("channels share a shape")
    }

    pub fn cshape(&self, v: CVar) -> Vec<usize> {
        self.shape(v.re).to_vec()
    }

    fn unary(&mut self, a: CVar, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<CVar> {
        let re = f(self, a.re)?;
        let im = match a.im {
            Some(i) => Some(f(self, i)?),
            None => None,
        };
        Ok(CVar { re, im })
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let re = self.add(a.re, b.re)?;
        let im = opt_add(self, a.im, b.im)?;
        Ok(CVar { re, im })
    }

    pub fn csub(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let nb = self.cneg(b);
        self.cadd(a, nb)
    }

    pub fn cneg(&mut self, a: CVar) -> CVar {
        self.unary(a, |t, v| Ok(t.neg(v))).expect("neg is total")
    }

    pub fn cscale(&mut self, a: CVar, s: f64) -> CVar {
        self.unary(a, |t, v| Ok(t.scale(v, s))).expect("scale is total")
    }

    /// Elementwise complex product.
    pub fn cmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        self.bilinear(a, b, &|t, x, y| t.mul(x, y))
    }

    pub fn cmatmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        self.bilinear(a, b, &|t, x, y| t.matmul(x, y))
    }

    pub fn ctranspose(&mut self, a: CVar) -> Result<CVar> {
        self.unary(a, |t, v| t.transpose(v))
    }

    pub fn creshape(&mut self, a: CVar, shape: &[usize]) -> Result<CVar> {
        self.unary(a, |t, v| t.reshape(v, shape))
    }

    pub fn cbroadcast_rows(&mut self, a: CVar, rows: usize) -> Result<CVar> {
        self.unary(a, |t, v| t.broadcast_rows(v, rows))
    }

    pub fn cbroadcast_channels(&mut self, a: CVar, shape: &[usize]) -> Result<CVar> {
        self.unary(a, |t, v| t.broadcast_channels(v, shape))
    }

    pub fn cupsample(&mut self, a: CVar, factor: usize) -> Result<CVar> {
        self.unary(a, |t, v| t.upsample(v, factor))
    }

    pub fn cconv2d(&mut self, x: CVar, w: CVar, stride: usize, pad: usize) -> Result<CVar> {
        let f = move |t: &mut Tape, a: Var, b: Var| t.conv2d(a, b, stride, pad);
        self.bilinear(x, w, &f)
    }

    pub fn cconv_t2d(&mut self, x: CVar, w: CVar, stride: usize, pad: usize, out_hw: (usize, usize)) -> Result<CVar> {
        let f = move |t: &mut Tape, a: Var, b: Var| t.conv_t2d(a, b, stride, pad, out_hw);
        self.bilinear(x, w, &f)
    }

    /// Applies a bilinear real map `f` with complex arithmetic.
    fn bilinear(&mut self, a: CVar, b: CVar, f: &dyn Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<CVar> {
        let rr = f(self, a.re, b.re)?;
        let re = match (a.im, b.im) {
            (Some(ai), Some(bi)) => {
                let ii = f(self, ai, bi)?;
                self.sub(rr, ii)?
            }
            _ => rr,
        };
        let ri = match b.im {
            Some(bi) => Some(f(self, a.re, bi)?),
            None => None,
        };
        let ir = match a.im {
            Some(ai) => Some(f(self, ai, b.re)?),
            None => None,
        };
        let im = opt_add(self, ri, ir)?;
        Ok(CVar { re, im })
    }

    /// ReLU applied to the real and imaginary channels independently.
    pub fn ccrelu(&mut self, a: CVar) -> CVar {
        self.unary(a, |t, v| Ok(t.relu(v))).expect("relu is total")
    }

    /// tanh applied to the real and imaginary channels independently.
    pub fn csplit_tanh(&mut self, a: CVar) -> CVar {
        self.unary(a, |t, v| Ok(t.tanh(v))).expect("tanh is total")
    }

    /// Σ |a|² over all entries as a real `[1]` node.
    pub fn cnorm_sqr(&mut self, a: CVar) -> Result<Var> {
        let rr = self.mul(a.re, a.re)?;
        let s = match a.im {
            Some(i) => {
                let ii = self.mul(i, i)?;
                self.add(rr, ii)?
            }
            None => rr,
        };
        Ok(self.sum_all(s))
    }

    /// Real-valued zero-imaginary complex constant from a mask-free tensor.
    pub fn cconst(&mut self, v: &CTensor) -> CVar {
        if v.is_real() {
            self.cleaf_real(v)
        } else {
            self.cleaf(v)
        }
    }

    /// Gradient of a real scalar with respect to complex leaves, returned as
    /// `∂L/∂re + i ∂L/∂im`; absent imaginary channels get exact zeros.
    pub fn cgrad(&mut self, loss: Var, wrt: &[CVar]) -> Result<Vec<CTensor>> {
        let mut flat = Vec::new();
        for w in wrt {
            flat.push(w.re);
            if let Some(i) = w.im {
                flat.push(i);
            }
        }
        let gs = self.grad(loss, &flat)?;
        let mut it = gs.into_iter();
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let gr = it.next().expect("one gradient per channel");
            let re = self.value(gr).clone();
            let t = match w.im {
                Some(_) => {
                    let gi = it.next().expect("one gradient per channel");
                    CTensor::from_parts(&re.shape, &re.data, &self.value(gi).data)?
                }
                None => CTensor::from_real(&re.shape, &re.data)?,
            };
            out.push(t);
        }
        Ok(out)
    }

    /// Multiplies both channels by a constant real mask.
    pub fn cmask(&mut self, a: CVar, m: Rc<Vec<f64>>) -> Result<CVar> {
        self.unary(a, |t, v| t.mask(v, m.clone()))
    }
}

/// Complex scalar read back from a `[1]`-shaped complex node.
pub fn cscalar(t: &Tape, v: CVar) -> Cplx {
    Cplx::new(t.scalar_value(v.re), v.im.map_or(0.0, |i| t.scalar_value(i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Cplx {
        Cplx::new(re, im)
    }

    #[test]
    fn complex_product_and_matmul_values() {
        let mut t = Tape::new();
        let a = t.cleaf(&CTensor::vector(vec![c(1.0, 1.0), c(2.0, 0.0)]));
        let b = t.cleaf(&CTensor::vector(vec![c(3.0, 0.0), c(1.0, -1.0)]));
        let p = t.cmul(a, b).unwrap();
        assert_eq!(t.cvalue(p).data(), &[c(3.0, 3.0), c(2.0, -2.0)]);

        let m = CTensor::matrix(1, 2, vec![c(0.0, 1.0), c(2.0, -1.0)]).unwrap();
        let n = CTensor::matrix(2, 1, vec![c(1.0, 2.0), c(-1.0, 0.5)]).unwrap();
        let mv = t.cleaf(&m);
        let nv = t.cleaf(&n);
        let r = t.cmatmul(mv, nv).unwrap();
        let expect = crate::ctensor::matmul(&m, &n).unwrap();
        assert!(t.cvalue(r).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn real_leaves_get_zero_imaginary_gradient() {
        let mut t = Tape::new();
        let u = t.cleaf_real(&CTensor::from_real(&[2], &[0.5, -1.0]).unwrap());
        let x = t.cleaf(&CTensor::vector(vec![c(1.0, 2.0), c(-0.5, 1.0)]));
        let p = t.cmul(u, x).unwrap();
        let l = t.cnorm_sqr(p).unwrap();
        let g = t.cgrad(l, &[u, x]).unwrap();
        assert!(g[0].data().iter().all(|z| z.im == 0.0));
        // d/du_r |u_r x_r|² = 2 u_r |x_r|²
        assert!((g[0].data()[0].re - 2.0 * 0.5 * 5.0).abs() < 1e-12);
        // d/dRe(x) = 2 u² Re(x), d/dIm(x) = 2 u² Im(x)
        assert!((g[1].data()[1] - c(2.0 * -0.5, 2.0 * 1.0)).norm() < 1e-12);
    }

    #[test]
    fn split_activations() {
        let mut t = Tape::new();
        let a = t.cleaf(&CTensor::vector(vec![c(-1.0, 2.0), c(3.0, -4.0)]));
        let r = t.ccrelu(a);
        assert_eq!(t.cvalue(r).data(), &[c(0.0, 2.0), c(3.0, 0.0)]);
        let th = t.csplit_tanh(a);
        assert_eq!(t.cvalue(th).data()[0], c((-1.0f64).tanh(), 2.0f64.tanh()));
    }
}
