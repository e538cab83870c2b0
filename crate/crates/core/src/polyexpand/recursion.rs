use std::sync::atomic::{AtomicBool, Ordering};

use crate::ctensor::{hadamard, matvec, matvec_t, CTensor, Cplx};
use crate::error::Result;
use crate::graddiff::{CVar, Tape};

use super::{Activation, OutputActivation, PolyParams, PolySpec, Slot, Variant};

static FAULT: AtomicBool = AtomicBool::new(false);

/// Flips the sign of every shortcut term. Negative control for `verify`.
#[doc(hidden)]
pub fn set_fault_injection(on: bool) {
    FAULT.store(on, Ordering::SeqCst);
}

/// The primitive operations a recursion needs.
pub trait Backend {
    type V: Clone;

    /// `Mᵀv` for a factor slot and `Hv` for the output map.
    fn apply(&mut self, slot: Slot, v: &Self::V) -> Result<Self::V>;
    /// Adds the bias vector stored in `slot`.
    fn shift(&mut self, v: &Self::V, slot: Slot) -> Result<Self::V>;
    /// Multiplies elementwise by the vector stored in `slot`.
    fn scale(&mut self, v: &Self::V, slot: Slot) -> Result<Self::V>;
    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn neg(&mut self, a: &Self::V) -> Result<Self::V>;
    /// Brings the previous degree's output to the layout of `like`.
    fn align(&mut self, prev: &Self::V, _like: &Self::V) -> Result<Self::V> {
        Ok(prev.clone())
    }
    fn crelu(&mut self, v: &Self::V) -> Result<Self::V>;
    fn tanh(&mut self, v: &Self::V) -> Result<Self::V>;
}

fn skip_add<B: Backend>(be: &mut B, p: &B::V, prev: &B::V) -> Result<B::V> {
    if FAULT.load(Ordering::Relaxed) {
        let n = be.neg(prev)?;
        be.add(p, &n)
    } else {
        be.add(p, prev)
    }
}

fn activate<B: Backend>(be: &mut B, spec: &PolySpec, v: B::V) -> Result<B::V> {
    match spec.activation {
        Activation::None => Ok(v),
        Activation::CreluPerDegree => be.crelu(&v),
    }
}

/// Runs the degree recursion of `spec.variant` followed by the output map.
pub fn run<B: Backend>(be: &mut B, spec: &PolySpec, x: &B::V, psi: Option<&B::V>) -> Result<B::V> {
    let mut y = if spec.variant.is_ncp() {
        let e = be.apply(Slot::E(1), x)?;
        let y1 = be.scale(&e, Slot::B(1))?;
        let mut y = activate(be, spec, y1)?;
        for n in 2..=spec.n {
            let ex = be.apply(Slot::E(n), x)?;
            let l = be.shift(&ex, Slot::Rho(n))?;
            let fy = be.apply(Slot::F(n), &y)?;
            let r = be.shift(&fy, Slot::B(n))?;
            let mut p = be.hadamard(&l, &r)?;
            if spec.skip {
                let prev = be.align(&y, &p)?;
                p = skip_add(be, &p, &prev)?;
            }
            y = activate(be, spec, p)?;
        }
        y
    } else {
        let two = spec.variant == Variant::TWO_VAR_CCP;
        let bias = spec.variant.is_bias_ccp();
        let lin = |be: &mut B, n: usize| -> Result<B::V> {
            let ux = be.apply(Slot::U(n), x)?;
            match (two, psi) {
                (true, Some(p)) => {
                    let vp = be.apply(Slot::V(n), p)?;
                    be.add(&ux, &vp)
                }
                _ => Ok(ux),
            }
        };
        let y1 = lin(be, 1)?;
        let mut y = activate(be, spec, y1)?;
        for n in 2..=spec.n {
            let mut z = lin(be, n)?;
            if bias {
                z = be.shift(&z, Slot::Rho(n))?;
            }
            let prev = be.align(&y, &z)?;
            let p = be.hadamard(&z, &prev)?;
            let next = if bias { p } else { skip_add(be, &p, &prev)? };
            y = activate(be, spec, next)?;
        }
        y
    };
    let hy = be.apply(Slot::H, &y)?;
    y = be.shift(&hy, Slot::HBias)?;
    match spec.output_activation {
        OutputActivation::None => Ok(y),
        OutputActivation::TanhSplit => be.tanh(&y),
    }
}

/// Plain evaluation on a single complex vector.
pub struct DenseEval<'a> {
    params: &'a PolyParams,
}

impl<'a> DenseEval<'a> {
    pub fn new(params: &'a PolyParams) -> Self {
        Self { params }
    }
}

impl Backend for DenseEval<'_> {
    type V = CTensor;

    fn apply(&mut self, slot: Slot, v: &CTensor) -> Result<CTensor> {
        let m = self.params.get(slot);
        if slot == Slot::H {
            matvec(m, v)
        } else {
            matvec_t(m, v)
        }
    }

    fn shift(&mut self, v: &CTensor, slot: Slot) -> Result<CTensor> {
        v.add(self.params.get(slot))
    }

    fn scale(&mut self, v: &CTensor, slot: Slot) -> Result<CTensor> {
        hadamard(v, self.params.get(slot))
    }

    fn hadamard(&mut self, a: &CTensor, b: &CTensor) -> Result<CTensor> {
        hadamard(a, b)
    }

    fn add(&mut self, a: &CTensor, b: &CTensor) -> Result<CTensor> {
        a.add(b)
    }

    fn neg(&mut self, a: &CTensor) -> Result<CTensor> {
        Ok(a.map(|z| -z))
    }

    fn crelu(&mut self, v: &CTensor) -> Result<CTensor> {
        let r = |x: f64| if x > 0.0 { x } else { 0.0 };
        Ok(v.map(|z| Cplx::new(r(z.re), r(z.im))))
    }

    fn tanh(&mut self, v: &CTensor) -> Result<CTensor> {
        Ok(v.map(|z| Cplx::new(z.re.tanh(), z.im.tanh())))
    }
}

impl PolyParams<CTensor> {
    /// Records every parameter as a tape leaf; real-tagged slots get a
    /// structurally zero imaginary channel.
    pub fn to_leaves(&self, tape: &mut Tape, variant: Variant) -> PolyParams<CVar> {
        self.map(|s, p| if variant.slot_is_real(s) { tape.cleaf_real(p) } else { tape.cleaf(p) })
    }
}

/// Differentiable evaluation on a batch `[B, d]` recorded on a tape.
pub struct DenseTape<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a PolyParams<CVar>,
}

impl Backend for DenseTape<'_> {
    type V = CVar;

    fn apply(&mut self, slot: Slot, v: &CVar) -> Result<CVar> {
        let m = *self.params.get(slot);
        if slot == Slot::H {
            let ht = self.tape.ctranspose(m)?;
            self.tape.cmatmul(*v, ht)
        } else {
            self.tape.cmatmul(*v, m)
        }
    }

    fn shift(&mut self, v: &CVar, slot: Slot) -> Result<CVar> {
        let rows = self.tape.shape(v.re)[0];
        let b = self.tape.cbroadcast_rows(*self.params.get(slot), rows)?;
        self.tape.cadd(*v, b)
    }

    fn scale(&mut self, v: &CVar, slot: Slot) -> Result<CVar> {
        let rows = self.tape.shape(v.re)[0];
        let b = self.tape.cbroadcast_rows(*self.params.get(slot), rows)?;
        self.tape.cmul(*v, b)
    }

    fn hadamard(&mut self, a: &CVar, b: &CVar) -> Result<CVar> {
        self.tape.cmul(*a, *b)
    }

    fn add(&mut self, a: &CVar, b: &CVar) -> Result<CVar> {
        self.tape.cadd(*a, *b)
    }

    fn neg(&mut self, a: &CVar) -> Result<CVar> {
        Ok(self.tape.cneg(*a))
    }

    fn crelu(&mut self, v: &CVar) -> Result<CVar> {
        Ok(self.tape.ccrelu(*v))
    }

    fn tanh(&mut self, v: &CVar) -> Result<CVar> {
        Ok(self.tape.csplit_tanh(*v))
    }
}
