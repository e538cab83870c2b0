//! Convolutional realization: factor multiplies become complex 2-D
//! (transposed) convolutions over `[batch, channel, freq, time]` grids.
//!
//! Channels play the role of the dense dimensions: `d` input channels,
//! `k` hidden channels, `o` output channels. Degree `n` lives at resolution
//! `base · 2^(n-1)`; lower-resolution operands are upsampled by nearest
//! neighbour before each Hadamard product.

use rand::Rng;

use crate::ctensor::CTensor;
use crate::error::{ApolloError, Result};
use crate::graddiff::{CVar, Tape};

use super::params::init_value;
use super::recursion::{run, Backend};
use super::{PolyParams, PolySpec, Slot, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub base: (usize, usize),
    /// Odd kernel size of the output conv and of the first-degree factor.
    pub kernel: usize,
    /// 1×1 kernels everywhere and no resolution change.
    pub pointwise: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    stride: usize,
    pad: usize,
    kernel: usize,
}

impl ConvPlan {
    /// Grows a `base` grid by 2 per degree so that degree `n` emits `out`.
    pub fn upsampling(out: (usize, usize), n: usize, kernel: usize) -> Result<Self> {
        if n == 0 {
            return Err(ApolloError::Config("degree N must be at least 1".into()));
        }
        if kernel % 2 == 0 {
            return Err(ApolloError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let f = 1usize.checked_shl(n as u32 - 1).filter(|f| *f <= out.0.min(out.1));
        match f {
            Some(f) if out.0 % f == 0 && out.1 % f == 0 => {
                Ok(Self { base: (out.0 / f, out.1 / f), kernel, pointwise: false })
            }
            _ => Err(ApolloError::Config(format!(
                "output grid {}×{} is not reachable by doubling over {} degrees",
                out.0, out.1, n
            ))),
        }
    }

    pub fn pointwise(shape: (usize, usize)) -> Self {
        Self { base: shape, kernel: 1, pointwise: true }
    }

    /// Spatial size of the degree-`n` output.
    pub fn resolution(&self, n: usize) -> (usize, usize) {
        if self.pointwise {
            self.base
        } else {
            let f = 1 << (n - 1);
            (self.base.0 * f, self.base.1 * f)
        }
    }

    fn geom(&self, slot: Slot) -> Geom {
        if self.pointwise {
            return Geom { stride: 1, pad: 0, kernel: 1 };
        }
        match slot {
            Slot::U(1) | Slot::E(1) | Slot::H => Geom { stride: 1, pad: self.kernel / 2, kernel: self.kernel },
            Slot::U(n) | Slot::E(n) => {
                let s = 1 << (n - 1);
                Geom { stride: s, pad: s / 2, kernel: 2 * s }
            }
            Slot::F(_) => Geom { stride: 2, pad: 1, kernel: 4 },
            _ => Geom { stride: 1, pad: 0, kernel: 1 },
        }
    }

    pub fn slot_shape(&self, spec: &PolySpec, slot: Slot) -> Vec<usize> {
        let k = self.geom(slot).kernel;
        match slot {
            Slot::U(_) | Slot::E(_) => vec![spec.d, spec.k, k, k],
            Slot::F(_) => vec![spec.k, spec.k, k, k],
            Slot::H => vec![spec.o, spec.k, k, k],
            Slot::B(_) | Slot::Rho(_) => vec![spec.k],
            Slot::HBias => vec![spec.o],
            Slot::V(_) => vec![0],
        }
    }
}

/// A polynomial stage realized with convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPoly {
    pub spec: PolySpec,
    pub plan: ConvPlan,
    pub params: PolyParams,
}

fn check_spec(spec: &PolySpec) -> Result<()> {
    spec.check()?;
    if spec.variant == Variant::TWO_VAR_CCP {
        return Err(ApolloError::Config("the two-input expansion has no convolutional realization".into()));
    }
    Ok(())
}

impl ConvPoly {
    pub fn init<R: Rng + ?Sized>(spec: &PolySpec, plan: ConvPlan, rng: &mut R) -> Result<Self> {
        check_spec(spec)?;
        let entries = Slot::layout(spec)
            .into_iter()
            .map(|s| {
                let shape = plan.slot_shape(spec, s);
                (s, init_value(s, &shape, spec.variant.slot_is_real(s), rng))
            })
            .collect();
        Ok(Self { spec: spec.clone(), plan, params: PolyParams::from_entries(entries) })
    }

    pub fn validate(&self) -> Result<()> {
        check_spec(&self.spec)?;
        if self.params.slots() != Slot::layout(&self.spec) {
            return Err(ApolloError::Parameter(format!(
                "conv parameter set does not match the {} layout",
                self.spec.variant
            )));
        }
        for (s, p) in self.params.iter() {
            let want = self.plan.slot_shape(&self.spec, s);
            if p.shape() != want.as_slice() {
                return Err(ApolloError::Dimension(format!(
                    "conv parameter {} has shape {:?}, expected {:?}",
                    s.name(),
                    p.shape(),
                    want
                )));
            }
            if self.spec.variant.slot_is_real(s) && !p.is_real() {
                return Err(ApolloError::Parameter(format!("parameter {} must be real", s.name())));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.spec.d, self.plan.base.0, self.plan.base.1]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let (h, w) = self.plan.resolution(self.spec.n);
        [self.spec.o, h, w]
    }

    /// Records the forward pass of a `[B, d, base_h, base_w]` batch.
    pub fn forward_tape(&self, tape: &mut Tape, leaves: &PolyParams<CVar>, x: CVar) -> Result<CVar> {
        let shape = tape.cshape(x);
        let want = self.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(ApolloError::Dimension(format!(
                "conv stage expects [batch, {}, {}, {}], got {:?}",
                want[0], want[1], want[2], shape
            )));
        }
        let mut be = ConvTape { tape, params: leaves, plan: &self.plan };
        run(&mut be, &self.spec, &x, None)
    }

    /// Evaluates a `[B, d, base_h, base_w]` batch.
    pub fn forward(&self, x: &CTensor) -> Result<CTensor> {
        self.validate()?;
        let mut tape = Tape::new();
        let leaves = self.params.to_leaves(&mut tape, self.spec.variant);
        let xv = tape.cconst(x);
        let y = self.forward_tape(&mut tape, &leaves, xv)?;
        Ok(tape.cvalue(y))
    }
}

/// Lifts dense parameters into the equivalent 1×1-kernel realization on a
/// grid of `spatial` pixels; each pixel is then an independent dense input.
pub fn conv_realize(params: &PolyParams, spec: &PolySpec, spatial: (usize, usize)) -> Result<ConvPoly> {
    params.validate(spec)?;
    check_spec(spec)?;
    if spatial.0 == 0 || spatial.1 == 0 {
        return Err(ApolloError::Config(format!("empty spatial grid {spatial:?}")));
    }
    let plan = ConvPlan::pointwise(spatial);
    let lifted = params.try_map(|s, p| {
        if s.is_vector() {
            return Ok(p.clone());
        }
        let shape = plan.slot_shape(spec, s);
        // dense factors are already [in, out] (or [out, in] for H)
        p.clone().reshape(&shape)
    })?;
    let cp = ConvPoly { spec: spec.clone(), plan, params: lifted };
    cp.validate()?;
    Ok(cp)
}

/// Convolutional backend over `[B, C, H, W]` complex tape values.
pub struct ConvTape<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a PolyParams<CVar>,
    pub plan: &'a ConvPlan,
}

impl Backend for ConvTape<'_> {
    type V = CVar;

    fn apply(&mut self, slot: Slot, v: &CVar) -> Result<CVar> {
        let w = *self.params.get(slot);
        let g = self.plan.geom(slot);
        match slot {
            Slot::H => self.tape.cconv2d(*v, w, g.stride, g.pad),
            Slot::U(n) | Slot::E(n) | Slot::F(n) => {
                let out = self.plan.resolution(n);
                self.tape.cconv_t2d(*v, w, g.stride, g.pad, out)
            }
            other => Err(ApolloError::Unsupported(format!("{} is not a convolution factor", other.name()))),
        }
    }

    fn shift(&mut self, v: &CVar, slot: Slot) -> Result<CVar> {
        let shape = self.tape.cshape(*v);
        let b = self.tape.cbroadcast_channels(*self.params.get(slot), &shape)?;
        self.tape.cadd(*v, b)
    }

    fn scale(&mut self, v: &CVar, slot: Slot) -> Result<CVar> {
        let shape = self.tape.cshape(*v);
        let b = self.tape.cbroadcast_channels(*self.params.get(slot), &shape)?;
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

    fn align(&mut self, prev: &CVar, like: &CVar) -> Result<CVar> {
        let ph = self.tape.shape(prev.re)[2];
        let lh = self.tape.shape(like.re)[2];
        if lh % ph != 0 {
            return Err(ApolloError::Dimension(format!("cannot upsample height {ph} to {lh}")));
        }
        self.tape.cupsample(*prev, lh / ph)
    }

    fn crelu(&mut self, v: &CVar) -> Result<CVar> {
        Ok(self.tape.ccrelu(*v))
    }

    fn tanh(&mut self, v: &CVar) -> Result<CVar> {
        Ok(self.tape.csplit_tanh(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyexpand::{forward, Activation};

    #[test]
    fn pointwise_realization_matches_dense_per_pixel() {
        let mut rng = crate::testutil::rng(31);
        for v in Variant::ALL.into_iter().filter(|v| *v != Variant::TWO_VAR_CCP) {
            let spec = PolySpec::new(v, 3, 3, 2, 2).with_skip(v.is_ncp()).with_activation(Activation::CreluPerDegree);
            let mut p = PolyParams::init(&spec, &mut rng).unwrap();
            p.randomize_biases(&spec, &mut rng);
            let cp = conv_realize(&p, &spec, (2, 3)).unwrap();
            let x = crate::testutil::ctensor(&mut rng, &[2, 3, 2, 3]);
            let y = cp.forward(&x).unwrap();
            assert_eq!(y.shape(), &[2, 2, 2, 3]);
            for b in 0..2 {
                for i in 0..2 {
                    for j in 0..3 {
                        let xv = CTensor::vector((0..3).map(|c| x.at(&[b, c, i, j])).collect());
                        let want = forward(&p, &spec, &xv, None).unwrap();
                        for o in 0..2 {
                            assert!((y.at(&[b, o, i, j]) - want.data()[o]).norm() < 1e-10, "{v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn audio_grid_shapes() {
        let mut rng = crate::testutil::rng(2);
        let spec = PolySpec::new(Variant::C_NCP_BIAS, 6, 1, 1, 1).with_skip(true);
        let plan = ConvPlan::upsampling((128, 128), 6, 3).unwrap();
        assert_eq!(plan.base, (4, 4));
        let cp = ConvPoly::init(&spec, plan, &mut rng).unwrap();
        let x = crate::testutil::ctensor(&mut rng, &[1, 1, 4, 4]);
        assert_eq!(cp.forward(&x).unwrap().shape(), &[1, 1, 128, 128]);

        let plan = ConvPlan::upsampling((256, 128), 6, 3).unwrap();
        assert_eq!(plan.base, (8, 4));
        let cp = ConvPoly::init(&spec, plan, &mut rng).unwrap();
        let x = crate::testutil::ctensor(&mut rng, &[1, 1, 8, 4]);
        assert_eq!(cp.forward(&x).unwrap().shape(), &[1, 1, 256, 128]);
    }

    #[test]
    fn incompatible_chains_are_config_errors() {
        assert!(matches!(ConvPlan::upsampling((12, 12), 4, 3), Err(ApolloError::Config(_))));
        assert!(matches!(ConvPlan::upsampling((4, 4), 4, 3), Err(ApolloError::Config(_))));
        let spec = PolySpec::new(Variant::TWO_VAR_CCP, 2, 1, 1, 1).with_d2(1);
        let plan = ConvPlan::upsampling((8, 8), 2, 3).unwrap();
        let mut rng = crate::testutil::rng(0);
        assert!(matches!(ConvPoly::init(&spec, plan, &mut rng), Err(ApolloError::Config(_))));
    }

    #[test]
    fn upsampling_ccp_runs_and_stays_finite() {
        let mut rng = crate::testutil::rng(6);
        let spec = PolySpec::new(Variant::MIX_CCP_BIAS, 3, 2, 3, 1);
        let plan = ConvPlan::upsampling((16, 8), 3, 3).unwrap();
        let cp = ConvPoly::init(&spec, plan, &mut rng).unwrap();
        let x = crate::testutil::ctensor(&mut rng, &[2, 2, 4, 2]);
        let y = cp.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 16, 8]);
        assert!(y.is_finite() && y.max_abs() > 0.0);
    }
}
