use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ctensor::{CTensor, Cplx};
use crate::error::{dim_err, ApolloError, Result};

use super::{PolySpec, Variant};

/// A named parameter position. Degrees are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// CCP factor `U_n`, or `U_{n,I}` for the two-input form.
    U(usize),
    /// Second-input factor `U_{n,II}`.
    V(usize),
    E(usize),
    F(usize),
    B(usize),
    Rho(usize),
    H,
    HBias,
}

impl Slot {
    /// Slots of a variant in their fixed serialization order.
    pub fn layout(spec: &PolySpec) -> Vec<Slot> {
        let n = spec.n;
        let mut out = Vec::new();
        match spec.variant {
            Variant::CCP_NOBIAS => {
                out.extend((1..=n).map(Slot::U));
                out.extend([Slot::H, Slot::HBias]);
            }
            Variant::C_CCP_BIAS | Variant::MIX_CCP_BIAS | Variant::R_CCP_BIAS => {
                out.extend((1..=n).map(Slot::U));
                out.extend([Slot::H, Slot::HBias]);
                out.extend((2..=n).map(Slot::Rho));
            }
            Variant::C_NCP_BIAS | Variant::MIX_NCP_BIAS | Variant::R_NCP_BIAS => {
                out.extend((1..=n).map(Slot::E));
                out.extend((2..=n).map(Slot::F));
                out.extend((1..=n).map(Slot::B));
                out.extend((2..=n).map(Slot::Rho));
                out.extend([Slot::H, Slot::HBias]);
            }
            Variant::TWO_VAR_CCP => {
                out.extend((1..=n).map(Slot::U));
                out.extend((1..=n).map(Slot::V));
                out.extend([Slot::H, Slot::HBias]);
            }
        }
        out
    }

    pub fn name(self) -> String {
        match self {
            Slot::U(n) => format!("U{n}"),
            Slot::V(n) => format!("V{n}"),
            Slot::E(n) => format!("E{n}"),
            Slot::F(n) => format!("F{n}"),
            Slot::B(n) => format!("b{n}"),
            Slot::Rho(n) => format!("rho{n}"),
            Slot::H => "H".into(),
            Slot::HBias => "h".into(),
        }
    }

    pub fn is_vector(self) -> bool {
        matches!(self, Slot::B(_) | Slot::Rho(_) | Slot::HBias)
    }
}

/// Parameters of one polynomial stage, keyed by slot in layout order.
///
/// The payload type is generic so the same container holds values,
/// gradients and tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyParams<P = CTensor> {
    entries: Vec<(Slot, P)>,
}

impl<P> PolyParams<P> {
    pub fn from_entries(entries: Vec<(Slot, P)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, slot: Slot) -> &P {
        self.try_get(slot).unwrap_or_else(|| panic!("parameter {} is not part of this model", slot.name()))
    }

    pub fn try_get(&self, slot: Slot) -> Option<&P> {
        self.entries.iter().find(|(s, _)| *s == slot).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut P {
        self.entries
            .iter_mut()
            .find(|(s, _)| *s == slot)
            .map(|(_, p)| p)
            .unwrap_or_else(|| panic!("parameter {} is not part of this model", slot.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Slot, &P)> {
        self.entries.iter().map(|(s, p)| (*s, p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Slot, &mut P)> {
        self.entries.iter_mut().map(|(s, p)| (*s, p))
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn map<Q>(&self, mut f: impl FnMut(Slot, &P) -> Q) -> PolyParams<Q> {
        PolyParams { entries: self.entries.iter().map(|(s, p)| (*s, f(*s, p))).collect() }
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(Slot, &P) -> Result<Q>) -> Result<PolyParams<Q>> {
        let entries = self.entries.iter().map(|(s, p)| Ok((*s, f(*s, p)?))).collect::<Result<_>>()?;
        Ok(PolyParams { entries })
    }
}

fn sigma2(shape: &[usize]) -> f64 {
    match shape {
        [a, b] => 2.0 / (a + b) as f64,
        // conv kernels [c_a, c_b, kh, kw]
        [a, b, kh, kw] => 2.0 / ((a + b) * kh * kw) as f64,
        _ => 1.0,
    }
}

/// Draws a factor with variance-preserving scale; complex entries split the
/// variance evenly between real and imaginary parts.
pub(crate) fn draw_factor<R: Rng + ?Sized>(shape: &[usize], real: bool, rng: &mut R) -> CTensor {
    let s2 = sigma2(shape);
    let n: usize = shape.iter().product();
    let data = if real {
        let d = Normal::new(0.0, s2.sqrt()).expect("positive variance");
        (0..n).map(|_| Cplx::new(d.sample(rng), 0.0)).collect()
    } else {
        let d = Normal::new(0.0, (s2 / 2.0).sqrt()).expect("positive variance");
        (0..n).map(|_| Cplx::new(d.sample(rng), d.sample(rng))).collect()
    };
    CTensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn init_value<R: Rng + ?Sized>(slot: Slot, shape: &[usize], real: bool, rng: &mut R) -> CTensor {
    match slot {
        Slot::B(1) => CTensor::ones(shape),
        Slot::B(_) | Slot::Rho(_) | Slot::HBias => CTensor::zeros(shape),
        _ => draw_factor(shape, real, rng),
    }
}

impl PolyParams<CTensor> {
    pub fn from_fn(spec: &PolySpec, mut f: impl FnMut(Slot, &[usize]) -> CTensor) -> Self {
        let entries = Slot::layout(spec)
            .into_iter()
            .map(|s| {
                let shape = spec.slot_shape(s);
                (s, f(s, &shape))
            })
            .collect();
        Self { entries }
    }

    /// Fresh dense parameters: Gaussian factors, zero biases, `b₁ = 1`.
    pub fn init<R: Rng + ?Sized>(spec: &PolySpec, rng: &mut R) -> Result<Self> {
        spec.check()?;
        Ok(Self::from_fn(spec, |s, shape| init_value(s, shape, spec.variant.slot_is_real(s), rng)))
    }

    /// Replaces every bias-type parameter (ρ, b, h) with random values of the
    /// right field. Useful to exercise the bias paths, which start at zero.
    pub fn randomize_biases<R: Rng + ?Sized>(&mut self, spec: &PolySpec, rng: &mut R) {
        let d = Normal::new(0.0, 0.5).expect("positive variance");
        for (s, p) in self.iter_mut() {
            if s.is_vector() {
                let real = spec.variant.slot_is_real(s);
                for z in p.data_mut() {
                    *z = Cplx::new(d.sample(rng), if real { 0.0 } else { d.sample(rng) });
                }
            }
        }
    }

    /// Parameters with small Gaussian-integer entries, so every product and
    /// sum in a forward pass at tiny sizes is exact in f64.
    pub fn gaussian_integer<R: Rng + ?Sized>(spec: &PolySpec, rng: &mut R) -> Self {
        Self::from_fn(spec, |s, shape| {
            let real = spec.variant.slot_is_real(s);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let re = rng.random_range(-2i32..=2) as f64;
                    let im = if real { 0.0 } else { rng.random_range(-2i32..=2) as f64 };
                    Cplx::new(re, im)
                })
                .collect();
            CTensor::new(shape.to_vec(), data).expect("shape and data agree")
        })
    }

    /// Checks slot layout, dense shapes and field tags against `spec`.
    pub fn validate(&self, spec: &PolySpec) -> Result<()> {
        spec.check()?;
        let layout = Slot::layout(spec);
        if layout != self.slots() {
            return Err(ApolloError::Parameter(format!(
                "parameter set does not match the {} layout at N={}",
                spec.variant, spec.n
            )));
        }
        for (s, p) in self.iter() {
            let want = spec.slot_shape(s);
            if p.shape() != want.as_slice() {
                return Err(dim_err!("parameter {} has shape {:?}, expected {:?}", s.name(), p.shape(), want));
            }
            if spec.variant.slot_is_real(s) && !p.is_real() {
                return Err(ApolloError::Parameter(format!(
                    "parameter {} must be real for {} but has nonzero imaginary parts",
                    s.name(),
                    spec.variant
                )));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.iter().map(|(_, p)| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_follow_the_parameter_table() {
        let names = |v: Variant| {
            Slot::layout(&PolySpec::new(v, 3, 2, 2, 2).with_d2(1))
                .into_iter()
                .map(Slot::name)
                .collect::<Vec<_>>()
                .join(",")
        };
        assert_eq!(names(Variant::CCP_NOBIAS), "U1,U2,U3,H,h");
        assert_eq!(names(Variant::MIX_CCP_BIAS), "U1,U2,U3,H,h,rho2,rho3");
        assert_eq!(names(Variant::R_NCP_BIAS), "E1,E2,E3,F2,F3,b1,b2,b3,rho2,rho3,H,h");
        assert_eq!(names(Variant::TWO_VAR_CCP), "U1,U2,U3,V1,V2,V3,H,h");
    }

    #[test]
    fn init_respects_fields_and_defaults() {
        let mut rng = crate::testutil::rng(0);
        for v in Variant::ALL {
            let spec = PolySpec::new(v, 3, 4, 3, 2).with_d2(2);
            let p = PolyParams::init(&spec, &mut rng).unwrap();
            p.validate(&spec).unwrap();
            for (s, t) in p.iter() {
                match s {
                    Slot::B(1) => assert_eq!(t, &CTensor::ones(&[3])),
                    Slot::B(_) | Slot::Rho(_) | Slot::HBias => assert!(t.max_abs() == 0.0),
                    _ => assert!(t.max_abs() > 0.0),
                }
                if v.slot_is_real(s) {
                    assert!(t.is_real());
                }
            }
        }
    }

    #[test]
    fn init_variance_is_variance_preserving() {
        let mut rng = crate::testutil::rng(4);
        let spec = PolySpec::new(Variant::C_CCP_BIAS, 1, 60, 40, 1);
        let p = PolyParams::init(&spec, &mut rng).unwrap();
        let u = p.get(Slot::U(1));
        let var = u.norm_sqr() / u.len() as f64;
        assert!((var - 2.0 / 100.0).abs() < 0.003, "{var}");
        let spec = PolySpec::new(Variant::R_CCP_BIAS, 1, 60, 40, 1);
        let p = PolyParams::init(&spec, &mut rng).unwrap();
        let u = p.get(Slot::U(1));
        let var = u.norm_sqr() / u.len() as f64;
        assert!((var - 2.0 / 100.0).abs() < 0.003, "{var}");
    }
}
