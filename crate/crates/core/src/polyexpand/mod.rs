//! Forward passes for the APOLLO polynomial variants.
//!
//! Every variant is evaluated by one generic recursion (`recursion::run`)
//! over a `Backend`, so the plain dense evaluator, the differentiable tape
//! evaluators and the convolutional realization all share the same
//! degree-by-degree structure.

mod compose;
mod conv;
mod params;
mod recursion;
mod serial;

pub use compose::{compose_product, ComposedModel, Stage};
pub use conv::{conv_realize, ConvPlan, ConvPoly, ConvTape};
pub use params::{PolyParams, Slot};
pub use recursion::{run, set_fault_injection, Backend, DenseEval, DenseTape};
pub use serial::{aply_bytes, read_aply, read_aply_from, write_aply, write_aply_to, AplyModel};

use serde::{Deserialize, Serialize};

use crate::ctensor::CTensor;
use crate::error::{dim_err, ApolloError, Result};

#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    CCP_NOBIAS,
    C_CCP_BIAS,
    MIX_CCP_BIAS,
    R_CCP_BIAS,
    C_NCP_BIAS,
    MIX_NCP_BIAS,
    R_NCP_BIAS,
    TWO_VAR_CCP,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::CCP_NOBIAS,
        Variant::C_CCP_BIAS,
        Variant::MIX_CCP_BIAS,
        Variant::R_CCP_BIAS,
        Variant::C_NCP_BIAS,
        Variant::MIX_NCP_BIAS,
        Variant::R_NCP_BIAS,
        Variant::TWO_VAR_CCP,
    ];

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&v| v == self).expect("variant is listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn is_ncp(self) -> bool {
        matches!(self, Variant::C_NCP_BIAS | Variant::MIX_NCP_BIAS | Variant::R_NCP_BIAS)
    }

    pub fn is_bias_ccp(self) -> bool {
        matches!(self, Variant::C_CCP_BIAS | Variant::MIX_CCP_BIAS | Variant::R_CCP_BIAS)
    }

    /// Whether the parameter in `slot` must be real for this variant.
    pub fn slot_is_real(self, slot: Slot) -> bool {
        let output = matches!(slot, Slot::H | Slot::HBias);
        match self {
            Variant::CCP_NOBIAS | Variant::C_CCP_BIAS | Variant::C_NCP_BIAS => false,
            Variant::R_CCP_BIAS | Variant::R_NCP_BIAS => true,
            Variant::MIX_CCP_BIAS | Variant::MIX_NCP_BIAS | Variant::TWO_VAR_CCP => !output,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    CreluPerDegree,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    #[default]
    None,
    TanhSplit,
}

/// Architecture of one polynomial stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolySpec {
    pub variant: Variant,
    pub n: usize,
    pub d: usize,
    /// Dimension of the second input; only used by `TWO_VAR_CCP`.
    #[serde(default)]
    pub d2: usize,
    pub k: usize,
    pub o: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_activation: OutputActivation,
    /// Shortcut `+ y_{n-1}` in the NCP recursion.
    #[serde(default)]
    pub skip: bool,
}

impl PolySpec {
    pub fn new(variant: Variant, n: usize, d: usize, k: usize, o: usize) -> Self {
        Self {
            variant,
            n,
            d,
            d2: 0,
            k,
            o,
            activation: Activation::None,
            output_activation: OutputActivation::None,
            skip: false,
        }
    }

    pub fn with_d2(mut self, d2: usize) -> Self {
        self.d2 = d2;
        self
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_output_activation(mut self, a: OutputActivation) -> Self {
        self.output_activation = a;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(ApolloError::Config("degree N must be at least 1".into()));
        }
        if self.d == 0 || self.k == 0 || self.o == 0 {
            return Err(ApolloError::Config(format!(
                "dims must be positive: d={}, k={}, o={}",
                self.d, self.k, self.o
            )));
        }
        if self.variant == Variant::TWO_VAR_CCP && self.d2 == 0 {
            return Err(ApolloError::Config("TWO_VAR_CCP needs d2 ≥ 1".into()));
        }
        if self.skip && !self.variant.is_ncp() {
            return Err(ApolloError::Config(format!("skip is only defined for NCP variants, not {}", self.variant)));
        }
        Ok(())
    }

    /// Dense shape of the parameter in `slot`.
    pub fn slot_shape(&self, slot: Slot) -> Vec<usize> {
        match slot {
            Slot::U(_) | Slot::E(_) => vec![self.d, self.k],
            Slot::V(_) => vec![self.d2, self.k],
            Slot::F(_) => vec![self.k, self.k],
            Slot::B(_) | Slot::Rho(_) => vec![self.k],
            Slot::H => vec![self.o, self.k],
            Slot::HBias => vec![self.o],
        }
    }
}

fn require(spec: &PolySpec, allowed: &[Variant], op: &str) -> Result<()> {
    if !allowed.contains(&spec.variant) {
        return Err(ApolloError::Config(format!("{op} does not accept variant {}", spec.variant)));
    }
    Ok(())
}

fn check_input(len: usize, x: &CTensor, what: &str) -> Result<()> {
    if x.order() != 1 || x.len() != len {
        return Err(dim_err!("{what} must be a vector of length {len}, got shape {:?}", x.shape()));
    }
    Ok(())
}

/// Evaluates any dense variant on a single input vector.
pub fn forward(params: &PolyParams, spec: &PolySpec, x: &CTensor, psi: Option<&CTensor>) -> Result<CTensor> {
    params.validate(spec)?;
    check_input(spec.d, x, "input x")?;
    let zero_psi;
    let psi = if spec.variant == Variant::TWO_VAR_CCP {
        match psi {
            Some(p) => {
                check_input(spec.d2, p, "input ψ")?;
                Some(p)
            }
            None => {
                zero_psi = CTensor::zeros(&[spec.d2]);
                Some(&zero_psi)
            }
        }
    } else {
        None
    };
    let mut be = DenseEval::new(params);
    run(&mut be, spec, x, psi)
}

pub fn forward_ccp(params: &PolyParams, spec: &PolySpec, x: &CTensor) -> Result<CTensor> {
    require(spec, &[Variant::CCP_NOBIAS], "forward_ccp")?;
    forward(params, spec, x, None)
}

pub fn forward_ccp_bias(params: &PolyParams, spec: &PolySpec, x: &CTensor) -> Result<CTensor> {
    require(spec, &[Variant::C_CCP_BIAS, Variant::MIX_CCP_BIAS, Variant::R_CCP_BIAS], "forward_ccp_bias")?;
    forward(params, spec, x, None)
}

pub fn forward_ncp(params: &PolyParams, spec: &PolySpec, x: &CTensor) -> Result<CTensor> {
    require(spec, &[Variant::C_NCP_BIAS, Variant::MIX_NCP_BIAS, Variant::R_NCP_BIAS], "forward_ncp")?;
    forward(params, spec, x, None)
}

pub fn forward_two_var(params: &PolyParams, spec: &PolySpec, x: &CTensor, psi: &CTensor) -> Result<CTensor> {
    require(spec, &[Variant::TWO_VAR_CCP], "forward_two_var")?;
    forward(params, spec, x, Some(psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::{Cplx, ONE, ZERO};

    fn c(re: f64, im: f64) -> Cplx {
        Cplx::new(re, im)
    }

    fn scalar_params(spec: &PolySpec, fill: impl Fn(Slot) -> f64) -> PolyParams {
        PolyParams::from_fn(spec, |slot, shape| CTensor::filled(shape, c(fill(slot), 0.0)))
    }

    #[test]
    fn ccp_scalar_example() {
        let spec = PolySpec::new(Variant::CCP_NOBIAS, 2, 1, 1, 1);
        let p = scalar_params(&spec, |s| if s == Slot::HBias { 0.0 } else { 1.0 });
        let y = forward_ccp(&p, &spec, &CTensor::vector(vec![c(2.0, 0.0)])).unwrap();
        assert_eq!(y.data(), &[c(6.0, 0.0)]);
    }

    #[test]
    fn bias_ccp_scalar_example() {
        let spec = PolySpec::new(Variant::C_CCP_BIAS, 2, 1, 1, 1);
        let p = scalar_params(&spec, |s| if s == Slot::HBias { 0.0 } else { 1.0 });
        let y = forward_ccp_bias(&p, &spec, &CTensor::vector(vec![c(2.0, 0.0)])).unwrap();
        assert_eq!(y.data(), &[c(6.0, 0.0)]);
    }

    #[test]
    fn ncp_scalar_example() {
        let spec = PolySpec::new(Variant::C_NCP_BIAS, 2, 1, 1, 1).with_skip(true);
        let p = scalar_params(&spec, |s| match s {
            Slot::HBias | Slot::Rho(_) => 0.0,
            _ => 1.0,
        });
        let y = forward_ncp(&p, &spec, &CTensor::vector(vec![ONE])).unwrap();
        assert_eq!(y.data(), &[c(3.0, 0.0)]);
    }

    #[test]
    fn two_var_scalar_example() {
        let spec = PolySpec::new(Variant::TWO_VAR_CCP, 2, 1, 1, 1).with_d2(1);
        let p = scalar_params(&spec, |s| if s == Slot::HBias { 0.0 } else { 1.0 });
        let y = forward_two_var(&p, &spec, &CTensor::vector(vec![ONE]), &CTensor::vector(vec![ONE])).unwrap();
        assert_eq!(y.data(), &[c(6.0, 0.0)]);
    }

    #[test]
    fn zero_input_returns_bias() {
        let mut rng = crate::testutil::rng(3);
        for v in Variant::ALL {
            let spec = PolySpec::new(v, 3, 3, 2, 2).with_d2(2).with_skip(v.is_ncp());
            let mut p = PolyParams::init(&spec, &mut rng).unwrap();
            p.randomize_biases(&spec, &mut rng);
            if v.is_ncp() {
                for n in 2..=3 {
                    *p.get_mut(Slot::Rho(n)) = CTensor::zeros(&[2]);
                }
            }
            let y = forward(&p, &spec, &CTensor::zeros(&[3]), None).unwrap();
            assert_eq!(&y, p.get(Slot::HBias), "{v}");
        }
    }

    #[test]
    fn ncp_first_degree_annihilator() {
        let mut rng = crate::testutil::rng(5);
        let spec = PolySpec::new(Variant::C_NCP_BIAS, 3, 2, 2, 2);
        let mut p = PolyParams::init(&spec, &mut rng).unwrap();
        p.randomize_biases(&spec, &mut rng);
        for n in 1..=3 {
            *p.get_mut(Slot::B(n)) = CTensor::zeros(&[2]);
        }
        for n in 2..=3 {
            *p.get_mut(Slot::Rho(n)) = CTensor::zeros(&[2]);
        }
        let x = CTensor::vector(vec![c(0.3, 1.0), c(-2.0, 0.5)]);
        assert_eq!(&forward_ncp(&p, &spec, &x).unwrap(), p.get(Slot::HBias));
    }

    #[test]
    fn degenerate_degree_is_affine() {
        let mut rng = crate::testutil::rng(9);
        let spec = PolySpec::new(Variant::CCP_NOBIAS, 1, 3, 2, 2);
        let mut p = PolyParams::init(&spec, &mut rng).unwrap();
        p.randomize_biases(&spec, &mut rng);
        let x = CTensor::vector(vec![c(1.0, -1.0), c(0.5, 2.0), ZERO]);
        let ux = crate::ctensor::matvec_t(p.get(Slot::U(1)), &x).unwrap();
        let expect = crate::ctensor::matvec(p.get(Slot::H), &ux).unwrap().add(p.get(Slot::HBias)).unwrap();
        assert_eq!(forward_ccp(&p, &spec, &x).unwrap(), expect);
    }

    #[test]
    fn two_var_with_zero_psi_is_bitwise_ccp() {
        let mut rng = crate::testutil::rng(11);
        let spec2 = PolySpec::new(Variant::TWO_VAR_CCP, 3, 3, 2, 2).with_d2(2);
        let mut p2 = PolyParams::init(&spec2, &mut rng).unwrap();
        p2.randomize_biases(&spec2, &mut rng);
        let spec1 = PolySpec::new(Variant::CCP_NOBIAS, 3, 3, 2, 2);
        let p1 = PolyParams::from_fn(&spec1, |slot, _| p2.get(slot).clone());
        let x = CTensor::vector(vec![c(0.7, -0.1), c(0.2, 0.4), c(-1.0, 0.3)]);
        let a = forward_two_var(&p2, &spec2, &x, &CTensor::zeros(&[2])).unwrap();
        let b = forward_ccp(&p1, &spec1, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_field_discipline() {
        let mut rng = crate::testutil::rng(2);
        for v in [Variant::MIX_CCP_BIAS, Variant::MIX_NCP_BIAS] {
            let spec = PolySpec::new(v, 3, 3, 2, 2);
            let mut p = PolyParams::init(&spec, &mut rng).unwrap();
            p.randomize_biases(&spec, &mut rng);
            *p.get_mut(Slot::H) = p.get(Slot::H).map(|z| c(z.re, 0.0));
            *p.get_mut(Slot::HBias) = p.get(Slot::HBias).map(|z| c(z.re, 0.0));
            let x = CTensor::from_real(&[3], &[0.4, -1.2, 0.9]).unwrap();
            let y = forward(&p, &spec, &x, None).unwrap();
            assert!(y.data().iter().all(|z| z.im == 0.0), "{v}");
        }
    }

    #[test]
    fn field_violation_is_a_parameter_error() {
        let mut rng = crate::testutil::rng(1);
        let spec = PolySpec::new(Variant::R_CCP_BIAS, 2, 2, 2, 2);
        let mut p = PolyParams::init(&spec, &mut rng).unwrap();
        p.get_mut(Slot::U(2)).data_mut()[0].im = 1e-3;
        let err = forward_ccp_bias(&p, &spec, &CTensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, ApolloError::Parameter(_)), "{err}");
    }

    #[test]
    fn wrong_variant_and_shapes_are_rejected() {
        let mut rng = crate::testutil::rng(1);
        let spec = PolySpec::new(Variant::C_CCP_BIAS, 2, 2, 2, 2);
        let p = PolyParams::init(&spec, &mut rng).unwrap();
        assert!(forward_ccp(&p, &spec, &CTensor::zeros(&[2])).is_err());
        assert!(matches!(
            forward_ccp_bias(&p, &spec, &CTensor::zeros(&[3])),
            Err(ApolloError::Dimension(_))
        ));
        let other = PolySpec::new(Variant::C_CCP_BIAS, 2, 3, 2, 2);
        assert!(matches!(forward(&p, &other, &CTensor::zeros(&[3]), None), Err(ApolloError::Dimension(_))));
    }

    #[test]
    fn single_degree_homogeneity() {
        let mut rng = crate::testutil::rng(8);
        let spec = PolySpec::new(Variant::CCP_NOBIAS, 3, 3, 2, 2);
        let mut p = PolyParams::init(&spec, &mut rng).unwrap();
        p.randomize_biases(&spec, &mut rng);
        for n in 2..=3 {
            *p.get_mut(Slot::U(n)) = CTensor::zeros(&[3, 2]);
        }
        let x = CTensor::vector(vec![c(0.3, 0.1), c(-0.5, 0.8), c(1.1, -0.2)]);
        let lam = c(2.5, 0.0);
        let h = p.get(Slot::HBias);
        let lhs = forward_ccp(&p, &spec, &x.scale(lam)).unwrap().sub(h).unwrap();
        let rhs = forward_ccp(&p, &spec, &x).unwrap().sub(h).unwrap().scale(lam);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
