use rand::Rng;

use crate::ctensor::CTensor;
use crate::error::{ApolloError, Result};
use crate::graddiff::{CVar, Tape};
use crate::polyexpand::{
    compose_product, run, Activation, ComposedModel, ConvPlan, ConvPoly, DenseTape, OutputActivation, PolyParams,
    PolySpec, Stage, Variant,
};

use super::ArchConfig;

/// Dense polynomial head on the latent followed by a convolutional
/// polynomial tail that grows the grid to full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub head_spec: PolySpec,
    pub head: PolyParams,
    pub tail: ConvPoly,
}

pub struct GenLeaves {
    pub head: PolyParams<CVar>,
    pub tail: PolyParams<CVar>,
}

impl Generator {
    /// `n_classes = Some(_)` builds the conditional two-input head.
    pub fn init<R: Rng + ?Sized>(
        arch: &ArchConfig,
        latent_dim: usize,
        n_classes: Option<usize>,
        grid: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let plan = ConvPlan::upsampling(grid, arch.tail_degree, arch.tail_kernel)?;
        let head_out = arch.tail_in_channels * plan.base.0 * plan.base.1;
        let act = if arch.activation { Activation::CreluPerDegree } else { Activation::None };
        let head_spec = match n_classes {
            None => PolySpec::new(Variant::R_NCP_BIAS, arch.head_degree, latent_dim, arch.head_hidden, head_out)
                .with_skip(true),
            Some(c) => PolySpec::new(Variant::TWO_VAR_CCP, arch.head_degree, latent_dim, arch.head_hidden, head_out)
                .with_d2(c),
        }
        .with_activation(act);
        let head = PolyParams::init(&head_spec, rng)?;
        let tail_spec = PolySpec::new(Variant::C_NCP_BIAS, arch.tail_degree, arch.tail_in_channels, arch.tail_channels, 1)
            .with_skip(true)
            .with_activation(act)
            .with_output_activation(OutputActivation::TanhSplit);
        let tail = ConvPoly::init(&tail_spec, plan, rng)?;
        Ok(Self { head_spec, head, tail })
    }

    pub fn conditional(&self) -> bool {
        self.head_spec.variant == Variant::TWO_VAR_CCP
    }

    pub fn latent_dim(&self) -> usize {
        self.head_spec.d
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let [_, h, w] = self.tail.output_shape();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate(&self.head_spec)?;
        self.tail.validate()?;
        let [c, h, w] = self.tail.input_shape();
        if self.head_spec.o != c * h * w {
            return Err(ApolloError::Dimension(format!(
                "head emits {} values, tail expects {c}×{h}×{w}",
                self.head_spec.o
            )));
        }
        Ok(())
    }

    pub fn leaves(&self, tape: &mut Tape) -> GenLeaves {
        GenLeaves {
            head: self.head.to_leaves(tape, self.head_spec.variant),
            tail: self.tail.params.to_leaves(tape, self.tail.spec.variant),
        }
    }

    /// `z: [B, latent]`, `labels: [B, classes]` → `[B, 1, H, W]`.
    pub fn forward_tape(&self, tape: &mut Tape, leaves: &GenLeaves, z: CVar, labels: Option<CVar>) -> Result<CVar> {
        if self.conditional() != labels.is_some() {
            return Err(ApolloError::Input(if self.conditional() {
                "conditional generator needs labels".into()
            } else {
                "unconditional generator takes no labels".into()
            }));
        }
        let b = tape.cshape(z)[0];
        let mut be = DenseTape { tape, params: &leaves.head };
        let h = run(&mut be, &self.head_spec, &z, labels.as_ref())?;
        let [c, hh, ww] = self.tail.input_shape();
        let h4 = tape.creshape(h, &[b, c, hh, ww])?;
        self.tail.forward_tape(tape, &leaves.tail, h4)
    }

    pub fn forward(&self, z: &CTensor, labels: Option<&CTensor>) -> Result<CTensor> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let zv = tape.cconst(z);
        let lv = labels.map(|l| tape.cconst(l));
        let y = self.forward_tape(&mut tape, &leaves, zv, lv)?;
        Ok(tape.cvalue(y))
    }

    /// The unconditional generator as a product of polynomial stages.
    pub fn to_composed(&self) -> Result<ComposedModel> {
        if self.conditional() {
            return Err(ApolloError::Unsupported("the two-input head is not a single-input stage".into()));
        }
        compose_product(vec![
            Stage::Dense { params: self.head.clone(), spec: self.head_spec.clone() },
            Stage::Conv(self.tail.clone()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_composition_agree() {
        let mut rng = crate::testutil::rng(1);
        let arch = ArchConfig::default();
        let g = Generator::init(&arch, 8, None, (32, 32), &mut rng).unwrap();
        g.validate().unwrap();
        let z = crate::testutil::ctensor(&mut rng, &[2, 8]);
        let y = g.forward(&z, None).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.data().iter().all(|v| v.re.abs() < 1.0 && v.im.abs() < 1.0));
        let m = g.to_composed().unwrap();
        let z0 = CTensor::vector(z.data()[..8].to_vec());
        let y0 = m.forward(&z0).unwrap();
        assert!(y0.data().iter().zip(&y.data()[..1024]).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn conditional_needs_labels() {
        let mut rng = crate::testutil::rng(2);
        let g = Generator::init(&ArchConfig::default(), 8, Some(4), (32, 32), &mut rng).unwrap();
        let z = crate::testutil::ctensor(&mut rng, &[1, 8]);
        assert!(matches!(g.forward(&z, None), Err(ApolloError::Input(_))));
        let mut onehot = CTensor::zeros(&[1, 4]);
        onehot.set(&[0, 2], crate::ctensor::ONE);
        assert_eq!(g.forward(&z, Some(&onehot)).unwrap().shape(), &[1, 1, 32, 32]);
    }
}
