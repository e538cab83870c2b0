use crate::ctensor::CTensor;
use crate::error::{ApolloError, Result};

use super::{forward, ConvPoly, PolyParams, PolySpec};

/// One stage of a product of polynomials. Stages exchange flat vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Dense { params: PolyParams, spec: PolySpec },
    Conv(ConvPoly),
}

impl Stage {
    pub fn in_dim(&self) -> usize {
        match self {
            Stage::Dense { spec, .. } => spec.d,
            Stage::Conv(c) => c.input_shape().iter().product(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Stage::Dense { spec, .. } => spec.o,
            Stage::Conv(c) => c.output_shape().iter().product(),
        }
    }

    pub fn degree(&self) -> usize {
        match self {
            Stage::Dense { spec, .. } => spec.n,
            Stage::Conv(c) => c.spec.n,
        }
    }

    pub fn forward(&self, x: &CTensor) -> Result<CTensor> {
        match self {
            Stage::Dense { params, spec } => forward(params, spec, x, None),
            Stage::Conv(c) => {
                let [ch, h, w] = c.input_shape();
                let y = c.forward(&x.clone().reshape(&[1, ch, h, w])?)?;
                let n = y.len();
                y.reshape(&[n])
            }
        }
    }
}

/// Sequential composition of polynomial stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedModel {
    stages: Vec<Stage>,
}

impl ComposedModel {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.stages[self.stages.len() - 1].out_dim()
    }

    /// Total degree with activations off.
    pub fn degree(&self) -> usize {
        self.stages.iter().map(Stage::degree).product()
    }

    pub fn forward(&self, x: &CTensor) -> Result<CTensor> {
        let mut v = x.clone();
        for s in &self.stages {
            v = s.forward(&v)?;
        }
        Ok(v)
    }
}

/// Chains stages, checking that each output feeds the next input.
pub fn compose_product(chain: Vec<Stage>) -> Result<ComposedModel> {
    if chain.is_empty() {
        return Err(ApolloError::Config("a composition needs at least one stage".into()));
    }
    for (i, pair) in chain.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(ApolloError::Config(format!(
                "stage {} emits {} values but stage {} expects {}",
                i,
                pair[0].out_dim(),
                i + 1,
                pair[1].in_dim()
            )));
        }
    }
    Ok(ComposedModel { stages: chain })
}
