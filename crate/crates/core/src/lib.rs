//! Complex-valued polynomial networks (APOLLO).
//!
//! * [`ctensor`]: dense complex tensors and multilinear products
//! * [`polyexpand`]: every polynomial variant as a degree recursion
//! * [`oracle`]: brute-force expansions used to certify the recursions
//! * [`graddiff`]: reverse-mode differentiation and finite-difference checks
//! * [`tfrep`]: STFT pipeline, preprocessing, mel features, WAV I/O
//! * [`ganlab`]: desk-scale WGAN-GP audio generation and NDB/JSD metrics

pub mod ctensor;
pub mod error;
pub mod ganlab;
pub mod graddiff;
pub mod oracle;
pub mod polyexpand;
pub mod tfrep;
pub mod util;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use ctensor::{CTensor, Cplx, RTensor};
pub use error::{ApolloError, Result};
