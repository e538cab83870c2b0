//! Reverse-mode differentiation of real losses with respect to complex
//! parameters, treating real and imaginary parts as independent
//! coordinates, plus central finite-difference validation.

mod complex;
mod tape;

pub use complex::{cscalar, CVar};
pub use tape::{ConvGeom, Tape, Tensor, Var};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ctensor::{CTensor, Cplx};
use crate::error::{ApolloError, Result};
use crate::polyexpand::{run, DenseTape, PolyParams, PolySpec, Variant};

/// One gradient per parameter, same shape and field as the parameter.
pub type GradSet = PolyParams<CTensor>;

/// Gradients of the scalar `loss` with respect to every parameter leaf.
pub fn backward(tape: &mut Tape, leaves: &PolyParams<CVar>, loss: Var) -> Result<GradSet> {
    let flat: Vec<CVar> = leaves.iter().map(|(_, v)| *v).collect();
    let gs = tape.cgrad(loss, &flat)?;
    let mut it = gs.into_iter();
    Ok(leaves.map(|_, _| it.next().expect("one gradient per leaf")))
}

/// Σ |out − target|² as a tape scalar.
pub fn squared_error(tape: &mut Tape, out: CVar, target: &CTensor) -> Result<Var> {
    let t = tape.cconst(target);
    let diff = tape.csub(out, t)?;
    tape.cnorm_sqr(diff)
}

/// Squared-error loss of a dense model on a batch `[B, d]` (and `[B, d2]`
/// for the two-input form).
pub fn dense_loss<'a>(
    spec: &'a PolySpec,
    x: &'a CTensor,
    psi: Option<&'a CTensor>,
    target: &'a CTensor,
) -> impl Fn(&mut Tape, &PolyParams<CVar>) -> Result<Var> + 'a {
    move |tape, leaves| {
        let xv = tape.cconst(x);
        let pv = psi.map(|p| tape.cconst(p));
        let mut be = DenseTape { tape, params: leaves };
        let out = run(&mut be, spec, &xv, pv.as_ref())?;
        squared_error(tape, out, target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Evaluates `loss` at `params` without differentiating.
pub fn eval_loss<F>(params: &PolyParams, variant: Variant, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &PolyParams<CVar>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = params.to_leaves(&mut tape, variant);
    let l = loss(&mut tape, &leaves)?;
    Ok(tape.scalar_value(l))
}

/// Compares the tape gradient with central differences on at least
/// `min_coords` randomly chosen real coordinates (all of them if fewer).
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` with
/// `floor = 1e-3 · max |a|` over all coordinates, so coordinates whose
/// gradient is negligible are judged on an absolute scale.
pub fn fd_check<F, R>(
    params: &PolyParams,
    variant: Variant,
    loss: F,
    eps: f64,
    min_coords: usize,
    rng: &mut R,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &PolyParams<CVar>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let leaves = params.to_leaves(&mut tape, variant);
    let l = loss(&mut tape, &leaves)?;
    let kink = tape.min_kink_distance();
    if kink < 1e-2 {
        return Err(ApolloError::Input(format!(
            "evaluation point is {kink:.3e} from an activation kink; finite differences are unreliable there"
        )));
    }
    let grads = backward(&mut tape, &leaves, l)?;

    // (slot position, entry, imaginary channel)
    let mut coords = Vec::new();
    for (pos, (slot, p)) in params.iter().enumerate() {
        for i in 0..p.len() {
            coords.push((pos, i, false));
            if !variant.slot_is_real(slot) {
                coords.push((pos, i, true));
            }
        }
    }
    let chosen: Vec<usize> = if coords.len() <= min_coords {
        (0..coords.len()).collect()
    } else {
        sample(rng, coords.len(), min_coords).into_vec()
    };
    let slots = params.slots();
    let max_grad = grads.iter().flat_map(|(_, g)| g.data().iter().map(|z| z.re.abs().max(z.im.abs()))).fold(0.0, f64::max);
    let floor = (1e-3 * max_grad).max(1e-12);
    let mut worst = 0.0f64;
    for &c in &chosen {
        let (pos, i, imag) = coords[c];
        let slot = slots[pos];
        let bump = |delta: f64| {
            let mut p = params.clone();
            let z = &mut p.get_mut(slot).data_mut()[i];
            if imag {
                z.im += delta;
            } else {
                z.re += delta;
            }
            eval_loss(&p, variant, &loss)
        };
        let numeric = (bump(eps)? - bump(-eps)?) / (2.0 * eps);
        let g: Cplx = grads.get(slot).data()[i];
        let analytic = if imag { g.im } else { g.re };
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(FdReport { max_rel_err: worst, coords: chosen.len() })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Cplx::new(re, im)
        })
        .collect();
    CTensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Gradient check of a random degree-`n` dense model (d = 3, k = 3, o = 2,
/// batch of 2) with randomized biases under a squared-error loss.
pub fn random_gradcheck<R: Rng + ?Sized>(variant: Variant, n: usize, eps: f64, coords: usize, rng: &mut R) -> Result<FdReport> {
    let (d, k, o, b) = (3, 3, 2, 2);
    let mut spec = PolySpec::new(variant, n, d, k, o).with_skip(variant.is_ncp());
    if variant == Variant::TWO_VAR_CCP {
        spec = spec.with_d2(2);
    }
    let mut p = PolyParams::init(&spec, rng)?;
    p.randomize_biases(&spec, rng);
    let x = gaussian(rng, &[b, d]);
    let psi = gaussian(rng, &[b, 2]);
    let target = gaussian(rng, &[b, o]);
    let psi = (variant == Variant::TWO_VAR_CCP).then_some(&psi);
    fd_check(&p, variant, dense_loss(&spec, &x, psi, &target), eps, coords, rng)
}
