//! Brute-force evaluation of the polynomial expansions.
//!
//! The weight tensors of every degree are materialized from the coupled
//! factorizations and contracted with the input one mode at a time, which
//! shares no code path with the recursions in [`crate::polyexpand`].

use crate::ctensor::{
    fold1, hadamard, khatri_rao, khatri_rao_all, matmul, matvec, matvec_t, mode_m_product, CTensor, Cplx, ONE,
};
use crate::error::{ApolloError, Result};
use crate::polyexpand::{Activation, OutputActivation, PolyParams, PolySpec, Slot, Variant};

const MAX_ENTRIES: usize = 1_000_000;

/// Materialized weight tensors. `w[n-1][γ-1]` holds `W^[n,γ]`, an order
/// `n+1` tensor whose modes `2..=γ` take the first input and modes
/// `γ+1..=n+1` the second. Single-input expansions store only `γ = n+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterializedPoly {
    pub w: Vec<Vec<CTensor>>,
    pub bias: CTensor,
    pub two_input: bool,
}

impl MaterializedPoly {
    pub fn degree(&self) -> usize {
        self.w.len()
    }

    /// Single-input `W^[n]`.
    pub fn tensor(&self, n: usize) -> &CTensor {
        self.w[n - 1].last().expect("every degree has a tensor")
    }
}

fn guard(shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n > MAX_ENTRIES {
        return Err(ApolloError::Capacity(format!(
            "tensor of shape {shape:?} has {n} entries, above the {MAX_ENTRIES} limit"
        )));
    }
    Ok(())
}

fn require_plain(spec: &PolySpec) -> Result<()> {
    if spec.activation != Activation::None || spec.output_activation != OutputActivation::None {
        return Err(ApolloError::Unsupported("expansions exist only with activations off".into()));
    }
    Ok(())
}

fn subsets(from: usize, to: usize) -> Vec<Vec<usize>> {
    let items: Vec<usize> = (from..=to).collect();
    (0..1usize << items.len())
        .map(|mask| items.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &m)| m).collect())
        .collect()
}

/// `H (F_last ⊙ … ⊙ F_first)ᵀ` folded into `o × rows(F_first) × …`.
fn ledger_term(h: &CTensor, factors_first_to_last: &[&CTensor]) -> Result<CTensor> {
    let mut shape = vec![h.rows()];
    shape.extend(factors_first_to_last.iter().map(|f| f.rows()));
    guard(&shape)?;
    let rev: Vec<&CTensor> = factors_first_to_last.iter().rev().copied().collect();
    let kr = khatri_rao_all(&rev)?;
    fold1(&matmul(h, &kr.transpose()?)?, &shape)
}

/// Materializes a CCP-family model. For `CCP_NOBIAS` each degree is the sum
/// of the factorization terms `H(U_{s_k} ⊙ … ⊙ U_{s_1} ⊙ U₁)ᵀ` over the
/// degree subsets; bias variants pad the unused degrees with identity
/// modes that are then contracted with the matching `ρ`.
pub fn materialize_ccp(params: &PolyParams, spec: &PolySpec) -> Result<MaterializedPoly> {
    params.validate(spec)?;
    require_plain(spec)?;
    let bias_variant = spec.variant.is_bias_ccp();
    if spec.variant != Variant::CCP_NOBIAS && !bias_variant {
        return Err(ApolloError::Unsupported(format!("materialize_ccp does not cover {}", spec.variant)));
    }
    if spec.n > 4 {
        return Err(ApolloError::Capacity(format!("materialization supports N ≤ 4, got {}", spec.n)));
    }
    let h = params.get(Slot::H);
    let u1 = params.get(Slot::U(1));
    let ident = identity(spec.k);
    let mut w = Vec::new();
    for n in 1..=spec.n {
        let mut shape = vec![spec.o];
        shape.extend(std::iter::repeat_n(spec.d, n));
        guard(&shape)?;
        let mut acc = CTensor::zeros(&shape);
        for s in subsets(2, spec.n).into_iter().filter(|s| s.len() == n - 1) {
            let mut factors: Vec<&CTensor> = vec![u1];
            factors.extend(s.iter().map(|&m| params.get(Slot::U(m))));
            let term = if bias_variant {
                let rest: Vec<usize> = (2..=spec.n).filter(|m| !s.contains(m)).collect();
                factors.extend(std::iter::repeat_n(&ident, rest.len()));
                let mut t = ledger_term(h, &factors)?;
                // contract the padded modes, last first
                for m in rest.iter().rev() {
                    let mode = t.order();
                    t = mode_m_product(&t, params.get(Slot::Rho(*m)), mode)?;
                }
                t
            } else {
                ledger_term(h, &factors)?
            };
            acc = acc.add(&term)?;
        }
        w.push(vec![acc]);
    }
    Ok(MaterializedPoly { w, bias: params.get(Slot::HBias).clone(), two_input: false })
}

fn identity(k: usize) -> CTensor {
    let mut t = CTensor::zeros(&[k, k]);
    for i in 0..k {
        t.set(&[i, i], ONE);
    }
    t
}

/// Materializes the two-input expansion into the `W^[n,γ]` family,
/// including the all-`ψ` (γ = 1) and all-`x` (γ = n+1) boundary tensors.
pub fn materialize_two_var(params: &PolyParams, spec: &PolySpec) -> Result<MaterializedPoly> {
    params.validate(spec)?;
    require_plain(spec)?;
    if spec.variant != Variant::TWO_VAR_CCP {
        return Err(ApolloError::Unsupported(format!("materialize_two_var does not cover {}", spec.variant)));
    }
    if spec.n > 4 {
        return Err(ApolloError::Capacity(format!("materialization supports N ≤ 4, got {}", spec.n)));
    }
    let h = params.get(Slot::H);
    let mut w = Vec::new();
    for n in 1..=spec.n {
        let mut per_gamma = Vec::new();
        for gamma in 1..=n + 1 {
            let nx = gamma - 1;
            let mut shape = vec![spec.o];
            shape.extend(std::iter::repeat_n(spec.d, nx));
            shape.extend(std::iter::repeat_n(spec.d2, n - nx));
            guard(&shape)?;
            let mut acc = CTensor::zeros(&shape);
            for s in subsets(2, spec.n).into_iter().filter(|s| s.len() == n - 1) {
                let degrees: Vec<usize> = std::iter::once(1).chain(s).collect();
                // choose which of the n factors take x
                for mask in 0..1usize << n {
                    if mask.count_ones() as usize != nx {
                        continue;
                    }
                    let mut factors: Vec<&CTensor> = Vec::new();
                    for (i, &m) in degrees.iter().enumerate() {
                        if mask >> i & 1 == 1 {
                            factors.push(params.get(Slot::U(m)));
                        }
                    }
                    for (i, &m) in degrees.iter().enumerate() {
                        if mask >> i & 1 == 0 {
                            factors.push(params.get(Slot::V(m)));
                        }
                    }
                    acc = acc.add(&ledger_term(h, &factors)?)?;
                }
            }
            per_gamma.push(acc);
        }
        w.push(per_gamma);
    }
    Ok(MaterializedPoly { w, bias: params.get(Slot::HBias).clone(), two_input: true })
}

/// `Σ_n W^[n] ×₂ x ×₃ x ⋯ + bias`, or the two-input sum over `γ`.
pub fn eval_explicit(mp: &MaterializedPoly, x: &CTensor, psi: Option<&CTensor>) -> Result<CTensor> {
    if mp.two_input && psi.is_none() {
        return Err(ApolloError::Dimension("two-input expansion needs ψ".into()));
    }
    let mut acc: Option<CTensor> = None;
    for (n_idx, per_gamma) in mp.w.iter().enumerate() {
        let n = n_idx + 1;
        for (g_idx, t) in per_gamma.iter().enumerate() {
            let nx = if mp.two_input { g_idx } else { n };
            let mut v = t.clone();
            for j in 0..n {
                let input = if j < nx { x } else { psi.expect("checked above") };
                v = mode_m_product(&v, input, 2)?;
            }
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(&v)?,
            });
        }
    }
    match acc {
        Some(a) => a.add(&mp.bias),
        None => Ok(mp.bias.clone()),
    }
}

/// Bias-CCP evaluated as the explicit sum over all `2^(N−1)` ways of picking
/// `U_nᵀx` or `ρ_n` from each factor `(U_nᵀx + ρ_n)`.
pub fn eval_subset_expansion(params: &PolyParams, spec: &PolySpec, x: &CTensor) -> Result<CTensor> {
    params.validate(spec)?;
    require_plain(spec)?;
    if !spec.variant.is_bias_ccp() {
        return Err(ApolloError::Unsupported(format!("subset expansion covers bias-CCP only, not {}", spec.variant)));
    }
    if spec.n > 6 {
        return Err(ApolloError::Capacity(format!("subset expansion supports N ≤ 6, got {}", spec.n)));
    }
    let h = params.get(Slot::H);
    let z1 = matvec_t(params.get(Slot::U(1)), x)?;
    let mut acc = CTensor::zeros(&[spec.o]);
    for s in subsets(2, spec.n) {
        let mut prod = z1.clone();
        for m in 2..=spec.n {
            let f = if s.contains(&m) { matvec_t(params.get(Slot::U(m)), x)? } else { params.get(Slot::Rho(m)).clone() };
            prod = hadamard(&f, &prod)?;
        }
        acc = acc.add(&matvec(h, &prod)?)?;
    }
    acc.add(params.get(Slot::HBias))
}

/// Materializes a degree-3 NCP model (no shortcut, `ρ = 0`) from the
/// hierarchical factorization, with `b_n = B_nᵀβ_n` given as explicit
/// `B_n` (`ω × k`) and `β_n` (`ω`).
pub fn materialize_ncp3(
    params: &PolyParams,
    spec: &PolySpec,
    b_mats: &[CTensor; 3],
    betas: &[CTensor; 3],
) -> Result<MaterializedPoly> {
    params.validate(spec)?;
    require_plain(spec)?;
    if !spec.variant.is_ncp() {
        return Err(ApolloError::Unsupported(format!("materialize_ncp3 does not cover {}", spec.variant)));
    }
    if spec.n != 3 {
        return Err(ApolloError::Unsupported(format!("the NCP factorization is materialized at N = 3 only, got {}", spec.n)));
    }
    if spec.skip {
        return Err(ApolloError::Unsupported("the NCP factorization excludes the shortcut".into()));
    }
    for m in 2..=3 {
        if params.get(Slot::Rho(m)).max_abs() != 0.0 {
            return Err(ApolloError::Unsupported("the NCP factorization requires ρ = 0".into()));
        }
    }
    for i in 0..3 {
        let b = matvec_t(&b_mats[i], &betas[i])?;
        let stored = params.get(Slot::B(i + 1));
        let scale = stored.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
        if b.max_abs_diff(stored) > 1e-12 * scale {
            return Err(ApolloError::Parameter(format!("b{} does not equal B{}ᵀβ{}", i + 1, i + 1, i + 1)));
        }
    }
    let e = |n| params.get(Slot::E(n));
    let f = |n| params.get(Slot::F(n));
    let h = params.get(Slot::H);

    // inner_n: (E_n ⊙ …) chains, rows enumerate (ω, d, …) with ω fastest
    let t1 = khatri_rao(e(3), &b_mats[2])?;
    let inner2 = matmul(&khatri_rao(e(2), &b_mats[1])?, f(3))?;
    let t2 = khatri_rao(e(3), &inner2)?;
    let lvl1 = matmul(&khatri_rao(e(1), &b_mats[0])?, f(2))?;
    let lvl2 = matmul(&khatri_rao(e(2), &lvl1)?, f(3))?;
    let t3 = khatri_rao(e(3), &lvl2)?;

    let omega = b_mats[0].rows();
    let mut w = Vec::new();
    for (n, (t, beta)) in [(t1, &betas[2]), (t2, &betas[1]), (t3, &betas[0])].into_iter().enumerate() {
        let mut shape = vec![spec.o, omega];
        shape.extend(std::iter::repeat_n(spec.d, n + 1));
        guard(&shape)?;
        let full = fold1(&matmul(h, &t.transpose()?)?, &shape)?;
        w.push(vec![mode_m_product(&full, beta, 2)?]);
    }
    Ok(MaterializedPoly { w, bias: params.get(Slot::HBias).clone(), two_input: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub fits: bool,
    pub residual: f64,
}

/// The fresh evaluation node.
pub const PROBE_NODE: f64 = 0.6180339887;

/// Checks that `λ ↦ model(λx)` is a polynomial of degree at most `n_claim`
/// by interpolating at `n_claim + 1` Chebyshev nodes and predicting a fresh
/// node. The residual is relative to the largest observed output modulus.
pub fn degree_probe<F>(model: F, x: &CTensor, n_claim: usize) -> Result<ProbeResult>
where
    F: Fn(&CTensor) -> Result<CTensor>,
{
    let m = n_claim + 1;
    let nodes: Vec<f64> = (0..m).map(|j| ((2 * j + 1) as f64 * std::f64::consts::PI / (2 * m) as f64).cos()).collect();
    let weights: Vec<f64> = (0..m)
        .map(|j| 1.0 / (0..m).filter(|&k| k != j).map(|k| nodes[j] - nodes[k]).product::<f64>())
        .collect();
    let values: Vec<CTensor> =
        nodes.iter().map(|&l| model(&x.scale(Cplx::new(l, 0.0)))).collect::<Result<_>>()?;
    let actual = model(&x.scale(Cplx::new(PROBE_NODE, 0.0)))?;
    let coef: Vec<f64> = nodes.iter().zip(&weights).map(|(&xn, &w)| w / (PROBE_NODE - xn)).collect();
    let denom: f64 = coef.iter().sum();
    let mut residual = 0.0f64;
    for i in 0..actual.len() {
        let pred: Cplx = values.iter().zip(&coef).map(|(v, &c)| v.data()[i] * c).sum::<Cplx>() / denom;
        let scale = values.iter().map(|v| v.data()[i].norm()).fold(actual.data()[i].norm(), f64::max).max(1e-300);
        residual = residual.max((pred - actual.data()[i]).norm() / scale);
    }
    Ok(ProbeResult { fits: residual < 1e-8, residual })
}

/// `max |a − b| / max(max |a|, max |b|)`.
pub fn rel_dev(a: &CTensor, b: &CTensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
    a.max_abs_diff(b) / scale
}
