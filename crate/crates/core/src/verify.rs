//! Named self-checks: recursion against brute-force expansions, algebraic
//! lemmas, degree probes, serialization and signal round trips.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ctensor::{cp_reconstruct, fold1, khatri_rao, matmul, matvec_t, mixed_product_check, mode_m_product, unfold1, CTensor, Cplx};
use crate::error::{ApolloError, Result};
use crate::graddiff::random_gradcheck;
use crate::oracle::{
    degree_probe, eval_explicit, eval_subset_expansion, materialize_ccp, materialize_ncp3, materialize_two_var, rel_dev,
};
use crate::polyexpand::{
    aply_bytes, compose_product, forward, read_aply_from, AplyModel, ConvPlan, ConvPoly, PolyParams, PolySpec, Slot,
    Stage, Variant,
};
use crate::tfrep::{self, StftConfig};

type CheckFn = fn() -> std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Cplx::new(re, im)
        })
        .collect();
    CTensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn e2s(e: ApolloError) -> String {
    e.to_string()
}

fn within(what: &str, dev: f64, tol: f64) -> std::result::Result<String, String> {
    if dev <= tol && dev.is_finite() {
        Ok(format!("{what} {dev:.2e} ≤ {tol:.0e}"))
    } else {
        Err(format!("{what} {dev:.3e} exceeds {tol:.0e}"))
    }
}

fn random_model(variant: Variant, n: usize, d: usize, k: usize, o: usize, rng: &mut ChaCha8Rng) -> Result<(PolySpec, PolyParams)> {
    let mut spec = PolySpec::new(variant, n, d, k, o);
    if variant == Variant::TWO_VAR_CCP {
        spec = spec.with_d2(2);
    }
    if variant.is_ncp() {
        spec = spec.with_skip(true);
    }
    let mut p = PolyParams::init(&spec, rng)?;
    p.randomize_biases(&spec, rng);
    Ok((spec, p))
}

fn ccp_equivalence(variant: Variant, tol: f64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        for n in 1..=4 {
            for (d, k, o) in [(2, 1, 1), (3, 2, 2), (4, 3, 3), (2, 3, 1)] {
                let (spec, p) = random_model(variant, n, d, k, o, &mut r).map_err(e2s)?;
                let x = gauss(&mut r, &[d]);
                let fast = forward(&p, &spec, &x, None).map_err(e2s)?;
                let mp = materialize_ccp(&p, &spec).map_err(e2s)?;
                worst = worst.max(rel_dev(&fast, &eval_explicit(&mp, &x, None).map_err(e2s)?));
                cases += 1;
            }
        }
    }
    within(&format!("{cases} models, worst relative deviation"), worst, tol)
}

fn oracle_ccp() -> std::result::Result<String, String> {
    ccp_equivalence(Variant::CCP_NOBIAS, 1e-10)
}

fn oracle_c_ccp() -> std::result::Result<String, String> {
    ccp_equivalence(Variant::C_CCP_BIAS, 1e-10)
}

fn oracle_mix_ccp() -> std::result::Result<String, String> {
    ccp_equivalence(Variant::MIX_CCP_BIAS, 1e-10)
}

fn oracle_r_ccp() -> std::result::Result<String, String> {
    ccp_equivalence(Variant::R_CCP_BIAS, 1e-10)
}

fn oracle_subsets() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    let mut r = rng(7);
    for v in [Variant::C_CCP_BIAS, Variant::MIX_CCP_BIAS, Variant::R_CCP_BIAS] {
        for n in 1..=5 {
            let (spec, p) = random_model(v, n, 3, 2, 2, &mut r).map_err(e2s)?;
            let x = gauss(&mut r, &[3]);
            let fast = forward(&p, &spec, &x, None).map_err(e2s)?;
            worst = worst.max(rel_dev(&fast, &eval_subset_expansion(&p, &spec, &x).map_err(e2s)?));
        }
    }
    within("worst relative deviation", worst, 1e-12)
}

fn oracle_ncp3() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut r = rng(200 + seed);
        let (d, k, o, omega) = (2 + seed as usize % 3, 1 + seed as usize % 3, 1 + seed as usize % 2, 2);
        let spec = PolySpec::new(Variant::C_NCP_BIAS, 3, d, k, o);
        let mut p = PolyParams::init(&spec, &mut r).map_err(e2s)?;
        let bm = [0, 1, 2].map(|_| gauss(&mut r, &[omega, k]));
        let be = [0, 1, 2].map(|_| gauss(&mut r, &[omega]));
        for i in 0..3 {
            *p.get_mut(Slot::B(i + 1)) = matvec_t(&bm[i], &be[i]).map_err(e2s)?;
        }
        *p.get_mut(Slot::HBias) = gauss(&mut r, &[o]);
        let mp = materialize_ncp3(&p, &spec, &bm, &be).map_err(e2s)?;
        let x = gauss(&mut r, &[d]);
        let fast = forward(&p, &spec, &x, None).map_err(e2s)?;
        worst = worst.max(rel_dev(&fast, &eval_explicit(&mp, &x, None).map_err(e2s)?));
    }
    within("worst relative deviation", worst, 1e-12)
}

fn oracle_two_var() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    let mut r = rng(300);
    for n in 1..=3 {
        let (spec, p) = random_model(Variant::TWO_VAR_CCP, n, 2, 2, 2, &mut r).map_err(e2s)?;
        let x = gauss(&mut r, &[2]);
        let psi = gauss(&mut r, &[2]);
        let fast = forward(&p, &spec, &x, Some(&psi)).map_err(e2s)?;
        let mp = materialize_two_var(&p, &spec).map_err(e2s)?;
        worst = worst.max(rel_dev(&fast, &eval_explicit(&mp, &x, Some(&psi)).map_err(e2s)?));
    }
    within("worst relative deviation", worst, 1e-10)
}

fn lemma_mixed_product() -> std::result::Result<String, String> {
    let mut r = rng(400);
    let mut worst = 0.0f64;
    for t in 0..200 {
        let n = 1 + t % 4;
        let (ka, kc) = (1 + t % 3, 1 + (t / 3) % 3);
        let rows: Vec<usize> = (0..n).map(|i| 1 + (t + i) % 4).collect();
        let a: Vec<CTensor> = rows.iter().map(|&i| gauss(&mut r, &[i, ka])).collect();
        let c: Vec<CTensor> = rows.iter().map(|&i| gauss(&mut r, &[i, kc])).collect();
        let scale = a.iter().chain(&c).map(CTensor::max_abs).fold(1.0, f64::max).powi(2 * n as i32);
        worst = worst.max(mixed_product_check(&a, &c).map_err(e2s)? / scale);
    }
    within("200 sets, worst scaled deviation", worst, 1e-12)
}

fn lemma_khatri_rao_columns() -> std::result::Result<String, String> {
    let mut r = rng(401);
    let a = gauss(&mut r, &[3, 4]);
    let c = gauss(&mut r, &[2, 4]);
    let kr = khatri_rao(&a, &c).map_err(e2s)?;
    let mut worst = 0.0f64;
    for col in 0..4 {
        for i in 0..3 {
            for j in 0..2 {
                let want = a.at(&[i, col]) * c.at(&[j, col]);
                worst = worst.max((kr.at(&[i * 2 + j, col]) - want).norm());
            }
        }
    }
    if worst == 0.0 {
        Ok("every column is the Kronecker product of its sources".into())
    } else {
        Err(format!("column mismatch {worst:.3e}"))
    }
}

fn lemma_cp_unfolding() -> std::result::Result<String, String> {
    let mut r = rng(402);
    let f: Vec<CTensor> = [3, 2, 4].iter().map(|&i| gauss(&mut r, &[i, 3])).collect();
    let t = cp_reconstruct(&[&f[0], &f[1], &f[2]]).map_err(e2s)?;
    let rhs = matmul(&f[0], &khatri_rao(&f[2], &f[1]).map_err(e2s)?.transpose().map_err(e2s)?).map_err(e2s)?;
    let lhs = unfold1(&t).map_err(e2s)?;
    let back = fold1(&lhs, t.shape()).map_err(e2s)?;
    if back != t {
        return Err("fold1 does not invert unfold1".into());
    }
    within("unfolding deviation", lhs.max_abs_diff(&rhs), 0.0)
}

fn lemma_mode_product_multilinear() -> std::result::Result<String, String> {
    let mut r = rng(403);
    let t = gauss(&mut r, &[2, 3, 4]);
    let (u, v) = (gauss(&mut r, &[3]), gauss(&mut r, &[3]));
    let a = Cplx::new(0.3, -1.2);
    let lhs = mode_m_product(&t, &u.scale(a).add(&v).map_err(e2s)?, 2).map_err(e2s)?;
    let rhs = mode_m_product(&t, &u, 2).map_err(e2s)?.scale(a).add(&mode_m_product(&t, &v, 2).map_err(e2s)?).map_err(e2s)?;
    within("linearity deviation", rel_dev(&lhs, &rhs), 1e-14)
}

fn probe_variant(v: Variant) -> std::result::Result<String, String> {
    let mut r = rng(500 + v.tag() as u64);
    let mut report = Vec::new();
    for n in 1..=4 {
        let (spec, p) = random_model(v, n, 3, 3, 2, &mut r).map_err(e2s)?;
        let x = gauss(&mut r, &[3]);
        let psi = gauss(&mut r, &[2]);
        let model = |z: &CTensor| {
            if v == Variant::TWO_VAR_CCP {
                // scaling both inputs keeps the joint degree visible on the ray
                let l = z.data()[0] / x.data()[0];
                forward(&p, &spec, z, Some(&psi.scale(l)))
            } else {
                forward(&p, &spec, z, None)
            }
        };
        let at = degree_probe(model, &x, n).map_err(e2s)?;
        let below = degree_probe(model, &x, n - 1).map_err(e2s)?;
        if !at.fits || below.fits {
            return Err(format!("N={n}: fits at N {} (residual {:.2e}), at N−1 {}", at.fits, at.residual, below.fits));
        }
        report.push(format!("{:.0e}", at.residual));
    }
    Ok(format!("degrees 1..4 certified, residuals {}", report.join(" ")))
}

macro_rules! probe_fns {
    ($($f:ident => $v:ident),* $(,)?) => {
        $(fn $f() -> std::result::Result<String, String> { probe_variant(Variant::$v) })*
    };
}

probe_fns!(
    probe_ccp_nobias => CCP_NOBIAS,
    probe_c_ccp => C_CCP_BIAS,
    probe_mix_ccp => MIX_CCP_BIAS,
    probe_r_ccp => R_CCP_BIAS,
    probe_c_ncp => C_NCP_BIAS,
    probe_mix_ncp => MIX_NCP_BIAS,
    probe_r_ncp => R_NCP_BIAS,
    probe_two_var => TWO_VAR_CCP,
);

fn probe_composition() -> std::result::Result<String, String> {
    let mut r = rng(600);
    let (s1, p1) = random_model(Variant::R_NCP_BIAS, 2, 3, 3, 3, &mut r).map_err(e2s)?;
    let (s2, p2) = random_model(Variant::C_CCP_BIAS, 4, 3, 2, 2, &mut r).map_err(e2s)?;
    let m = compose_product(vec![Stage::Dense { params: p1, spec: s1 }, Stage::Dense { params: p2, spec: s2 }]).map_err(e2s)?;
    let x = gauss(&mut r, &[3]);
    let at = degree_probe(|z| m.forward(z), &x, 8).map_err(e2s)?;
    let below = degree_probe(|z| m.forward(z), &x, 7).map_err(e2s)?;
    if m.degree() == 8 && at.fits && !below.fits {
        Ok(format!("degree 8 certified, residual {:.1e}", at.residual))
    } else {
        Err(format!("degree {} fits@8 {} fits@7 {}", m.degree(), at.fits, below.fits))
    }
}

fn probe_conv_stage() -> std::result::Result<String, String> {
    let mut r = rng(601);
    let spec = PolySpec::new(Variant::C_NCP_BIAS, 3, 2, 2, 1).with_skip(true);
    let cp = ConvPoly::init(&spec, ConvPlan::upsampling((8, 8), 3, 3).map_err(e2s)?, &mut r).map_err(e2s)?;
    let x = gauss(&mut r, &[1, 2, 2, 2]);
    let at = degree_probe(|z| cp.forward(z), &x, 3).map_err(e2s)?;
    let below = degree_probe(|z| cp.forward(z), &x, 2).map_err(e2s)?;
    if at.fits && !below.fits {
        Ok(format!("degree 3 certified, residual {:.1e}", at.residual))
    } else {
        Err(format!("fits@3 {} fits@2 {}", at.fits, below.fits))
    }
}

fn gradcheck_dense() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    let mut r = rng(700);
    for v in Variant::ALL {
        worst = worst.max(random_gradcheck(v, 2, 1e-6, 64, &mut r).map_err(e2s)?.max_rel_err);
    }
    within("worst relative gradient error", worst, 1e-4)
}

fn roundtrip_aply() -> std::result::Result<String, String> {
    let mut r = rng(800);
    for v in Variant::ALL {
        let (spec, params) = random_model(v, 2, 2, 2, 2, &mut r).map_err(e2s)?;
        let m = AplyModel::Dense { spec, params };
        let back = read_aply_from(&mut aply_bytes(&m).map_err(e2s)?.as_slice()).map_err(e2s)?;
        if back != m {
            return Err(format!("{v} did not survive serialization"));
        }
    }
    Ok("every variant restored bitwise".into())
}

fn test_signal(len: usize, sr: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            0.5 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 1234.5 * t).cos()
        })
        .collect()
}

fn roundtrip_stft() -> std::result::Result<String, String> {
    let cfg = StftConfig::sc09();
    let x = test_signal(16384, 16000.0);
    let spec = tfrep::stft(&x, &cfg).map_err(e2s)?;
    let y = tfrep::istft(&spec, x.len()).map_err(e2s)?;
    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    within("max abs reconstruction error", err, 1e-9)
}

fn roundtrip_pipeline() -> std::result::Result<String, String> {
    let cfg = StftConfig::sc09();
    let x = test_signal(16384, 16000.0);
    let enc = tfrep::encode(&x, &cfg).map_err(e2s)?;
    if enc.grid.shape() != [128, 128] {
        return Err(format!("grid {:?}, expected [128, 128]", enc.grid.shape()));
    }
    let y = tfrep::decode(&enc, x.len()).map_err(e2s)?;
    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    within("max abs error through the full preprocessing chain", err, 1e-9)
}

fn roundtrip_sqrt() -> std::result::Result<String, String> {
    let cfg = StftConfig::sc09();
    let x = test_signal(4096, 16000.0);
    let n = tfrep::normalize(&tfrep::truncate_nyquist(&tfrep::stft(&x, &cfg).map_err(e2s)?).map_err(e2s)?).map_err(e2s)?;
    let back = tfrep::sqrt_unscale(&tfrep::sqrt_scale(&n).map_err(e2s)?).map_err(e2s)?;
    within("sqrt round-trip deviation", back.grid.max_abs_diff(&n.grid), 1e-15)
}

fn roundtrip_wav() -> std::result::Result<String, String> {
    let x: Vec<f64> = test_signal(1000, 8000.0).iter().map(|v| (v * 32767.0).round() / 32768.0).collect();
    let (y, sr) = tfrep::wav_from_bytes(&tfrep::wav_to_bytes(&x, 8000).map_err(e2s)?).map_err(e2s)?;
    if sr != 8000 || y != x {
        return Err("16-bit samples did not survive a WAV round trip".into());
    }
    Ok("quantized samples restored exactly".into())
}

fn roundtrip_spcg() -> std::result::Result<String, String> {
    let x = test_signal(2048, 16000.0);
    let spec = tfrep::encode(&x, &StftConfig::sc09()).map_err(e2s)?;
    let back = tfrep::spcg_from_bytes(&tfrep::spcg_bytes(&spec).map_err(e2s)?).map_err(e2s)?;
    if back != spec {
        return Err("spectrogram container changed its contents".into());
    }
    Ok("spectrogram restored bitwise".into())
}

fn stft_grid_shapes() -> std::result::Result<String, String> {
    let check = |cfg: StftConfig, len: usize, full: [usize; 2], cut: [usize; 2]| -> std::result::Result<(), String> {
        let s = tfrep::stft(&vec![0.1; len], &cfg).map_err(e2s)?;
        let t = tfrep::truncate_nyquist(&s).map_err(e2s)?;
        if s.grid.shape() != full || t.grid.shape() != cut {
            return Err(format!("{:?} → {:?}, expected {full:?} → {cut:?}", s.grid.shape(), t.grid.shape()));
        }
        Ok(())
    };
    check(StftConfig::sc09(), 16384, [129, 128], [128, 128])?;
    check(StftConfig::piano(), 32768, [257, 128], [256, 128])?;
    Ok("129×128 → 128×128 and 257×128 → 256×128".into())
}

/// Every check, in reporting order.
pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($($f:ident),* $(,)?) => { vec![$(Check { name: stringify!($f), run: $f }),*] };
    }
    c![
        oracle_ccp,
        oracle_c_ccp,
        oracle_mix_ccp,
        oracle_r_ccp,
        oracle_subsets,
        oracle_ncp3,
        oracle_two_var,
        lemma_mixed_product,
        lemma_khatri_rao_columns,
        lemma_cp_unfolding,
        lemma_mode_product_multilinear,
        probe_ccp_nobias,
        probe_c_ccp,
        probe_mix_ccp,
        probe_r_ccp,
        probe_c_ncp,
        probe_mix_ncp,
        probe_r_ncp,
        probe_two_var,
        probe_composition,
        probe_conv_stage,
        gradcheck_dense,
        roundtrip_aply,
        roundtrip_stft,
        roundtrip_pipeline,
        roundtrip_sqrt,
        roundtrip_wav,
        roundtrip_spcg,
        stft_grid_shapes,
    ]
}

/// Runs the checks whose names satisfy `select`. A panicking check counts
/// as a failure.
pub fn run_checks(select: impl Fn(&str) -> bool) -> Vec<Outcome> {
    checks()
        .into_iter()
        .filter(|c| select(c.name))
        .map(|c| {
            let t = Instant::now();
            let res = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("check panicked".into()));
            let (passed, detail) = match res {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome { name: c.name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let out = run_checks(|_| true);
        assert!(out.len() >= 20);
        let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| format!("{}: {}", o.name, o.detail)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = checks().iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), checks().len());
    }
}
