//! The `APLY` model container.
//!
//! Layout (little-endian): magic `APLY`, `u32` version, `u8` variant tag,
//! `u32` N, d, d2, k, o, `u8` flags (bit 0 skip, bit 1 per-degree CReLU,
//! bit 2 output tanh, bit 3 convolutional). Convolutional models then carry
//! `u32` base height, base width, kernel and a `u8` pointwise marker. The
//! parameters follow in layout order, each row-major as interleaved
//! `(re, im)` f64 pairs.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::ctensor::{CTensor, Cplx};
use crate::error::{ApolloError, Result};
use crate::util::write_atomic;

use super::{Activation, ConvPlan, ConvPoly, OutputActivation, PolyParams, PolySpec, Slot, Variant};

const MAGIC: &[u8; 4] = b"APLY";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AplyModel {
    Dense { spec: PolySpec, params: PolyParams },
    Conv(ConvPoly),
}

fn fmt_err(msg: impl Into<String>) -> ApolloError {
    ApolloError::Format(msg.into())
}

pub fn write_aply_to<W: Write>(w: &mut W, model: &AplyModel) -> Result<()> {
    let (spec, params, plan) = match model {
        AplyModel::Dense { spec, params } => {
            params.validate(spec)?;
            (spec, params, None)
        }
        AplyModel::Conv(c) => {
            c.validate()?;
            (&c.spec, &c.params, Some(c.plan))
        }
    };
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u8(spec.variant.tag())?;
    for v in [spec.n, spec.d, spec.d2, spec.k, spec.o] {
        w.write_u32::<LE>(v as u32)?;
    }
    let mut flags = 0u8;
    if spec.skip {
        flags |= 1;
    }
    if spec.activation == Activation::CreluPerDegree {
        flags |= 2;
    }
    if spec.output_activation == OutputActivation::TanhSplit {
        flags |= 4;
    }
    if plan.is_some() {
        flags |= 8;
    }
    w.write_u8(flags)?;
    if let Some(p) = plan {
        w.write_u32::<LE>(p.base.0 as u32)?;
        w.write_u32::<LE>(p.base.1 as u32)?;
        w.write_u32::<LE>(p.kernel as u32)?;
        w.write_u8(p.pointwise as u8)?;
    }
    for (_, t) in params.iter() {
        for z in t.data() {
            w.write_f64::<LE>(z.re)?;
            w.write_f64::<LE>(z.im)?;
        }
    }
    Ok(())
}

pub fn aply_bytes(model: &AplyModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_aply_to(&mut buf, model)?;
    Ok(buf)
}

pub fn write_aply(path: &Path, model: &AplyModel) -> Result<()> {
    write_atomic(path, &aply_bytes(model)?)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    r.read_u32::<LE>().map(|v| v as usize).map_err(|_| fmt_err(format!("truncated APLY header at {what}")))
}

pub fn read_aply_from<R: Read>(r: &mut R) -> Result<AplyModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt_err("truncated APLY magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {:?}, expected APLY", String::from_utf8_lossy(&magic))));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION as usize {
        return Err(fmt_err(format!("unsupported APLY version {version}")));
    }
    let tag = r.read_u8().map_err(|_| fmt_err("truncated APLY header at variant"))?;
    let variant = Variant::from_tag(tag).ok_or_else(|| fmt_err(format!("unknown variant tag {tag}")))?;
    let n = read_u32(r, "N")?;
    let d = read_u32(r, "d")?;
    let d2 = read_u32(r, "d2")?;
    let k = read_u32(r, "k")?;
    let o = read_u32(r, "o")?;
    let flags = r.read_u8().map_err(|_| fmt_err("truncated APLY header at flags"))?;
    if flags & !0x0f != 0 {
        return Err(fmt_err(format!("unknown APLY flag bits {flags:#04x}")));
    }
    let mut spec = PolySpec::new(variant, n, d, k, o).with_d2(d2).with_skip(flags & 1 != 0);
    if flags & 2 != 0 {
        spec.activation = Activation::CreluPerDegree;
    }
    if flags & 4 != 0 {
        spec.output_activation = OutputActivation::TanhSplit;
    }
    spec.check().map_err(|e| fmt_err(format!("invalid APLY header: {e}")))?;
    let plan = if flags & 8 != 0 {
        let base = (read_u32(r, "base height")?, read_u32(r, "base width")?);
        let kernel = read_u32(r, "kernel")?;
        let pointwise = r.read_u8().map_err(|_| fmt_err("truncated APLY conv block"))? != 0;
        Some(ConvPlan { base, kernel, pointwise })
    } else {
        None
    };
    let mut entries = Vec::new();
    for slot in Slot::layout(&spec) {
        let shape = match &plan {
            Some(p) => p.slot_shape(&spec, slot),
            None => spec.slot_shape(slot),
        };
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let re = r.read_f64::<LE>();
            let im = r.read_f64::<LE>();
            match (re, im) {
                (Ok(re), Ok(im)) => data.push(Cplx::new(re, im)),
                _ => return Err(fmt_err(format!("truncated APLY data in parameter {}", slot.name()))),
            }
        }
        let t = CTensor::new(shape, data)?;
        if variant.slot_is_real(slot) && !t.is_real() {
            return Err(fmt_err(format!("real parameter {} carries imaginary parts", slot.name())));
        }
        entries.push((slot, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after APLY parameters"));
    }
    let params = PolyParams::from_entries(entries);
    Ok(match plan {
        Some(plan) => {
            let c = ConvPoly { spec, plan, params };
            c.validate()?;
            AplyModel::Conv(c)
        }
        None => {
            params.validate(&spec)?;
            AplyModel::Dense { spec, params }
        }
    })
}

pub fn read_aply(path: &Path) -> Result<AplyModel> {
    let bytes = std::fs::read(path)?;
    read_aply_from(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip_every_variant() {
        let mut rng = crate::testutil::rng(12);
        for v in Variant::ALL {
            let spec = PolySpec::new(v, 3, 3, 2, 2)
                .with_d2(2)
                .with_skip(v.is_ncp())
                .with_activation(Activation::CreluPerDegree);
            let mut p = PolyParams::init(&spec, &mut rng).unwrap();
            p.randomize_biases(&spec, &mut rng);
            let m = AplyModel::Dense { spec, params: p };
            let bytes = aply_bytes(&m).unwrap();
            assert_eq!(&bytes[..4], b"APLY");
            assert_eq!(read_aply_from(&mut bytes.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn conv_round_trip_and_header_layout() {
        let mut rng = crate::testutil::rng(3);
        let spec = PolySpec::new(Variant::MIX_NCP_BIAS, 2, 2, 3, 1).with_skip(true);
        let c = ConvPoly::init(&spec, ConvPlan::upsampling((8, 8), 2, 3).unwrap(), &mut rng).unwrap();
        let m = AplyModel::Conv(c);
        let bytes = aply_bytes(&m).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], Variant::MIX_NCP_BIAS.tag());
        assert_eq!(bytes[29], 0b1001);
        assert_eq!(read_aply_from(&mut bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut rng = crate::testutil::rng(3);
        let spec = PolySpec::new(Variant::R_CCP_BIAS, 2, 2, 2, 1);
        let m = AplyModel::Dense { spec, params: PolyParams::init(&PolySpec::new(Variant::R_CCP_BIAS, 2, 2, 2, 1), &mut rng).unwrap() };
        let bytes = aply_bytes(&m).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_aply_from(&mut bad.as_slice()), Err(ApolloError::Format(_))));
        assert!(matches!(read_aply_from(&mut &bytes[..bytes.len() - 3]), Err(ApolloError::Format(_))));
        let mut imag = bytes.clone();
        // first parameter's first imaginary part
        imag[30 + 8..30 + 16].copy_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(read_aply_from(&mut imag.as_slice()), Err(ApolloError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(read_aply_from(&mut extra.as_slice()), Err(ApolloError::Format(_))));
    }
}
