//! Time-frequency representation: STFT and its exact inverse, the
//! generator-side preprocessing chain, mel features, instantaneous frequency
//! and 16-bit WAV files.

use std::f64::consts::PI;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::ctensor::{CTensor, Cplx};
use crate::error::{dim_err, ApolloError, Result};
use crate::util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub window: Window,
    pub center: bool,
}

impl StftConfig {
    pub fn new(sample_rate: u32, win_len: usize, hop: usize) -> Self {
        Self { sample_rate, win_len, hop, window: Window::Hann, center: true }
    }

    /// 16 kHz, 16 ms windows, 8 ms stride.
    pub fn sc09() -> Self {
        Self::new(16_000, 256, 128)
    }

    /// 16 kHz, 32 ms windows, 16 ms stride.
    pub fn piano() -> Self {
        Self::new(16_000, 512, 256)
    }

    pub fn check(&self) -> Result<()> {
        if self.win_len == 0 || self.win_len % 2 != 0 {
            return Err(ApolloError::Config(format!("window length must be even and positive, got {}", self.win_len)));
        }
        if self.hop == 0 || self.hop > self.win_len {
            return Err(ApolloError::Config(format!("hop {} must lie in 1..={}", self.hop, self.win_len)));
        }
        if self.sample_rate == 0 {
            return Err(ApolloError::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn frames(&self, signal_len: usize) -> usize {
        if self.center {
            signal_len / self.hop
        } else {
            (signal_len - self.win_len) / self.hop + 1
        }
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecState {
    Raw,
    Normalized,
    Sqrt,
}

impl SpecState {
    fn tag(self) -> u8 {
        match self {
            SpecState::Raw => 0,
            SpecState::Normalized => 1,
            SpecState::Sqrt => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [SpecState::Raw, SpecState::Normalized, SpecState::Sqrt].into_iter().find(|s| s.tag() == t)
    }
}

/// A complex `bins × frames` grid with everything needed to invert the
/// preprocessing applied to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub grid: CTensor,
    pub cfg: StftConfig,
    pub nyquist_row: Option<CTensor>,
    pub scale: (f64, f64),
    pub state: SpecState,
}

impl Spectrogram {
    pub fn new(grid: CTensor, cfg: StftConfig) -> Result<Self> {
        if grid.order() != 2 {
            return Err(dim_err!("spectrogram grid must be a matrix, got shape {:?}", grid.shape()));
        }
        Ok(Self { grid, cfg, nyquist_row: None, scale: (1.0, 1.0), state: SpecState::Raw })
    }

    pub fn bins(&self) -> usize {
        self.grid.rows()
    }

    pub fn frames(&self) -> usize {
        self.grid.cols()
    }

    pub fn is_truncated(&self) -> bool {
        self.bins() + 1 == self.cfg.bins()
    }

    fn require(&self, state: SpecState, op: &str) -> Result<()> {
        if self.state != state {
            return Err(ApolloError::State(format!("{op} needs a {state:?} spectrogram, got {:?}", self.state)));
        }
        Ok(())
    }
}

struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
}

fn reflect_pad(signal: &[f64], pad: usize) -> Result<Vec<f64>> {
    let n = signal.len();
    if pad >= n {
        return Err(ApolloError::Input(format!("signal of {n} samples is too short to reflect-pad by {pad}")));
    }
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| signal[i]));
    out.extend_from_slice(signal);
    out.extend((1..=pad).map(|i| signal[n - 1 - i]));
    Ok(out)
}

/// Hann-windowed, reflect-padded onesided STFT.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.check()?;
    if signal.len() < cfg.win_len {
        return Err(ApolloError::Input(format!(
            "signal has {} samples, shorter than the {}-sample window",
            signal.len(),
            cfg.win_len
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(ApolloError::NonFinite("signal contains non-finite samples".into()));
    }
    let padded = if cfg.center { reflect_pad(signal, cfg.win_len / 2)? } else { signal.to_vec() };
    let frames = cfg.frames(signal.len());
    let bins = cfg.bins();
    let w = cfg.window();
    let fft = plans(cfg.win_len).fwd;
    let mut grid = CTensor::zeros(&[bins, frames]);
    let mut buf = vec![Cplx::new(0.0, 0.0); cfg.win_len];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Cplx::new(padded[start + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            grid.set(&[k, t], buf[k]);
        }
    }
    Spectrogram::new(grid, *cfg)
}

/// Weighted overlap-add inverse of [`stft`], dividing by the summed squared
/// window.
pub fn istft(spec: &Spectrogram, signal_len: usize) -> Result<Vec<f64>> {
    spec.require(SpecState::Raw, "istft")?;
    let cfg = &spec.cfg;
    cfg.check()?;
    if spec.bins() != cfg.bins() {
        return Err(ApolloError::State(format!(
            "istft needs all {} bins, got {}; restore the Nyquist row first",
            cfg.bins(),
            spec.bins()
        )));
    }
    if cfg.frames(signal_len) != spec.frames() {
        return Err(dim_err!("{} frames cannot yield {signal_len} samples", spec.frames()));
    }
    let n = cfg.win_len;
    let pad = if cfg.center { n / 2 } else { 0 };
    let total = (spec.frames() - 1) * cfg.hop + n;
    let mut acc = vec![0.0; total.max(signal_len + pad)];
    let mut wsum = vec![0.0; acc.len()];
    let w = cfg.window();
    let ifft = plans(n).inv;
    let mut buf = vec![Cplx::new(0.0, 0.0); n];
    for t in 0..spec.frames() {
        for k in 0..=n / 2 {
            buf[k] = spec.grid.at(&[k, t]);
        }
        for k in 1..n / 2 {
            buf[n - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * w[i];
            wsum[start + i] += w[i] * w[i];
        }
    }
    let mut twiddles: Option<Vec<(dd::Dd, dd::Dd)>> = None;
    (0..signal_len)
        .map(|i| {
            let p = i + pad;
            if wsum[p] <= 1e-300 {
                return Err(ApolloError::Input(format!("sample {i} is not covered by any window")));
            }
            if wsum[p] >= WEAK_COVERAGE {
                return Ok(acc[p] / wsum[p]);
            }
            // weakly covered samples amplify FFT roundoff, so redo them exactly
            let tw = twiddles.get_or_insert_with(|| (0..n).map(|j| dd::cos_sin_2pi(j, n)).collect());
            let mut sum = dd::Dd::ZERO;
            let first = (p + 1).saturating_sub(n).div_ceil(cfg.hop);
            for t in first..spec.frames() {
                let start = t * cfg.hop;
                if start > p {
                    break;
                }
                let m = p - start;
                sum = sum.add(inverse_dft_at(&spec.grid, t, m, tw).mul_f(w[m]));
            }
            Ok(sum.div_f(wsum[p]).hi())
        })
        .collect()
}

const WEAK_COVERAGE: f64 = 1e-2;

/// Real inverse DFT of column `t` at sample `m`, in double-double.
fn inverse_dft_at(grid: &CTensor, t: usize, m: usize, tw: &[(dd::Dd, dd::Dd)]) -> dd::Dd {
    let n = tw.len();
    let mut sum = dd::Dd::from(grid.at(&[0, t]).re);
    let nyq = grid.at(&[n / 2, t]).re;
    sum = sum.add(dd::Dd::from(if m % 2 == 0 { nyq } else { -nyq }));
    for k in 1..n / 2 {
        let z = grid.at(&[k, t]);
        let (c, s) = tw[k * m % n];
        sum = sum.add(c.mul_f(2.0 * z.re)).add(s.mul_f(-2.0 * z.im));
    }
    sum.div_f(n as f64)
}

mod dd {
    //! Minimal double-double arithmetic.

    #[derive(Clone, Copy, Debug)]
    pub struct Dd(f64, f64);

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn quick(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd(s, b - (s - a))
    }

    impl Dd {
        pub const ZERO: Dd = Dd(0.0, 0.0);
        const TWO_PI: Dd = Dd(6.283185307179586, 2.4492935982947064e-16);

        pub fn from(v: f64) -> Dd {
            Dd(v, 0.0)
        }

        pub fn hi(self) -> f64 {
            self.0 + self.1
        }

        pub fn add(self, o: Dd) -> Dd {
            let (s, e) = two_sum(self.0, o.0);
            let (t, f) = two_sum(self.1, o.1);
            let r = quick(s, e + t);
            quick(r.0, r.1 + f)
        }

        pub fn mul(self, o: Dd) -> Dd {
            let p = self.0 * o.0;
            let e = self.0.mul_add(o.0, -p);
            quick(p, e + self.0 * o.1 + self.1 * o.0)
        }

        pub fn mul_f(self, b: f64) -> Dd {
            self.mul(Dd(b, 0.0))
        }

        pub fn div_f(self, b: f64) -> Dd {
            let q1 = self.0 / b;
            let r = self.add(Dd(b, 0.0).mul_f(-q1));
            let q2 = r.0 / b;
            quick(q1, q2)
        }
    }

    /// `(cos, sin)` of `2πj/n` by Taylor series on the angle reduced to `[−π, π]`.
    pub fn cos_sin_2pi(j: usize, n: usize) -> (Dd, Dd) {
        let j = (j % n) as f64;
        let signed = if 2.0 * j > n as f64 { j - n as f64 } else { j };
        let theta = Dd::TWO_PI.mul_f(signed).div_f(n as f64);
        let th2 = theta.mul(theta);
        let (mut c, mut s) = (Dd::from(1.0), theta);
        let (mut tc, mut ts) = (Dd::from(1.0), theta);
        for k in 1..30 {
            let k = k as f64;
            tc = tc.mul(th2).div_f(-(2.0 * k - 1.0) * (2.0 * k));
            ts = ts.mul(th2).div_f(-(2.0 * k) * (2.0 * k + 1.0));
            c = c.add(tc);
            s = s.add(ts);
        }
        (c, s)
    }
}

/// Relative gap between the frame energies measured in the frequency domain
/// and the padded signal energy weighted by the summed squared window.
pub fn parseval_gap(signal: &[f64], cfg: &StftConfig) -> Result<f64> {
    let spec = stft(signal, cfg)?;
    let n = cfg.win_len;
    let mut freq = 0.0;
    for t in 0..spec.frames() {
        for k in 0..spec.bins() {
            let m = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            freq += m * spec.grid.at(&[k, t]).norm_sqr();
        }
    }
    freq /= n as f64;
    let padded = if cfg.center { reflect_pad(signal, n / 2)? } else { signal.to_vec() };
    let w = cfg.window();
    let mut time = 0.0;
    for t in 0..spec.frames() {
        for i in 0..n {
            time += (padded[t * cfg.hop + i] * w[i]).powi(2);
        }
    }
    Ok((freq - time).abs() / time.max(f64::MIN_POSITIVE))
}

/// Drops the Nyquist row and keeps it for [`restore_nyquist`].
pub fn truncate_nyquist(spec: &Spectrogram) -> Result<Spectrogram> {
    spec.require(SpecState::Raw, "truncate_nyquist")?;
    let bins = spec.bins();
    if spec.is_truncated() || bins < 2 || !(bins - 1).is_power_of_two() {
        return Err(ApolloError::State(format!("cannot truncate a grid with {bins} bins")));
    }
    let frames = spec.frames();
    let d = spec.grid.data();
    let mut out = spec.clone();
    out.grid = CTensor::new(vec![bins - 1, frames], d[..(bins - 1) * frames].to_vec())?;
    out.nyquist_row = Some(CTensor::vector(d[(bins - 1) * frames..].to_vec()));
    Ok(out)
}

/// Reattaches the stored Nyquist row, or a zero row when `zero_fill` is set
/// and nothing was stored.
pub fn restore_nyquist(spec: &Spectrogram, zero_fill: bool) -> Result<Spectrogram> {
    if !spec.is_truncated() {
        return Err(ApolloError::State(format!("grid with {} bins is not truncated", spec.bins())));
    }
    let frames = spec.frames();
    let row = match (&spec.nyquist_row, zero_fill) {
        (Some(r), _) => r.clone(),
        (None, true) => CTensor::zeros(&[frames]),
        (None, false) => return Err(ApolloError::State("no stored Nyquist row and zero fill not requested".into())),
    };
    if row.len() != frames {
        return Err(dim_err!("Nyquist row has {} entries for {frames} frames", row.len()));
    }
    let mut data = spec.grid.data().to_vec();
    data.extend_from_slice(row.data());
    let mut out = spec.clone();
    out.grid = CTensor::new(vec![spec.bins() + 1, frames], data)?;
    out.nyquist_row = None;
    Ok(out)
}

fn part_max(grid: &CTensor) -> (f64, f64) {
    grid.data().iter().fold((0.0f64, 0.0f64), |(r, i), z| (r.max(z.re.abs()), i.max(z.im.abs())))
}

/// Divides real and imaginary parts by their own maximum modulus. An
/// all-zero part records a scale of 1.
pub fn normalize(spec: &Spectrogram) -> Result<Spectrogram> {
    let (r, i) = part_max(&spec.grid);
    normalize_with(spec, (if r > 0.0 { r } else { 1.0 }, if i > 0.0 { i } else { 1.0 }))
}

/// Normalizes by externally chosen scales, e.g. dataset-wide maxima. Values
/// beyond the scale are clipped to the unit box.
pub fn normalize_with(spec: &Spectrogram, scale: (f64, f64)) -> Result<Spectrogram> {
    spec.require(SpecState::Raw, "normalize")?;
    if !(scale.0 > 0.0 && scale.1 > 0.0 && scale.0.is_finite() && scale.1.is_finite()) {
        return Err(ApolloError::Config(format!("normalization scales must be positive, got {scale:?}")));
    }
    let mut out = spec.clone();
    out.grid = spec
        .grid
        .map(|z| Cplx::new((z.re / scale.0).clamp(-1.0, 1.0), (z.im / scale.1).clamp(-1.0, 1.0)));
    out.scale = scale;
    out.state = SpecState::Normalized;
    Ok(out)
}

pub fn denormalize(spec: &Spectrogram) -> Result<Spectrogram> {
    spec.require(SpecState::Normalized, "denormalize")?;
    let (r, i) = spec.scale;
    let mut out = spec.clone();
    out.grid = spec.grid.map(|z| Cplx::new(z.re * r, z.im * i));
    out.scale = (1.0, 1.0);
    out.state = SpecState::Raw;
    Ok(out)
}

fn signed_sqrt(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum() * v.abs().sqrt()
    }
}

fn signed_square(v: f64) -> f64 {
    v * v.abs()
}

/// `v ↦ sign(v)·√|v|` on both parts.
pub fn sqrt_scale(spec: &Spectrogram) -> Result<Spectrogram> {
    spec.require(SpecState::Normalized, "sqrt_scale")?;
    let mut out = spec.clone();
    out.grid = spec.grid.map(|z| Cplx::new(signed_sqrt(z.re), signed_sqrt(z.im)));
    out.state = SpecState::Sqrt;
    Ok(out)
}

pub fn sqrt_unscale(spec: &Spectrogram) -> Result<Spectrogram> {
    spec.require(SpecState::Sqrt, "sqrt_unscale")?;
    let mut out = spec.clone();
    out.grid = spec.grid.map(|z| Cplx::new(signed_square(z.re), signed_square(z.im)));
    out.state = SpecState::Normalized;
    Ok(out)
}

/// Signal to generator target: STFT, Nyquist truncation, normalization and
/// square-root compression.
pub fn encode(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    sqrt_scale(&normalize(&truncate_nyquist(&stft(signal, cfg)?)?)?)
}

/// Exact inverse of [`encode`]; a missing Nyquist row is zero-filled.
pub fn decode(spec: &Spectrogram, signal_len: usize) -> Result<Vec<f64>> {
    let raw = denormalize(&sqrt_unscale(spec)?)?;
    istft(&restore_nyquist(&raw, true)?, signal_len)
}

/// Triangular filters equally spaced on the HTK mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelBank {
    pub matrix: Vec<Vec<f64>>,
    pub f_lo: f64,
    pub f_hi: f64,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelBank {
    pub const DEFAULT_BINS: usize = 80;

    /// A bank for grids with `freq_bins` rows where row `k` sits at
    /// `k·sample_rate/win_len` Hz.
    pub fn new(mel_bins: usize, freq_bins: usize, cfg: &StftConfig, f_lo: f64, f_hi: f64) -> Result<Self> {
        let nyq = cfg.sample_rate as f64 / 2.0;
        if mel_bins == 0 || !(0.0 <= f_lo && f_lo < f_hi && f_hi <= nyq) {
            return Err(ApolloError::Config(format!(
                "mel bank needs 0 ≤ f_lo < f_hi ≤ {nyq} and at least one band, got {mel_bins} bands over [{f_lo}, {f_hi}]"
            )));
        }
        let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges: Vec<f64> =
            (0..mel_bins + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (mel_bins + 1) as f64)).collect();
        let df = cfg.sample_rate as f64 / cfg.win_len as f64;
        let matrix = (0..mel_bins)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..freq_bins)
                    .map(|k| {
                        let f = k as f64 * df;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { matrix, f_lo, f_hi })
    }

    pub fn mel_bins(&self) -> usize {
        self.matrix.len()
    }

    pub fn freq_bins(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }
}

/// `bank · |grid|`, returned as `mel_bins` rows of `frames` values.
pub fn mel_project(spec: &Spectrogram, bank: &MelBank) -> Result<Vec<Vec<f64>>> {
    if bank.freq_bins() != spec.bins() {
        return Err(dim_err!("mel bank expects {} bins, spectrogram has {}", bank.freq_bins(), spec.bins()));
    }
    let frames = spec.frames();
    Ok(bank
        .matrix
        .iter()
        .map(|row| {
            (0..frames)
                .map(|t| row.iter().enumerate().map(|(k, w)| w * spec.grid.at(&[k, t]).norm()).sum())
                .collect()
        })
        .collect())
}

/// Phase unwrapped along time and differenced: `bins × (frames − 1)`.
pub fn inst_freq(spec: &Spectrogram) -> Vec<Vec<f64>> {
    (0..spec.bins())
        .map(|k| {
            let mut prev: Option<f64> = None;
            let mut out = Vec::with_capacity(spec.frames().saturating_sub(1));
            let mut offset = 0.0;
            for t in 0..spec.frames() {
                let raw = spec.grid.at(&[k, t]).arg();
                if let Some(p) = prev {
                    let mut cur = raw + offset;
                    while cur - p > PI {
                        cur -= 2.0 * PI;
                        offset -= 2.0 * PI;
                    }
                    while cur - p < -PI {
                        cur += 2.0 * PI;
                        offset += 2.0 * PI;
                    }
                    out.push(cur - p);
                    prev = Some(cur);
                } else {
                    prev = Some(raw);
                }
            }
            out
        })
        .collect()
}

fn chunk_err(chunk: &str, msg: impl std::fmt::Display) -> ApolloError {
    ApolloError::Format(format!("WAV {chunk} chunk: {msg}"))
}

/// Parses mono 16-bit PCM, returning samples scaled by `1/32768` and the
/// sample rate.
pub fn wav_from_bytes(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    let mut r = Cursor::new(bytes);
    let mut tag = [0u8; 4];
    let truncated = |c: &str| chunk_err(c, "truncated");
    r.read_exact(&mut tag).map_err(|_| truncated("RIFF"))?;
    if &tag != b"RIFF" {
        return Err(chunk_err("RIFF", "missing RIFF magic"));
    }
    r.read_u32::<LE>().map_err(|_| truncated("RIFF"))?;
    r.read_exact(&mut tag).map_err(|_| truncated("RIFF"))?;
    if &tag != b"WAVE" {
        return Err(chunk_err("RIFF", "form type is not WAVE"));
    }
    let mut rate = None;
    loop {
        if r.read_exact(&mut tag).is_err() {
            return Err(chunk_err("data", "missing"));
        }
        let id = String::from_utf8_lossy(&tag).into_owned();
        let len = r.read_u32::<LE>().map_err(|_| truncated(&id))? as usize;
        let start = r.position() as usize;
        let body = bytes.get(start..start + len).ok_or_else(|| truncated(&id))?;
        match &tag {
            b"fmt " => {
                if len < 16 {
                    return Err(chunk_err("fmt", format!("length {len} is below 16")));
                }
                let mut f = Cursor::new(body);
                let format = f.read_u16::<LE>()?;
                let channels = f.read_u16::<LE>()?;
                let sr = f.read_u32::<LE>()?;
                f.read_u32::<LE>()?;
                f.read_u16::<LE>()?;
                let bits = f.read_u16::<LE>()?;
                if format != 1 {
                    return Err(chunk_err("fmt", format!("encoding {format} is not PCM")));
                }
                if channels != 1 {
                    return Err(chunk_err("fmt", format!("{channels} channels, only mono is supported")));
                }
                if bits != 16 {
                    return Err(chunk_err("fmt", format!("{bits}-bit samples, only 16-bit is supported")));
                }
                rate = Some(sr);
            }
            b"data" => {
                let sr = rate.ok_or_else(|| chunk_err("fmt", "missing before data"))?;
                if len % 2 != 0 {
                    return Err(chunk_err("data", format!("odd length {len}")));
                }
                let samples = body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0).collect();
                return Ok((samples, sr));
            }
            _ => {}
        }
        r.set_position((start + len + len % 2) as u64);
    }
}

fn quantize(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn wav_to_bytes(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(ApolloError::NonFinite("cannot write non-finite samples".into()));
    }
    let data_len = (samples.len() * 2) as u32;
    let mut w = Vec::with_capacity(44 + samples.len() * 2);
    w.write_all(b"RIFF")?;
    w.write_u32::<LE>(36 + data_len)?;
    w.write_all(b"WAVEfmt ")?;
    w.write_u32::<LE>(16)?;
    w.write_u16::<LE>(1)?;
    w.write_u16::<LE>(1)?;
    w.write_u32::<LE>(sample_rate)?;
    w.write_u32::<LE>(sample_rate * 2)?;
    w.write_u16::<LE>(2)?;
    w.write_u16::<LE>(16)?;
    w.write_all(b"data")?;
    w.write_u32::<LE>(data_len)?;
    for &s in samples {
        w.write_i16::<LE>(quantize(s))?;
    }
    Ok(w)
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    wav_from_bytes(&std::fs::read(path)?)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_atomic(path, &wav_to_bytes(samples, sample_rate)?)
}

const SPCG: &[u8; 4] = b"SPCG";

/// `SPCG` container: magic, `u32` bins, frames, sample rate, window, hop,
/// `u8` state, `u8` Nyquist-row flag, `f64` scales, then the grid and the
/// optional Nyquist row as interleaved complex f64.
pub fn spcg_bytes(spec: &Spectrogram) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_all(SPCG)?;
    for v in [spec.bins(), spec.frames(), spec.cfg.sample_rate as usize, spec.cfg.win_len, spec.cfg.hop] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_u8(spec.state.tag())?;
    w.write_u8(spec.nyquist_row.is_some() as u8)?;
    w.write_f64::<LE>(spec.scale.0)?;
    w.write_f64::<LE>(spec.scale.1)?;
    let row = spec.nyquist_row.iter().flat_map(|r| r.data().iter());
    for z in spec.grid.data().iter().chain(row) {
        w.write_f64::<LE>(z.re)?;
        w.write_f64::<LE>(z.im)?;
    }
    Ok(w)
}

pub fn spcg_from_bytes(bytes: &[u8]) -> Result<Spectrogram> {
    let f = |m: &str| ApolloError::Format(format!("SPCG {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| f("header truncated"))?;
    if &magic != SPCG {
        return Err(f("magic mismatch"));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(|_| f("header truncated"))? as usize;
    }
    let [bins, frames, sr, win, hop] = dims;
    let state = SpecState::from_tag(r.read_u8().map_err(|_| f("header truncated"))?).ok_or_else(|| f("unknown state"))?;
    let has_row = r.read_u8().map_err(|_| f("header truncated"))? != 0;
    let scale = (r.read_f64::<LE>().map_err(|_| f("header truncated"))?, r.read_f64::<LE>().map_err(|_| f("header truncated"))?);
    let mut read = |n: usize| -> Result<Vec<Cplx>> {
        (0..n)
            .map(|_| Ok(Cplx::new(r.read_f64::<LE>().map_err(|_| f("data truncated"))?, r.read_f64::<LE>().map_err(|_| f("data truncated"))?)))
            .collect()
    };
    let grid = CTensor::new(vec![bins, frames], read(bins * frames)?)?;
    let nyquist_row = if has_row { Some(CTensor::vector(read(frames)?)) } else { None };
    if r.position() as usize != bytes.len() {
        return Err(f("trailing bytes"));
    }
    let cfg = StftConfig::new(sr as u32, win, hop);
    cfg.check()?;
    Ok(Spectrogram { grid, cfg, nyquist_row, scale, state })
}

pub fn write_spcg(path: &Path, spec: &Spectrogram) -> Result<()> {
    write_atomic(path, &spcg_bytes(spec)?)
}

pub fn read_spcg(path: &Path) -> Result<Spectrogram> {
    spcg_from_bytes(&std::fs::read(path)?)
}
