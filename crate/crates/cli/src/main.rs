use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use apollo::ganlab::{
    endpoint_projection, generate, grid_to_signal, interpolate, mel_features, read_checkpoint, sample_latent,
    train_step, write_checkpoint, Checkpoint, GanConfig, MetricRecord, NdbReference, SynthDataset, TrainState,
};
use apollo::graddiff::random_gradcheck;
use apollo::polyexpand::{set_fault_injection, Variant};
use apollo::tfrep::{self, SpecState, Spectrogram, StftConfig};
use apollo::util::write_atomic;
use apollo::verify::run_checks;
use apollo::{ApolloError, CTensor};

#[derive(Parser)]
#[command(name = "apollo", version, about = "Complex-valued polynomial networks: self-checks, STFT pipeline and adversarial audio training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Seed for every random draw
    #[arg(long)]
    seed: Option<u64>,
    /// JSON settings file; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for feature extraction (1 keeps every run bit-reproducible)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the named self-checks (oracles, lemmas, degree probes, round trips)
    Verify {
        #[command(flatten)]
        common: Common,
        /// Only run checks whose name matches this glob, e.g. 'lemma*'
        #[arg(long)]
        filter: Option<String>,
    },
    /// Compare tape gradients with central differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Variant name (e.g. C_NCP_BIAS) or "all"
        #[arg(long)]
        variant: Option<String>,
        /// Highest degree to check
        #[arg(long)]
        max_degree: Option<usize>,
        /// Number of random models per variant and degree
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// STFT a WAV file, optionally reporting the round-trip error
    Stft {
        #[command(flatten)]
        common: Common,
        /// Input WAV (mono 16-bit PCM)
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Preset: sc09 (256/128) or piano (512/256)
        #[arg(long)]
        preset: Option<String>,
        /// Encode, decode and report the maximum reconstruction error
        #[arg(long)]
        roundtrip: bool,
    },
    /// Train the generator and critic on the synthetic dataset
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Train the label-conditioned generator
        #[arg(long)]
        conditional: bool,
        #[arg(long)]
        batch: Option<usize>,
        /// Evaluate NDB/JSD every this many steps (0: only at the end)
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Write generated waveforms from a checkpoint
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Class label for every sample (conditional checkpoints)
        #[arg(long)]
        label: Option<usize>,
    },
    /// NDB and JSD of generated audio against the real dataset
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Number of generated samples
        #[arg(long)]
        n: Option<usize>,
        /// Number of k-means bins
        #[arg(long)]
        k: Option<usize>,
    },
    /// Decode a straight line between two latents
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        label: Option<usize>,
    },
}

/// Failures after argument parsing: bad settings exit with 2, everything
/// else with 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<ApolloError> for Failure {
    fn from(e: ApolloError) -> Self {
        match e {
            ApolloError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Res<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn show<T: Serialize>(cmd: &str, cfg: &T, threads: usize) {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    println!("resolved config ({cmd}, threads={threads}): {json}");
}

fn need<T>(v: Option<T>, what: &str) -> Res<T> {
    v.ok_or_else(|| Failure::Usage(format!("missing --{what}")))
}

fn check_threads(c: &Common) -> Res<()> {
    if c.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    Ok(())
}

/// Order-preserving map over `threads` scoped workers.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct VerifyConfig {
    seed: u64,
    filter: Option<String>,
}

fn run_verify(common: Common, filter: Option<String>) -> Res<bool> {
    let mut cfg: VerifyConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.filter = filter.or(cfg.filter);
    show("verify", &cfg, common.threads);
    let pattern = match &cfg.filter {
        Some(f) => Some(glob::Pattern::new(f).map_err(|e| Failure::Usage(format!("bad filter {f:?}: {e}")))?),
        None => None,
    };
    if std::env::var_os("APOLLO_FAULT_INJECTION").is_some_and(|v| v == "1") {
        println!("fault injection on: the recursion shortcut sign is flipped");
        set_fault_injection(true);
    }
    let out = run_checks(|name| pattern.as_ref().is_none_or(|p| p.matches(name)));
    let mut report = String::new();
    for o in &out {
        let line = format!("{} {:<32} {:>7.3}s  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds, o.detail);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    let summary = format!("{} checks, {} passed, {} failed", out.len(), out.len() - failed.len(), failed.len());
    println!("{summary}");
    if !failed.is_empty() {
        println!("failing checks: {}", failed.join(", "));
    }
    if let Some(p) = &common.out {
        report.push_str(&summary);
        report.push('\n');
        write_atomic(p, report.as_bytes())?;
    }
    if out.is_empty() {
        println!("no check matches the filter");
        return Ok(false);
    }
    Ok(failed.is_empty())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GradcheckConfig {
    seed: u64,
    variant: String,
    max_degree: usize,
    seeds: u64,
    eps: f64,
    coords: usize,
    tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, variant: "all".into(), max_degree: 4, seeds: 10, eps: 1e-6, coords: 64, tolerance: 1e-4 }
    }
}

fn parse_variant(name: &str) -> Res<Vec<Variant>> {
    if name.eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    Variant::ALL
        .into_iter()
        .find(|v| v.to_string().eq_ignore_ascii_case(name))
        .map(|v| vec![v])
        .ok_or_else(|| Failure::Usage(format!("unknown variant {name:?}")))
}

fn run_gradcheck(common: Common, variant: Option<String>, max_degree: Option<usize>, seeds: Option<u64>) -> Res<bool> {
    let mut cfg: GradcheckConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.variant = variant.unwrap_or(cfg.variant);
    cfg.max_degree = max_degree.unwrap_or(cfg.max_degree);
    cfg.seeds = seeds.unwrap_or(cfg.seeds);
    show("gradcheck", &cfg, common.threads);
    let variants = parse_variant(&cfg.variant)?;
    let mut ok = true;
    let mut lines = Vec::new();
    for v in variants {
        let mut worst = 0.0f64;
        for n in 1..=cfg.max_degree {
            for s in 0..cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s * 1000 + n as u64));
                worst = worst.max(random_gradcheck(v, n, cfg.eps, cfg.coords, &mut rng)?.max_rel_err);
            }
        }
        let pass = worst < cfg.tolerance;
        ok &= pass;
        let line = format!("{} {:<14} max relative error {:.3e}", if pass { "PASS" } else { "FAIL" }, v.to_string(), worst);
        println!("{line}");
        lines.push(line);
    }
    if let Some(p) = &common.out {
        write_atomic(p, (lines.join("\n") + "\n").as_bytes())?;
    }
    Ok(ok)
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct StftRunConfig {
    seed: u64,
    input: Option<PathBuf>,
    preset: String,
    roundtrip: bool,
    out: Option<PathBuf>,
}

impl Default for StftRunConfig {
    fn default() -> Self {
        Self { seed: 0, input: None, preset: "sc09".into(), roundtrip: false, out: None }
    }
}

fn run_stft(common: Common, input: Option<PathBuf>, preset: Option<String>, roundtrip: bool) -> Res<bool> {
    let mut cfg: StftRunConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.input = input.or(cfg.input);
    cfg.preset = preset.unwrap_or(cfg.preset);
    cfg.roundtrip |= roundtrip;
    cfg.out = common.out.clone().or(cfg.out);
    show("stft", &cfg, common.threads);
    let stft_cfg = match cfg.preset.as_str() {
        "sc09" => StftConfig::sc09(),
        "piano" => StftConfig::piano(),
        other => return Err(Failure::Usage(format!("unknown preset {other:?} (sc09 or piano)"))),
    };
    let path = need(cfg.input.clone(), "in")?;
    let (signal, sr) = tfrep::read_wav(&path)?;
    let stft_cfg = StftConfig { sample_rate: sr, ..stft_cfg };
    let spec = tfrep::stft(&signal, &stft_cfg)?;
    println!("{} samples at {sr} Hz → grid {:?}", signal.len(), spec.grid.shape());
    let enc = tfrep::encode(&signal, &stft_cfg)?;
    println!("after Nyquist truncation → grid {:?}", enc.grid.shape());
    let mut ok = true;
    if cfg.roundtrip {
        let back = tfrep::decode(&enc, signal.len())?;
        let err = signal.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ok = err < 1e-9;
        println!("round trip max abs error {err:.3e} ({})", if ok { "within 1e-9" } else { "above 1e-9" });
    }
    if let Some(out) = &cfg.out {
        tfrep::write_spcg(out, &enc)?;
        println!("wrote {}", out.display());
    }
    Ok(ok)
}

#[derive(Serialize, Deserialize)]
struct TrainRunConfig {
    out: PathBuf,
    gan: GanConfig,
}

fn run_train(common: Common, steps: Option<usize>, conditional: bool, batch: Option<usize>, eval_every: Option<usize>) -> Res<bool> {
    let mut gan: GanConfig = load(common.config.as_deref())?;
    gan.seed = common.seed.unwrap_or(gan.seed);
    gan.steps = steps.unwrap_or(gan.steps);
    gan.conditional |= conditional;
    gan.batch = batch.unwrap_or(gan.batch);
    gan.eval_every = eval_every.unwrap_or(gan.eval_every);
    let run = TrainRunConfig { out: common.out.clone().unwrap_or_else(|| PathBuf::from("out")), gan };
    show("train", &run, common.threads);
    let gan = &run.gan;
    gan.check()?;
    let data = SynthDataset::generate(&gan.data)?;
    let reference = NdbReference::fit(&data, gan.ndb_k, gan.ndb_alpha, gan.seed)?;
    let mut state = TrainState::new(gan)?;
    std::fs::create_dir_all(&run.out).map_err(ApolloError::from)?;
    let ckpt_path = run.out.join("ckpt");
    let metrics_path = run.out.join("metrics.jsonl");
    let resolved = serde_json::to_string_pretty(&run).expect("configs serialize");
    write_atomic(&run.out.join("config.json"), resolved.as_bytes())?;
    let mut log = String::new();
    let started = std::time::Instant::now();
    for step in 1..=gan.steps {
        let st = train_step(&mut state, gan, &data)?;
        let eval = step == gan.steps || (gan.eval_every > 0 && step % gan.eval_every == 0);
        let (ndb, jsd) = if eval {
            let (n, j) = reference.evaluate(&state.gen, &data, gan.eval_fakes, gan.seed ^ step as u64)?;
            (Some(n), Some(j))
        } else {
            (None, None)
        };
        let rec = MetricRecord { step: st.step, d_loss: st.d_loss, g_loss: st.g_loss, gp: st.gp, ndb, jsd };
        log.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        log.push('\n');
        if eval || step % 100 == 0 {
            println!(
                "step {step:>6}  d_loss {:>10.4}  g_loss {:>10.4}  gp {:>8.4}{}  ({:.1}s)",
                st.d_loss,
                st.g_loss,
                st.gp,
                match (ndb, jsd) {
                    (Some(n), Some(j)) => format!("  ndb {n}  jsd {j:.4}"),
                    _ => String::new(),
                },
                started.elapsed().as_secs_f64()
            );
            write_atomic(&metrics_path, log.as_bytes())?;
        }
    }
    write_atomic(&metrics_path, log.as_bytes())?;
    let ck = Checkpoint { config: gan.clone(), state, decode_scale: data.mean_scale };
    write_checkpoint(&ckpt_path, &ck)?;
    println!("checkpoint {} sha256 {}", ckpt_path.display(), apollo::ganlab::checkpoint_hash(&ck)?);
    Ok(true)
}

fn open_ckpt(path: Option<PathBuf>) -> Res<Checkpoint> {
    let p = need(path, "ckpt")?;
    let p = if p.is_dir() { p.join("ckpt") } else { p };
    Ok(read_checkpoint(&p)?)
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct GenerateConfig {
    seed: u64,
    ckpt: Option<PathBuf>,
    n: usize,
    label: Option<usize>,
    out: Option<PathBuf>,
}

fn run_generate(common: Common, ckpt: Option<PathBuf>, n: Option<usize>, label: Option<usize>) -> Res<bool> {
    let mut cfg: GenerateConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.ckpt = ckpt.or(cfg.ckpt);
    cfg.n = n.unwrap_or(cfg.n);
    cfg.label = label.or(cfg.label);
    cfg.out = common.out.clone().or(cfg.out);
    show("generate", &cfg, common.threads);
    let ck = open_ckpt(cfg.ckpt.clone())?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("samples"));
    if cfg.label.is_some() && !ck.state.gen.conditional() {
        return Err(Failure::Usage("--label needs a conditional checkpoint".into()));
    }
    if cfg.n == 0 {
        println!("nothing to generate");
        return Ok(true);
    }
    let labels = cfg.label.map(|l| vec![l; cfg.n]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data_cfg = &ck.config.data;
    let sigs = generate(&ck.state.gen, cfg.n, data_cfg, ck.decode_scale, labels.as_deref(), &mut rng)?;
    for (i, s) in sigs.iter().enumerate() {
        let p = out.join(format!("sample_{i:04}.wav"));
        tfrep::write_wav(&p, s, data_cfg.sample_rate)?;
    }
    println!("wrote {} waveforms of {} samples to {}", sigs.len(), data_cfg.clip_len, out.display());
    Ok(true)
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct MetricsConfig {
    seed: u64,
    ckpt: Option<PathBuf>,
    n: usize,
    k: usize,
    alpha: f64,
    out: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { seed: 0, ckpt: None, n: 512, k: 50, alpha: 0.05, out: None }
    }
}

fn run_metrics(common: Common, ckpt: Option<PathBuf>, n: Option<usize>, k: Option<usize>) -> Res<bool> {
    let mut cfg: MetricsConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.ckpt = ckpt.or(cfg.ckpt);
    cfg.n = n.unwrap_or(cfg.n);
    cfg.k = k.unwrap_or(cfg.k);
    cfg.out = common.out.clone().or(cfg.out);
    show("metrics", &cfg, common.threads);
    let ck = open_ckpt(cfg.ckpt.clone())?;
    let data = SynthDataset::generate(&ck.config.data)?;
    let reference = NdbReference::fit(&data, cfg.k, cfg.alpha, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigs = generate(&ck.state.gen, cfg.n, &data.cfg, ck.decode_scale, None, &mut rng)?;
    let bank = data.cfg.mel_bank()?;
    let feats = par_map(&sigs, common.threads, |s| mel_features(s, &data.cfg, &bank))
        .into_iter()
        .collect::<apollo::Result<Vec<_>>>()?;
    if feats.is_empty() {
        return Err(Failure::Usage("need at least one generated sample".into()));
    }
    let (ndb, jsd) = reference.score(&feats);
    let line = serde_json::json!({ "step": ck.state.step, "ndb": ndb, "jsd": jsd, "k": cfg.k, "n": cfg.n }).to_string();
    println!("{line}");
    if let Some(p) = &cfg.out {
        write_atomic(p, (line + "\n").as_bytes())?;
    }
    Ok(true)
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct InterpConfig {
    seed: u64,
    ckpt: Option<PathBuf>,
    steps: usize,
    label: Option<usize>,
    out: Option<PathBuf>,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self { seed: 0, ckpt: None, steps: 10, label: None, out: None }
    }
}

fn run_interp(common: Common, ckpt: Option<PathBuf>, steps: Option<usize>, label: Option<usize>) -> Res<bool> {
    let mut cfg: InterpConfig = load(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.ckpt = ckpt.or(cfg.ckpt);
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.label = label.or(cfg.label);
    cfg.out = common.out.clone().or(cfg.out);
    show("interp", &cfg, common.threads);
    let ck = open_ckpt(cfg.ckpt.clone())?;
    let gen = &ck.state.gen;
    let label = match (gen.conditional(), cfg.label) {
        (true, None) => Some(0),
        (false, Some(_)) => return Err(Failure::Usage("--label needs a conditional checkpoint".into())),
        (_, l) => l,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = sample_latent(2, gen.latent_dim(), &mut rng);
    let d = gen.latent_dim();
    let z0 = CTensor::vector(z.data()[..d].to_vec());
    let z1 = CTensor::vector(z.data()[d..].to_vec());
    let grids = interpolate(gen, &z0, &z1, cfg.steps, label, ck.config.data.n_classes)?;
    let proj = endpoint_projection(&grids);
    let finite = grids.iter().all(CTensor::is_finite);
    let monotone = proj.windows(2).all(|w| w[1] >= w[0]);
    for (i, (g, p)) in grids.iter().zip(&proj).enumerate() {
        println!("step {i:>3}  norm {:>10.5}  position {p:>8.5}", g.norm_sqr().sqrt());
    }
    println!("finite {finite}  monotone {monotone}");
    if let Some(out) = &cfg.out {
        let data_cfg = &ck.config.data;
        for (i, g) in grids.iter().enumerate() {
            let spec = Spectrogram {
                grid: g.clone(),
                cfg: data_cfg.stft(),
                nyquist_row: None,
                scale: ck.decode_scale,
                state: SpecState::Sqrt,
            };
            tfrep::write_spcg(&out.join(format!("interp_{i:03}.spcg")), &spec)?;
            tfrep::write_wav(&out.join(format!("interp_{i:03}.wav")), &grid_to_signal(g, data_cfg, ck.decode_scale)?, data_cfg.sample_rate)?;
        }
        println!("wrote {} spectrograms and waveforms to {}", grids.len(), out.display());
    }
    Ok(finite)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Verify { common, filter } => check_threads(&common).and_then(|_| run_verify(common, filter)),
        Cmd::Gradcheck { common, variant, max_degree, seeds } => {
            check_threads(&common).and_then(|_| run_gradcheck(common, variant, max_degree, seeds))
        }
        Cmd::Stft { common, input, preset, roundtrip } => {
            check_threads(&common).and_then(|_| run_stft(common, input, preset, roundtrip))
        }
        Cmd::Train { common, steps, conditional, batch, eval_every } => {
            check_threads(&common).and_then(|_| run_train(common, steps, conditional, batch, eval_every))
        }
        Cmd::Generate { common, ckpt, n, label } => check_threads(&common).and_then(|_| run_generate(common, ckpt, n, label)),
        Cmd::Metrics { common, ckpt, n, k } => check_threads(&common).and_then(|_| run_metrics(common, ckpt, n, k)),
        Cmd::Interp { common, ckpt, steps, label } => check_threads(&common).and_then(|_| run_interp(common, ckpt, steps, label)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
