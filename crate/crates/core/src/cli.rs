//! Command-line front end. [`run`] parses arguments, executes one command
//! and returns the process exit code: 0 on success, 1 on usage errors,
//! 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::acca::Acca;
use crate::error::{Error, Result};
use crate::evalkit::ablation::{self, Suite};
use crate::evalkit::{self, PairSet, SynthSpec};
use crate::io::{self, Depth};
use crate::pyramid::{CodecMode, PyramidStack};
use crate::tensor::{Tape, Tensor};
use crate::training::{self, Phase, TrainConfig};
use crate::wcca::{self, WccaConfig};
use crate::weights::WeightStore;

pub const ACCA_FILE: &str = "acca.fdw";
pub const LDRM_FILE: &str = "ldrm.fdw";
pub const CONFIG_FILE: &str = "config.json";
pub const BANDS_MANIFEST: &str = "bands.json";

#[derive(Parser, Debug)]
#[command(
    name = "freqdis",
    version,
    about = "Frequency-disentangled low-light image enhancement"
)]
pub struct Cli {
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    pub single_thread: bool,

    /// Worker thread cap.
    #[arg(long, global = true, env = "FREQDIS_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split an image into Laplace pyramid bands.
    Decompose(DecomposeArgs),
    /// Rebuild an image from a band directory written by `decompose`.
    Reconstruct(ReconstructArgs),
    /// Apply the coarse colour and illumination model only.
    EnhanceCoarse(EnhanceCoarseArgs),
    /// Full coarse-then-fine enhancement.
    Enhance(EnhanceArgs),
    /// Train one phase on a paired directory.
    Train(TrainArgs),
    /// Score trained weights on a paired directory.
    Eval(EvalArgs),
    /// Write a synthetic paired low-light set.
    Synth(SynthArgs),
    /// Run an ablation suite over several seeds.
    Ablate(AblateArgs),
    /// Print operation counts and parameter budgets.
    Bench(BenchArgs),
    /// Print the configuration document.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = crate::pyramid::DEFAULT_LEVELS)]
    pub levels: usize,
    #[arg(long, default_value = "exact")]
    pub mode: CodecMode,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Directory holding `bands.json` and the `.f32` band files.
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnhanceCoarseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Model configuration; defaults to `config.json` beside the weights, then built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub acca: PathBuf,
    #[arg(long)]
    pub ldrm: PathBuf,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the coarse result here.
    #[arg(long)]
    pub coarse_output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub phase: Phase,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Paired directory with `low/` and `gt/`.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Coarse weights for the fine or joint phase; defaults to `<out>/acca.fdw`.
    #[arg(long)]
    pub acca: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding `acca.fdw` and `ldrm.fdw`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub acca: Option<PathBuf>,
    #[arg(long)]
    pub ldrm: Option<PathBuf>,
    /// Score the coarse model alone.
    #[arg(long)]
    pub coarse_only: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Degrade these images instead of procedural ones.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub suite: SuiteArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Paired directory; a synthetic set is generated when absent.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Leading pairs used for training; the rest are the test split.
    #[arg(long, default_value_t = 160)]
    pub train_count: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    Li,
    K,
    Alpha,
    Freeze,
    All,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(value_enum, default_value = "all")]
    pub target: BenchTarget,
    #[arg(long, default_value_t = 256)]
    pub h: usize,
    #[arg(long, default_value_t = 256)]
    pub w: usize,
    #[arg(long, default_value_t = 16)]
    pub c: usize,
    #[arg(long, default_value_t = 8)]
    pub s: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchTarget {
    Wcca,
    Params,
    All,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Print every key with its default value.
    #[arg(long)]
    pub dump: bool,
    /// Validate and print this file with defaults filled in.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                use clap::CommandFactory;
                eprintln!("\n{}", Cli::command().render_help());
            }
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = if cli.single_thread {
        Some(1)
    } else {
        cli.threads
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n.max(1));
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(Error::usage(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("freqdis: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Decompose(a) => decompose(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::EnhanceCoarse(a) => enhance_coarse(a),
        Command::Enhance(a) => enhance(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
        Command::Config(a) => config(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Explicit config file, else `config.json` beside `weights`, else defaults.
pub fn resolve_config(explicit: Option<&Path>, weights: Option<&Path>) -> Result<TrainConfig> {
    let path = explicit.map(Path::to_path_buf).or_else(|| {
        weights
            .and_then(Path::parent)
            .map(|d| d.join(CONFIG_FILE))
            .filter(|p| p.is_file())
    });
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            TrainConfig::from_json(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct BandEntry {
    pub file: String,
    pub preview: String,
    pub shape: Vec<usize>,
    /// Band-pass bands are shown with a +0.5 offset in the preview.
    pub signed: bool,
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct BandManifest {
    pub levels: usize,
    pub mode: CodecMode,
    pub bands: Vec<BandEntry>,
}

/// Writes `band_k.f32` (little-endian, row-major `N×C×h×w`), an 8-bit
/// `band_k.png` preview and `bands.json`.
pub fn write_bands(stack: &PyramidStack<f32>, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let k_max = stack.levels();
    let mut entries = Vec::new();
    for (i, band) in stack.bands().iter().enumerate() {
        let k = i + 1;
        let signed = k < k_max;
        let file = format!("band_{k}.f32");
        let bytes: Vec<u8> = band.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&file), bytes).map_err(|e| Error::io(dir.join(&file), e))?;
        let preview = format!("band_{k}.png");
        let shown = if signed {
            band.map(|v| v + 0.5)
        } else {
            band.clone()
        };
        io::save_image(&shown, dir.join(&preview), Depth::Eight)?;
        entries.push(BandEntry {
            file,
            preview,
            shape: band.shape().to_vec(),
            signed,
        });
    }
    write_json(
        &dir.join(BANDS_MANIFEST),
        &BandManifest {
            levels: k_max,
            mode: stack.mode(),
            bands: entries,
        },
    )
}

pub fn read_bands(dir: &Path) -> Result<PyramidStack<f32>> {
    let mpath = dir.join(BANDS_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: BandManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let bands = manifest
        .bands
        .iter()
        .map(|b| {
            let path = dir.join(&b.file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Format(format!(
                    "{}: truncated float data",
                    path.display()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(&b.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    if bands.len() != manifest.levels {
        return Err(Error::Format(format!(
            "{}: {} bands listed, levels = {}",
            mpath.display(),
            bands.len(),
            manifest.levels
        )));
    }
    PyramidStack::new(bands, manifest.mode)
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let image = io::load_image(&a.input)?;
    let stack = PyramidStack::decompose(&image, a.levels, a.mode)?;
    write_bands(&stack, &a.out_dir)?;
    println!("wrote {} bands to {}", a.levels, a.out_dir.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let image = read_bands(&a.in_dir)?.reconstruct()?;
    io::save_image(&image, &a.output, Depth::Eight)
}

/// Reflect-pads to a multiple of `unit`, applies `f`, crops back.
pub fn padded<F>(image: &Tensor<f32>, unit: usize, f: F) -> Result<Tensor<f32>>
where
    F: FnOnce(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    let (_, _, h, w) = image.dims4()?;
    let (ph, pw) = (h.next_multiple_of(unit) - h, w.next_multiple_of(unit) - w);
    if ph == 0 && pw == 0 {
        return f(image);
    }
    f(&image.pad_reflect(ph, pw)?)?.crop(0, 0, h, w)
}

fn enhance_coarse(a: EnhanceCoarseArgs) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), Some(&a.weights))?;
    let acca = Acca::new(cfg.acca.clone())?;
    let weights = WeightStore::<f32>::load(&a.weights)?;
    let image = io::load_image(&a.input)?;
    let out = padded(&image, cfg.acca.wcca.window, |x| {
        let mut tape = Tape::new();
        let p = weights.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let t = acca.forward(&mut tape, &p, xv)?;
        Ok(tape.value(t.out).clone())
    })?;
    io::save_image(&out, &a.output, Depth::Eight)
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), Some(&a.ldrm))?;
    if let Some(k) = a.levels {
        cfg.levels = k;
    }
    let pipe = training::pipeline(
        &cfg,
        WeightStore::load(&a.acca)?,
        WeightStore::load(&a.ldrm)?,
    )?;
    let image = io::load_image(&a.input)?;
    let unit = training::conforming_unit(cfg.levels, cfg.acca.wcca.window);
    let mut coarse = None;
    let out = padded(&image, unit, |x| {
        let (y, c) = pipe.run(x)?;
        coarse = Some(c);
        Ok(y)
    })?;
    io::save_image(&out, &a.output, Depth::Eight)?;
    if let (Some(path), Some(c)) = (a.coarse_output, coarse) {
        let (_, _, h, w) = image.dims4()?;
        io::save_image(&c.crop(0, 0, h, w)?, path, Depth::Eight)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    phase: Phase,
    steps: usize,
    first_loss: f64,
    last_loss: f64,
    notes: &'a [String],
    data_fingerprint: String,
    config: &'a TrainConfig,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), None)?;
    cfg.phase = a.phase;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = PairSet::load(&a.data_dir)?;
    create_dir(&a.out)?;
    let acca_path = a.acca.clone().unwrap_or_else(|| a.out.join(ACCA_FILE));
    let history = match cfg.phase {
        Phase::Acca => {
            let run = training::train_acca(&data, &cfg)?;
            run.weights.save(a.out.join(ACCA_FILE))?;
            run.history
        }
        Phase::Ldrm => {
            let acca = load_required(&acca_path)?;
            let run = training::train_ldrm(&data, Some(&acca), &cfg)?;
            run.ldrm_weights.save(a.out.join(LDRM_FILE))?;
            if !cfg.freeze_acca {
                run.acca_weights.save(a.out.join("acca_joint.fdw"))?;
            }
            run.history
        }
        Phase::EndToEnd => {
            let acca = if acca_path.is_file() {
                Some(WeightStore::load(&acca_path)?)
            } else {
                None
            };
            let run = training::train_end_to_end(&data, acca.as_ref(), &cfg)?;
            run.acca_weights.save(a.out.join("acca_e2e.fdw"))?;
            run.ldrm_weights.save(a.out.join("ldrm_e2e.fdw"))?;
            run.history
        }
    };
    let tag = match cfg.phase {
        Phase::Acca => "acca",
        Phase::Ldrm => "ldrm",
        Phase::EndToEnd => "e2e",
    };
    history.write_csv(a.out.join(format!("history_{tag}.csv")))?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    let summary = TrainSummary {
        phase: cfg.phase,
        steps: history.rows.len(),
        first_loss: history.rows.first().map_or(f64::NAN, |r| r.l_total),
        last_loss: history.rows.last().map_or(f64::NAN, |r| r.l_total),
        notes: &history.notes,
        data_fingerprint: data.fingerprint(),
        config: &cfg,
    };
    write_json(&a.out.join(format!("report_{tag}.json")), &summary)?;
    for note in &history.notes {
        eprintln!("note: {note}");
    }
    println!(
        "{tag}: {} steps, loss {:.5} -> {:.5}",
        summary.steps, summary.first_loss, summary.last_loss
    );
    Ok(())
}

fn load_required(path: &Path) -> Result<WeightStore<f32>> {
    if !path.is_file() {
        return Err(Error::config(format!(
            "missing weight file {}",
            path.display()
        )));
    }
    WeightStore::load(path)
}

fn eval(a: EvalArgs) -> Result<()> {
    let pick = |explicit: &Option<PathBuf>, name: &str| {
        explicit
            .clone()
            .or_else(|| a.weights.as_ref().map(|d| d.join(name)))
            .ok_or_else(|| {
                Error::usage(format!(
                    "pass --weights DIR or --{}",
                    name.trim_end_matches(".fdw")
                ))
            })
    };
    let acca_path = pick(&a.acca, ACCA_FILE)?;
    let cfg = resolve_config(a.config.as_deref(), Some(&acca_path))?;
    let pairs = PairSet::load(&a.pairs)?;
    let acca_w = load_required(&acca_path)?;
    let report = if a.coarse_only {
        let acca = Acca::new(cfg.acca.clone())?;
        evalkit::evaluate(&pairs, |x| {
            padded(x, cfg.acca.wcca.window, |x| {
                Ok(acca.infer(&acca_w, x)?.map(|v| v.clamp(0.0, 1.0)))
            })
        })?
    } else {
        let ldrm_w = load_required(&pick(&a.ldrm, LDRM_FILE)?)?;
        let pipe = training::pipeline(&cfg, acca_w, ldrm_w)?;
        let unit = training::conforming_unit(cfg.levels, cfg.acca.wcca.window);
        evalkit::evaluate(&pairs, |x| padded(x, unit, |x| Ok(pipe.run(x)?.0)))?
    };
    if let Some(path) = &a.report {
        report.write_csv(path)?;
    }
    println!(
        "{} pairs: PSNR {:.3} dB, SSIM {:.4} (data {})",
        report.rows.len(),
        report.psnr_mean,
        report.ssim_mean,
        &report.fingerprint[..12]
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        ..SynthSpec::default()
    };
    let set = match &a.clean_dir {
        Some(dir) => PairSet::from_clean_dir(dir, &spec)?,
        None => PairSet::synthesize(&spec, a.count, a.size)?,
    };
    set.save(&a.out, Some(&spec))?;
    println!(
        "wrote {} pairs to {} ({})",
        set.len(),
        a.out.display(),
        &set.fingerprint()[..12]
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = resolve_config(a.config.as_deref(), None)?;
    let data = match &a.data_dir {
        Some(d) => PairSet::load(d)?,
        None => PairSet::synthesize(&SynthSpec::default(), a.count, a.size)?,
    };
    if a.train_count == 0 || a.train_count >= data.len() {
        return Err(Error::usage(format!(
            "--train-count must be in 1..{}",
            data.len()
        )));
    }
    let (train, test) = data.split(a.train_count);
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::Li => vec![Suite::Li],
        SuiteArg::K => vec![Suite::K],
        SuiteArg::Alpha => vec![Suite::Alpha],
        SuiteArg::Freeze => vec![Suite::Freeze],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    for suite in suites {
        let trained = ablation::train_suite(suite, &base, &train, &a.seeds, |m| {
            eprintln!("[{}] {m}", suite.name())
        })?;
        let table = ablation::ablation_report(suite, &base, &test, &a.seeds, &trained)?;
        table.write(&a.out)?;
        print!("{}", table.to_csv());
        for c in &table.checks {
            let tag = if c.holds { "ok" } else { "FLAG" };
            println!("{tag}: {} ({})", c.claim, c.detail);
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if matches!(a.target, BenchTarget::Wcca | BenchTarget::All) {
        let cfg = WccaConfig {
            channels: a.c,
            window: a.s,
            sigmoid_gate: false,
        };
        cfg.validate()?;
        let analytic = wcca::flops_analytic(a.h as u64, a.w as u64, a.c as u64, a.s as u64);
        let empirical = wcca::flops_empirical(a.h, a.w, cfg)?;
        println!("wcca {}x{} c={} s={}", a.h, a.w, a.c, a.s);
        println!("  analytic  {analytic}");
        println!("  empirical {empirical}");
        println!("  ratio     {:.4}", empirical as f64 / analytic as f64);
    }
    if matches!(a.target, BenchTarget::Params | BenchTarget::All) {
        let cfg = resolve_config(a.config.as_deref(), None)?;
        let acca = Acca::new(cfg.acca.clone())?;
        let aw: WeightStore<f32> = acca.init(&mut rand::rng());
        let net = crate::ldrm::BackboneRegistry::<f32>::with_defaults()
            .build(&cfg.ldrm.backbone, cfg.backbone_spec())?;
        let lw = net.init(&mut rand::rng());
        println!("acca params {}", aw.param_count());
        println!(
            "ldrm params {} (backbone `{}`, levels {})",
            lw.param_count(),
            cfg.ldrm.backbone,
            cfg.levels
        );
    }
    Ok(())
}

fn config(a: ConfigArgs) -> Result<()> {
    let cfg = match (&a.check, a.dump) {
        (Some(path), _) => resolve_config(Some(path), None)?,
        (None, true) => TrainConfig::default(),
        (None, false) => return Err(Error::usage("config needs --dump or --check FILE")),
    };
    println!("{}", cfg.to_json());
    Ok(())
}
