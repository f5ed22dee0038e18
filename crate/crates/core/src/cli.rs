//! Command-line front end: `synth`, `denoise` and `bench`.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageGrid};
use crate::init::{initialize, NoiseKind};
use crate::metrics::{psnr, ssim};
use crate::noise::{synthesize, CorruptionMask, NoiseSpec};
use crate::solver::{denoise, BetaRule, GammaScope, SigmaRule, SolverConfig, ThetaRule, WeightRule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "RWE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rwe", version, about = "Mixed Gaussian and impulse noise removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a clean image with Gaussian plus impulse noise.
    Synth(SynthArgs),
    /// Restore a noisy image.
    Denoise(DenoiseArgs),
    /// Run a synth/denoise/score grid from a manifest.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Gaussian standard deviation on the 8-bit scale.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub spin: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rvin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Base name of the output files; defaults to the input file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Skip writing the label map.
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleName {
    Pareto,
    Rcsr,
    Ones,
    Oracle,
}

impl RuleName {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleName::Pareto => "pareto",
            RuleName::Rcsr => "rcsr",
            RuleName::Ones => "ones",
            RuleName::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeName {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaName {
    Adaptive,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaName {
    Fixed,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaName {
    Hold,
    Weighted,
}

/// Solver overrides shared by `denoise` flags and manifest sections.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// RCSR width on the unit scale; defaults to 10 sigma^2.
    #[arg(long)]
    pub xi: Option<f64>,
    /// Patch side (odd).
    #[arg(long)]
    pub patch: Option<usize>,
    /// Patches per group.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Search window side (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Data-step penalty; with `--beta-rule noise` the product beta*sigma^2.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub beta_rule: Option<BetaName>,
    /// Keep the initial noise level or re-estimate it every outer iteration.
    #[arg(long, value_enum)]
    pub sigma_rule: Option<SigmaName>,
    /// Split-Bregman steps per outer iteration.
    #[arg(long)]
    pub inner: Option<usize>,
    /// Outer iterations.
    #[arg(long)]
    pub outer: Option<usize>,
    #[arg(long, value_enum)]
    pub gamma_scope: Option<ScopeName>,
    /// Singular-value threshold rule.
    #[arg(long, value_enum)]
    pub theta_rule: Option<ThetaName>,
    /// Threshold factor (default 1 for adaptive, 2*sqrt(2) for uniform).
    #[arg(long)]
    pub theta_factor: Option<f64>,
    /// Exponent of sigma for the uniform rule.
    #[arg(long)]
    pub theta_power: Option<f64>,
}

impl SolverOptions {
    pub fn to_config(&self, rule: RuleName, mask: Option<CorruptionMask>) -> Result<SolverConfig> {
        let mut cfg = SolverConfig::default();
        if let Some(v) = self.patch {
            cfg.patch_side = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.window {
            cfg.search_window = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(r) = self.beta_rule {
            cfg.beta_rule = match r {
                BetaName::Fixed => BetaRule::Fixed,
                BetaName::Noise => BetaRule::NoiseScaled,
            };
        }
        if let Some(r) = self.sigma_rule {
            cfg.sigma_rule = match r {
                SigmaName::Hold => SigmaRule::Hold,
                SigmaName::Weighted => SigmaRule::Weighted,
            };
        }
        if let Some(v) = self.inner {
            cfg.inner_iters = v;
        }
        if let Some(v) = self.outer {
            cfg.outer_iters = v;
        }
        if let Some(s) = self.gamma_scope {
            cfg.gamma_scope = match s {
                ScopeName::Local => GammaScope::Local,
                ScopeName::Global => GammaScope::Global,
            };
        }
        cfg.theta = match self.theta_rule.unwrap_or(ThetaName::Adaptive) {
            ThetaName::Adaptive => ThetaRule::Adaptive {
                factor: self.theta_factor.unwrap_or(1.0),
            },
            ThetaName::Uniform => ThetaRule::Uniform {
                factor: self.theta_factor.unwrap_or(2.0 * std::f64::consts::SQRT_2),
                sigma_power: self.theta_power.unwrap_or(2.0),
            },
        };
        cfg.weight_rule = match rule {
            RuleName::Pareto => WeightRule::Pareto,
            RuleName::Rcsr => WeightRule::Rcsr { xi: self.xi },
            RuleName::Ones => WeightRule::Ones,
            RuleName::Oracle => WeightRule::Oracle(
                mask.ok_or_else(|| Error::Config("the oracle rule needs a corruption mask".into()))?,
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Restored image path (format from the extension).
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference for PSNR/SSIM scoring.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Impulse family: spin, rvin or both.
    #[arg(long)]
    pub kind: String,
    #[arg(long, value_enum, default_value_t = RuleName::Pareto)]
    pub weight_rule: RuleName,
    /// Label maps for the oracle rule, one per channel.
    #[arg(long)]
    pub mask: Vec<PathBuf>,
    /// Write the pre-filter estimate and stop.
    #[arg(long)]
    pub init_only: bool,
    /// Per-iteration report CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverOptions,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML manifest.
    pub manifest: PathBuf,
    /// Results CSV; overrides the manifest's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bench grid description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Results CSV path, relative to the manifest.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Weight rules to compare; defaults to Pareto only.
    #[serde(default)]
    pub rules: Vec<RuleName>,
    /// Noise kind override; inferred from the impulse ratios otherwise.
    #[serde(default)]
    pub kind: Option<String>,
    pub images: ImagesSection,
    pub noise: NoiseSection,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesSection {
    /// Clean images, relative to the manifest.
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: Vec<f64>,
    #[serde(default = "zero_list")]
    pub spin: Vec<f64>,
    #[serde(default = "zero_list")]
    pub rvin: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn zero_list() -> Vec<f64> {
    vec![0.0]
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.images.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest image missing"),
                ));
            }
        }
        if let Some(o) = &mut m.out {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        if m.rules.is_empty() {
            m.rules.push(RuleName::Pareto);
        }
        if m.images.paths.is_empty() || m.noise.sigma.is_empty() || m.noise.spin.is_empty() || m.noise.rvin.is_empty() {
            return Err(Error::Config("manifest grid has an empty axis".into()));
        }
        Ok(m)
    }
}

/// One row of the bench table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub image: String,
    pub sigma: f64,
    pub s: f64,
    pub r: f64,
    pub rule: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
    pub error: String,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// `<name>_s{sigma}_sp{s}_rv{r}_seed{k}`.
pub fn synth_basename(name: &str, spec: &NoiseSpec) -> String {
    format!(
        "{name}_s{}_sp{}_rv{}_seed{}",
        spec.sigma8, spec.spin_ratio, spec.rvin_ratio, spec.seed
    )
}

fn image_ext(grid: &ImageGrid) -> &'static str {
    if grid.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let spec = NoiseSpec::new(args.sigma, args.spin, args.rvin, args.seed)?;
    let clean = load_image(&args.input)?;
    let (noisy, mask) = synthesize(&clean, &spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let name = args.name.clone().unwrap_or_else(|| stem(&args.input));
    let base = synth_basename(&name, &spec);
    let out = args.out.join(format!("{base}.{}", image_ext(&noisy)));
    save_image(&noisy, &out)?;
    let mut written = vec![out.clone()];
    if !args.no_mask {
        for c in 0..mask.channels() {
            let suffix = if mask.channels() == 1 {
                "mask".to_string()
            } else {
                format!("mask_c{c}")
            };
            let p = args.out.join(format!("{base}_{suffix}.pgm"));
            save_image(&mask.to_grid(c), &p)?;
            written.push(p);
        }
    }
    println!(
        "name={name} sigma={} spin={} rvin={} seed={} out={}",
        spec.sigma8,
        spec.spin_ratio,
        spec.rvin_ratio,
        spec.seed,
        out.display()
    );
    Ok(written)
}

fn write_csv_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| Error::io(path, e))
}

pub fn cmd_denoise(args: &DenoiseArgs) -> Result<()> {
    let kind: NoiseKind = args.kind.parse()?;
    let noisy = load_image(&args.input)?;
    let reference = args.reference.as_ref().map(load_image).transpose()?;
    let mask = if args.mask.is_empty() {
        None
    } else {
        let planes = args
            .mask
            .iter()
            .map(|p| load_image(p).map(|g| g.into_planes().remove(0)))
            .collect::<Result<Vec<_>>>()?;
        Some(CorruptionMask::from_label_planes(&planes)?)
    };
    let cfg = args.solver.to_config(args.weight_rule, mask)?;

    if args.init_only {
        let x0 = initialize(&noisy, kind, &cfg.init)?;
        save_image(&x0, &args.out)?;
        if let Some(r) = &reference {
            println!("init psnr={:.4} ssim={:.4}", psnr(&x0, r)?, ssim(&x0, r)?);
        }
        return Ok(());
    }

    let (x, report) = denoise(&noisy, &cfg, kind, reference.as_ref())?;
    save_image(&x, &args.out)?;
    if let Some(p) = &args.report {
        write_csv_file(p, |w| report.write_csv(w))?;
    }
    for r in &report.iterations {
        let score = match (r.psnr, r.ssim) {
            (Some(p), Some(s)) => format!(" psnr={p:.4} ssim={s:.4}"),
            _ => String::new(),
        };
        println!(
            "iter={} sigma8={:.3} theta={:.5} E1={:.4e} E2={:.4e}{score}",
            r.iter,
            255.0 * r.sigma,
            r.theta,
            r.e1,
            r.e2
        );
    }
    if let (Some(p), Some(s)) = (report.init_psnr, report.init_ssim) {
        println!("init psnr={p:.4} ssim={s:.4}");
    }
    Ok(())
}

fn bench_cell(clean: &ImageGrid, spec: &NoiseSpec, rule: RuleName, manifest: &RunManifest) -> Result<(f64, f64)> {
    let (noisy, mask) = synthesize(clean, spec)?;
    let kind = match &manifest.kind {
        Some(k) => k.parse()?,
        None => NoiseKind::from_ratios(spec.spin_ratio, spec.rvin_ratio),
    };
    let cfg = manifest.solver.to_config(rule, Some(mask))?;
    let (x, _) = denoise(&noisy, &cfg, kind, None)?;
    Ok((psnr(&x, clean)?, ssim(&x, clean)?))
}

/// Run every (image, sigma, s, r, rule) cell of the manifest in order.
pub fn run_bench(manifest: &RunManifest) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for path in &manifest.images.paths {
        let clean = load_image(path)?;
        let image = stem(path);
        for &sigma in &manifest.noise.sigma {
            for &s in &manifest.noise.spin {
                for &r in &manifest.noise.rvin {
                    for &rule in &manifest.rules {
                        let start = Instant::now();
                        let outcome = NoiseSpec::new(sigma, s, r, manifest.noise.seed)
                            .and_then(|spec| bench_cell(&clean, &spec, rule, manifest));
                        let seconds = start.elapsed().as_secs_f64();
                        let (psnr, ssim, error) = match outcome {
                            Ok((p, q)) => (Some(p), Some(q), String::new()),
                            Err(e) => (None, None, e.to_string()),
                        };
                        rows.push(BenchRow {
                            image: image.clone(),
                            sigma,
                            s,
                            r,
                            rule: rule.as_str().into(),
                            psnr,
                            ssim,
                            seconds,
                            error,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<PathBuf> {
    let manifest = RunManifest::load(&args.manifest)?;
    let out = args
        .out
        .clone()
        .or_else(|| manifest.out.clone())
        .unwrap_or_else(|| PathBuf::from("bench.csv"));
    let rows = run_bench(&manifest)?;
    write_bench_csv(&rows, &out)?;
    for r in &rows {
        if !r.error.is_empty() {
            eprintln!("{} sigma={} s={} r={} {}: {}", r.image, r.sigma, r.s, r.r, r.rule, r.error);
        }
    }
    println!("{} rows written to {}", rows.len(), out.display());
    Ok(out)
}

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Config(_) | Error::InvalidImage(_) | Error::ImageTooSmall { .. } | Error::WindowTooSmall { .. } => {
            EXIT_USAGE
        }
        Error::PatchOutOfBounds { .. } | Error::Uncovered { .. } | Error::Shape(_) | Error::NonFinite(_) => {
            EXIT_NUMERICAL
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| ()),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Bench(a) => cmd_bench(a).map(|_| ()),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("rwe: {e}");
            exit_code(&e)
        }
    }
}
