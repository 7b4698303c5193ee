use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtscs::io::{load_image, read_checkpoint, read_tensor, save_png, write_checkpoint, write_tensor};
use mtscs::train::{evaluate, train, LogRecord};
use mtscs::{CsModel, Dataset, MeasurementFile, MtsError, Precision, Real, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "mtscs", version, about = "Multiscale tensor summation compressive sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train { config: PathBuf },
    /// Measure an image (PNG or tensor file) with a checkpoint's encoder.
    Encode {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Reconstruct from a measurement file. Writes PNG if the output ends in
    /// `.png`, otherwise a float tensor file.
    Decode {
        checkpoint: PathBuf,
        measurements: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Write the adjoint proxy instead of the refined reconstruction.
        #[arg(long)]
        proxy: bool,
    },
    /// PSNR/SSIM over every image in a directory: CSV on stdout, table on stderr.
    Eval {
        checkpoint: PathBuf,
        dir: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Adjoint, materialisation and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact parameter counts per module for a run configuration.
    Paramcount { config: PathBuf },
}

enum Failure {
    Lib(MtsError),
    Selftest(usize),
}

impl From<MtsError> for Failure {
    fn from(e: MtsError) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> (&'static str, u8) {
        match self {
            Failure::Lib(e) => match e {
                MtsError::Io { .. } => ("io", 3),
                MtsError::Config(_) => ("config", 4),
                MtsError::Format { .. } => ("format", 5),
                MtsError::Version { .. } => ("version", 6),
                MtsError::Shape(_) | MtsError::ModeMismatch { .. } | MtsError::SizeGuard { .. } => ("shape", 7),
                MtsError::Image { .. } => ("image", 8),
                MtsError::EmptyDataset => ("empty-dataset", 9),
                MtsError::NonFinite { .. } => ("non-finite", 10),
            },
            Failure::Selftest(_) => ("selftest", 11),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Selftest(n) => format!("{n} check(s) failed"),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: code=usage msg={}", one_line(&first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (name, code) = f.code();
            eprintln!("error: code={name} msg={}", one_line(&f.message()));
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg)?,
                Precision::F64 => run_train::<f64>(&cfg)?,
            }
        }
        Command::Encode {
            checkpoint,
            image,
            output,
        } => {
            let model: CsModel = read_checkpoint(&checkpoint)?;
            let img = read_image(&image, model.image_shape()[2])?;
            let y = model.sense(&img)?;
            MeasurementFile::new(model.encoder().geometry(), y)?.write(&output)?;
        }
        Command::Decode {
            checkpoint,
            measurements,
            output,
            proxy,
        } => {
            let model: CsModel = read_checkpoint(&checkpoint)?;
            let mf = MeasurementFile::<f64>::read(&measurements)?;
            mf.check_geometry(model.encoder().geometry())?;
            let (p, rec) = model.decode(&mf.data)?;
            let out = if proxy { p } else { rec };
            if is_png(&output) {
                save_png(&output, &out)?;
            } else {
                write_tensor(&output, &out)?;
            }
        }
        Command::Eval { checkpoint, dir, peak } => {
            let model: CsModel = read_checkpoint(&checkpoint)?;
            let data = Dataset::from_dir(&dir, model.image_shape()[2])?;
            let report = evaluate(&model, &data, peak)?;
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "image,psnr_db,ssim,proxy_psnr_db");
            for i in 0..report.names.len() {
                let _ = writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6}",
                    report.names[i], report.psnr[i], report.ssim[i], report.proxy_psnr[i]
                );
            }
            let _ = writeln!(
                out,
                "mean,{:.6},{:.6},{:.6}",
                report.mean_psnr, report.mean_ssim, report.mean_proxy_psnr
            );
            eprintln!("config {}  cr {:.6}", report.config_hash, report.cr);
            eprintln!("{:<32} {:>10} {:>8} {:>10}", "image", "PSNR", "SSIM", "proxy");
            for i in 0..report.names.len() {
                eprintln!(
                    "{:<32} {:>10.3} {:>8.4} {:>10.3}",
                    report.names[i], report.psnr[i], report.ssim[i], report.proxy_psnr[i]
                );
            }
            eprintln!(
                "{:<32} {:>10.3} {:>8.4} {:>10.3}",
                "mean", report.mean_psnr, report.mean_ssim, report.mean_proxy_psnr
            );
        }
        Command::Selftest { seed } => {
            let results = mtscs::selftest::run_all(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Err(Failure::Selftest(failed));
            }
        }
        Command::Paramcount { config } => {
            let cfg = RunConfig::load(&config)?;
            let model: CsModel = CsModel::init(&cfg.model, 0)?;
            let b = model.param_breakdown();
            println!("encoder {}", b.encoder);
            println!("adjoint_activation {}", b.adjoint_activation);
            for (i, n) in b.blocks.iter().enumerate() {
                println!("block{i} {n}");
            }
            println!("total {}", b.total());
        }
    }
    Ok(())
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_image(path: &Path, channels: usize) -> Result<Tensor, MtsError> {
    if is_png(path) {
        load_image(path, channels)
    } else {
        read_tensor(path)
    }
}

fn run_train<T: Real>(cfg: &RunConfig) -> Result<(), MtsError> {
    let channels = cfg.model.channels;
    let data = cfg.data.train.load(channels)?;
    let eval = cfg.data.eval.as_ref().map(|d| d.load(channels)).transpose()?;
    let mut log = match &cfg.output.log {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| MtsError::Io { path: p.clone(), source: e })?,
        ),
        None => None,
    };
    let mut write_err = None;
    let outcome = train::<T>(&cfg.model, &cfg.train, &data, eval.as_ref(), |rec: &LogRecord| {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(rec).expect("log record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (write_err, &cfg.output.log) {
        return Err(MtsError::Io { path: p.clone(), source: e });
    }
    write_checkpoint(&cfg.output.checkpoint, &outcome.model)?;
    let losses = outcome.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("trained {} steps: loss {first:.6} -> {last:.6}", losses.len());
    }
    if let Some(ev) = &eval {
        let r = evaluate(&outcome.model, ev, cfg.train.peak)?;
        eprintln!(
            "eval: psnr {:.3} dB  ssim {:.4}  proxy psnr {:.3} dB  cr {:.6}",
            r.mean_psnr, r.mean_ssim, r.mean_proxy_psnr, r.cr
        );
    }
    eprintln!("checkpoint written to {}", cfg.output.checkpoint.display());
    Ok(())
}
