use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use trf_deconv::crossrelation::{run_bmcflms, IterationRecord};
use trf_deconv::error::{Error, Result};
use trf_deconv::io::{self as fio, FrameFile};
use trf_deconv::metrics::{self, Compression};
use trf_deconv::missing::run_md_bmcflms;
use trf_deconv::phantom::{self, PhantomConfig, ScattererModel};
use trf_deconv::{ScaleEstimator, SolverConfig};

#[derive(Parser)]
#[command(name = "trf-deconv", version, about = "Blind deconvolution of multichannel RF frames")]
struct Cli {
    /// Worker threads for the solver (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame with ground truth.
    Phantom(PhantomArgs),
    /// Estimate TRFs from an RF frame.
    Deconv(Box<DeconvArgs>),
    /// NPM and resolution gain of an estimate.
    Metrics(MetricsArgs),
    /// Log-compressed envelope image of a frame.
    Image(ImageArgs),
    /// Convert a CSV file (one row per channel) to a frame file.
    ImportCsv(ImportArgs),
    /// Convert a frame file to CSV.
    ExportCsv(ExportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    length: usize,
    #[arg(long, default_value_t = 16)]
    psf_length: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Noise level in dB; omit for a noiseless frame.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pulse center frequency in cycles per sample.
    #[arg(long, default_value_t = 0.25)]
    center_freq: f64,
    /// Fractional -6 dB bandwidth of the pulse.
    #[arg(long, default_value_t = 0.6)]
    bandwidth: f64,
    /// Fraction of nonzero scatterers; omit for dense speckle.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, default_value_t = 40e6)]
    sample_rate: f64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for trf.rff, psf.rff, full.rff and clean.rff.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct DeconvArgs {
    #[arg(long)]
    input: PathBuf,
    /// Estimated TRFs, one channel per row.
    #[arg(long)]
    out: PathBuf,
    /// JSONL iteration log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON solver settings; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// True TRFs, adds NPM to the log.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Where to write the PSF estimate (missing-data mode only).
    #[arg(long)]
    psf_out: Option<PathBuf>,
    /// Where to write the synthesized tail (missing-data mode only).
    #[arg(long)]
    missing_out: Option<PathBuf>,
    #[arg(long)]
    missing_data: bool,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    md_max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lateral_block: Option<usize>,
    #[arg(long)]
    psf_len: Option<usize>,
    #[arg(long)]
    target_delay: Option<usize>,
    #[arg(long, value_enum)]
    scale_estimator: Option<ScaleArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    RatioMean,
    LeastSquares,
}

#[derive(Args)]
struct MetricsArgs {
    /// True TRFs; required for NPM.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    estimate: PathBuf,
    /// Original RF frame; required for resolution gain.
    #[arg(long)]
    rf: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImageArgs {
    #[arg(long)]
    input: PathBuf,
    /// `.pgm` for a 16-bit image, anything else for CSV.
    #[arg(long)]
    out: PathBuf,
    /// Compression constant `c`, or `auto`.
    #[arg(long, default_value = "auto")]
    compression: String,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parse samples as 16-bit signed integers.
    #[arg(long)]
    int16: bool,
    #[arg(long, default_value_t = 40e6)]
    sample_rate: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Deconv(a) => cmd_deconv(*a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Image(a) => cmd_image(a),
        Command::ImportCsv(a) => cmd_import(a),
        Command::ExportCsv(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let config = PhantomConfig {
        channels: a.channels,
        len: a.length,
        psf_len: a.psf_length,
        blocks: a.blocks,
        center_freq: a.center_freq,
        bandwidth: a.bandwidth,
        scatterers: match a.density {
            Some(density) => ScattererModel::Sparse { density },
            None => ScattererModel::Dense,
        },
        snr_db: a.snr,
        sample_rate: a.sample_rate,
        seed: a.seed,
        ..Default::default()
    };
    let gt = phantom::generate(&config)?;
    fio::write_frame(&a.out, &gt.noisy)?;
    if let Some(dir) = &a.truth {
        fs::create_dir_all(dir)?;
        let rate = a.sample_rate;
        fio::write_frame_file(&dir.join("trf.rff"), &FrameFile::new(gt.trfs.clone(), rate)?)?;
        fio::write_frame_file(&dir.join("psf.rff"), &FrameFile::new(gt.block_psfs.clone(), rate)?)?;
        fio::write_frame_file(&dir.join("full.rff"), &FrameFile::new(gt.full.clone(), rate)?)?;
        fio::write_frame(&dir.join("clean.rff"), &gt.noiseless)?;
    }
    println!(
        "phantom: {} channels x {} samples, pulse {} samples, {} -> {}",
        a.channels,
        a.length,
        a.psf_length,
        a.snr.map_or("noiseless".to_string(), |s| format!("{s} dB SNR")),
        a.out.display()
    );
    Ok(())
}

fn solver_config(a: &DeconvArgs) -> Result<SolverConfig> {
    let mut c: SolverConfig = match &a.config {
        Some(p) => serde_json::from_reader(BufReader::new(fio::open(p)?))?,
        None => SolverConfig::default(),
    };
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    take!(blocks, max_iters, md_max_iters, tol, xi, rho, gamma, alpha1, alpha2, delta,
          lateral_block, psf_len, target_delay, seed);
    if let Some(s) = a.scale_estimator {
        c.scale_estimator = match s {
            ScaleArg::RatioMean => ScaleEstimator::RatioMean,
            ScaleArg::LeastSquares => ScaleEstimator::LeastSquares,
        };
    }
    c.missing_data |= a.missing_data;
    c.validate()?;
    Ok(c)
}

fn cmd_deconv(a: DeconvArgs) -> Result<()> {
    let config = solver_config(&a)?;
    let frame = fio::read_frame(&a.input)?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| fio::read_frame_file(p).map(|f| f.channels))
        .transpose()?;
    let params = config.constraint()?;
    info!("bMCFLMS on {} x {} frame, {} blocks", frame.channels(), frame.len(), config.blocks);
    let first = run_bmcflms(&frame, &config, Some(&params), truth.as_deref())?;
    let mut log: Vec<IterationRecord> = first.log;
    let mut estimate = first.estimate;
    if config.missing_data {
        info!("missing-data refinement");
        let md = run_md_bmcflms(&frame, &config, Some(&estimate), truth.as_deref())?;
        log.extend(md.run.log);
        estimate = md.run.estimate;
        if let Some(p) = &a.psf_out {
            let f = FrameFile::new(vec![md.psf.samples().to_vec()], frame.sample_rate())?;
            fio::write_frame_file(p, &f)?;
        }
        if let Some(p) = &a.missing_out {
            let f = FrameFile::new(md.missing.tails().to_vec(), frame.sample_rate())?;
            fio::write_frame_file(p, &f)?;
        }
    } else if a.psf_out.is_some() || a.missing_out.is_some() {
        return Err(Error::InvalidArgument(
            "--psf-out and --missing-out need --missing-data".into(),
        ));
    }
    let trfs = (0..estimate.channels()).map(|k| estimate.channel(k)).collect();
    let out = FrameFile::new(trfs, frame.sample_rate())?;
    fio::write_frame_file(&a.out, &out)?;
    if let Some(p) = &a.log {
        let mut w = BufWriter::new(fio::create(p)?);
        fio::write_jsonl(&mut w, &log)?;
        w.flush()?;
    }
    match log.last() {
        Some(r) => println!(
            "deconv: {} iterations, final cost {:e}{}",
            log.len(),
            r.cost,
            r.npm.map_or(String::new(), |n| format!(", NPM {n:.3} dB"))
        ),
        None => println!("deconv: no iterations run"),
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    npm_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g5: Option<metrics::RgReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g10: Option<metrics::RgReport>,
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    if a.truth.is_none() && a.rf.is_none() {
        return Err(Error::InvalidArgument(
            "nothing to compute: NPM needs --truth, resolution gain needs --rf".into(),
        ));
    }
    let est = fio::read_frame_file(&a.estimate)?.channels;
    let mut report = MetricsReport {
        npm_db: None,
        g5: None,
        g10: None,
    };
    if let Some(p) = &a.truth {
        let truth = fio::read_frame_file(p)?.channels;
        report.npm_db = Some(npm_over_estimate(&truth, &est)?);
    }
    if let Some(p) = &a.rf {
        let rf = fio::read_frame_file(p)?.channels;
        report.g5 = Some(metrics::resolution_gain(&rf, &est, 5.0)?);
        report.g10 = Some(metrics::resolution_gain(&rf, &est, 10.0)?);
    }
    if let Some(n) = report.npm_db {
        println!("NPM  = {n:.3} dB");
    }
    if let (Some(g5), Some(g10)) = (&report.g5, &report.g10) {
        println!("G_5  = {:.4}", g5.gain);
        println!("G_10 = {:.4}", g10.gain);
    }
    if let Some(p) = &a.out {
        let mut w = BufWriter::new(fio::create(p)?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

/// NPM over the samples the estimate covers; the solver drops the
/// `L mod B` trailing samples.
fn npm_over_estimate(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::InvalidArgument(format!(
            "truth has {} channels, estimate {}",
            truth.len(),
            est.len()
        )));
    }
    let span = est[0].len();
    if truth[0].len() < span {
        return Err(Error::InvalidArgument(format!(
            "truth has {} samples, estimate {span}",
            truth[0].len()
        )));
    }
    let h: Vec<f64> = truth.iter().flat_map(|c| c[..span].iter().copied()).collect();
    let e: Vec<f64> = est.iter().flatten().copied().collect();
    Ok(metrics::npm(&h, &e)?.value)
}

fn cmd_image(a: ImageArgs) -> Result<()> {
    let data = fio::read_frame_file(&a.input)?.channels;
    let compression = if a.compression == "auto" {
        Compression::Auto
    } else {
        Compression::Fixed(a.compression.parse().map_err(|_| {
            Error::InvalidArgument(format!("bad compression {:?}", a.compression))
        })?)
    };
    let img = metrics::envelope_log_image(&data, compression)?;
    if is_pgm(&a.out) {
        fio::write_pgm(&a.out, &img.pixels)?;
    } else {
        fio::write_csv(&a.out, &img.pixels)?;
    }
    println!("image: c = {:e} -> {}", img.c, a.out.display());
    Ok(())
}

fn is_pgm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn cmd_import(a: ImportArgs) -> Result<()> {
    let rows = if a.int16 {
        fio::read_csv_i16(&a.input)?
    } else {
        fio::read_csv(&a.input)?
    };
    fio::write_frame_file(&a.out, &FrameFile::new(rows, a.sample_rate)?)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    fio::write_csv(&a.out, &fio::read_frame_file(&a.input)?.channels)
}
