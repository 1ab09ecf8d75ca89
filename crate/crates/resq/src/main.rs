//! Command-line front end.
//!
//! Artifacts in, artifacts out: models are directories with a `model.json`
//! manifest, clips are directories of `.rtf` tensors (or a single rank-4
//! stack), calibrations are JSON, reports are CSV, and policy maps are PGM.
//! Every command is deterministic given its arguments; `RESQ_THREADS` caps
//! the worker pool used by calibration and sweeps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use resq::calibration::{calibrate_model, CalibrationConfig};
use resq::engine::{
    run_sequence, ModelSpec, PrecisionMode, ResidualActQuant, RunMode, ScheduleConfig,
};
use resq::harness::{
    build_toy_model, experiment_policy_map, experiment_tradeoff, generate_clip, identity_model,
    load_clips, policy_summary_csv, save_clips, tradeoff_csv, Clip, ClipPattern,
    SyntheticClipSpec, TradeoffSpec,
};
use resq::model_io;
use resq::notation::{ActBitsSpec, PrecisionSpec, SchemeNotation};
use resq::pgm;
use resq::policy::PolicyConfig;
use resq::quantizer::Granularity;
use resq::rtf;
use resq::tensor::Tensor;
use resq::{Error, Result};

#[derive(Parser)]
#[command(
    name = "resq",
    version,
    about = "Fixed-point simulator for residual-quantized video inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips (frames + motion masks) under a directory.
    GenClips(GenClips),
    /// Build a toy convolutional model directory.
    BuildModel(BuildModel),
    /// Fit quantization parameters for a model on a clip corpus.
    Calibrate(Calibrate),
    /// Run one clip through the engine and write the per-frame cost report.
    Run(Run),
    /// Calibrate and run a grid of (scheme, period, mode) combinations.
    Sweep(Sweep),
    /// Dynamic-policy run over a corpus: PGM bit-width maps plus a summary.
    PolicyMap(PolicyMap),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match try_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn try_main(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::GenClips(args) => gen_clips(args),
        Command::BuildModel(args) => build_model(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::PolicyMap(args) => policy_map(args),
    }
}

/// Honor `RESQ_THREADS` before any parallel work starts.
fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("RESQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("RESQ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("could not size the thread pool: {e}")))
}

fn note_unused_seed(command: &str, seed: u64) {
    if seed != 0 {
        eprintln!("note: `resq {command}` is deterministic; --seed has no effect here");
    }
}

// ── gen-clips ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct GenClips {
    /// Output corpus directory (one clip_NNN subdirectory per clip).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "translating-square")]
    pattern: ClipPattern,
    /// Number of clips; clip i uses seed + i.
    #[arg(long, default_value_t = 4)]
    clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Pixels of motion per frame.
    #[arg(long, default_value_t = 1.0)]
    motion: f32,
    /// Additive Gaussian noise sigma (applied after motion masks are taken).
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gen_clips(args: GenClips) -> Result<()> {
    if args.clips == 0 {
        return Err(Error::Config("--clips must be at least 1".into()));
    }
    let mut clips = Vec::with_capacity(args.clips);
    for i in 0..args.clips {
        clips.push(generate_clip(&SyntheticClipSpec {
            pattern: args.pattern,
            channels: args.channels,
            height: args.height,
            width: args.width,
            length: args.frames,
            motion_px_per_frame: args.motion,
            noise_sigma: args.noise,
            seed: args.seed.wrapping_add(i as u64),
        })?);
    }
    save_clips(&args.out, &clips)?;
    println!(
        "wrote {} {} clip(s) of {} frames ({}x{}x{}) to {}",
        clips.len(),
        args.pattern,
        args.frames,
        args.channels,
        args.height,
        args.width,
        args.out.display()
    );
    Ok(())
}

// ── build-model ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct BuildModel {
    /// Output model directory (model.json plus one .rtf per layer).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Input channel count (must match the clips the model will consume).
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Channel count of every hidden/output layer.
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Square kernel size; must be odd (same padding).
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Build a 1x1 identity model over --channels instead (ignores depth,
    /// width, kernel, and seed).
    #[arg(long)]
    identity: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_model(args: BuildModel) -> Result<()> {
    let model = if args.identity {
        identity_model(args.channels)?
    } else {
        build_toy_model(args.depth, args.channels, args.width, args.kernel, args.seed)?
    };
    let manifest = model_io::save_model(&args.out, &model)?;
    println!(
        "wrote {}-layer model to {}",
        model.num_layers(),
        manifest.display()
    );
    Ok(())
}

// ── calibrate ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct Calibrate {
    /// Path to a model.json manifest.
    #[arg(long)]
    model: PathBuf,
    /// Clip corpus directory.
    #[arg(long)]
    clips: PathBuf,
    /// Keyframe precision, e.g. W8A8.
    #[arg(long)]
    keyframe_bits: PrecisionSpec,
    /// Residual precision, e.g. W8A4, or a pool like 'W8A{0,4,8}'.
    #[arg(long)]
    residual_bits: PrecisionSpec,
    /// Keyframe period used when gathering residual statistics.
    #[arg(long, default_value_t = 3)]
    period: usize,
    /// Cap on calibration samples per layer.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Line-search grid resolution.
    #[arg(long, default_value_t = 20)]
    grid: usize,
    /// Per-channel weight scales instead of per-tensor.
    #[arg(long)]
    per_channel_weights: bool,
    /// Output calibration JSON.
    #[arg(long)]
    out: PathBuf,
    /// Accepted for interface uniformity; calibration is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn calibrate(args: Calibrate) -> Result<()> {
    note_unused_seed("calibrate", args.seed);
    if matches!(args.keyframe_bits.act_bits, ActBitsSpec::Pool(_)) {
        return Err(Error::Config(
            "pools are only supported on the residual side; keyframes need a fixed bit-width"
                .into(),
        ));
    }
    let scheme = SchemeNotation {
        keyframe: args.keyframe_bits.clone(),
        residual: args.residual_bits.clone(),
    }
    .to_scheme(weight_granularity(args.per_channel_weights))?;
    let model = model_io::load_model(&args.model)?;
    let clips = load_clips(&args.clips)?;
    let frames: Vec<Vec<Tensor>> = clips.into_iter().map(|c| c.frames).collect();
    let config = CalibrationConfig::new(args.samples, args.grid, args.period)?;
    let calibrated = calibrate_model(&model, &frames, &config, &scheme)?;
    model_io::save_calibration(&args.out, &calibrated)?;
    println!(
        "calibrated {} layer(s) at {}|{} -> {}",
        calibrated.num_layers(),
        args.keyframe_bits,
        args.residual_bits,
        args.out.display()
    );
    Ok(())
}

fn weight_granularity(per_channel: bool) -> Granularity {
    if per_channel {
        Granularity::PerChannel
    } else {
        Granularity::PerTensor
    }
}

// ── run ─────────────────────────────────────────────────────────────────────

#[derive(Args)]
struct Run {
    #[arg(long)]
    model: PathBuf,
    /// Calibration JSON; optional only with --full-precision.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// One clip: a directory of frame_*.rtf files, or a single .rtf tensor
    /// (rank 3 = one frame, rank 4 = a [T,C,H,W] stack).
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, default_value_t = 3)]
    period: usize,
    /// frame | resq-pairwise | resq-recurrent | resq-dynamic
    #[arg(long, default_value = "resq-pairwise")]
    mode: RunMode,
    /// Per-frame cost report CSV (`--out` works as an alias).
    #[arg(long, alias = "out")]
    report: Option<PathBuf>,
    /// Dump per-frame output tensors into this directory.
    #[arg(long)]
    dump_outputs: Option<PathBuf>,
    /// Dump per-(frame, layer) policy bit-width maps as PGM (dynamic mode).
    #[arg(long)]
    dump_policy: Option<PathBuf>,
    /// Dynamic-policy improvement threshold.
    #[arg(long, default_value_t = 3e-4)]
    tau: f64,
    /// Assert the calibrated pools carry exactly these bit-widths, e.g. 0,4,8.
    #[arg(long)]
    pool: Option<String>,
    /// Disable quantization (fp32 reference pass; calibration not required).
    #[arg(long)]
    full_precision: bool,
    /// Report costs in units of 1e9 (GBOPs).
    #[arg(long)]
    giga: bool,
    /// Accepted for interface uniformity; runs are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Load `--clip`: a directory of frames or a single tensor file.
fn load_clip_input(path: &Path) -> Result<Vec<Tensor>> {
    if path.is_dir() {
        let clips = load_clips(path)?;
        if clips.len() != 1 {
            return Err(Error::Config(format!(
                "{} holds {} clips; `run` takes one (use `sweep` for corpora)",
                path.display(),
                clips.len()
            )));
        }
        return Ok(clips.into_iter().next().expect("length checked").frames);
    }
    let stack = rtf::read_tensor(path)?;
    match stack.rank() {
        3 => Ok(vec![stack]),
        4 => {
            let shape = stack.shape().to_vec();
            let (frames, per) = (shape[0], shape[1] * shape[2] * shape[3]);
            let data = stack.data();
            (0..frames)
                .map(|t| {
                    Tensor::new(shape[1..].to_vec(), data[t * per..(t + 1) * per].to_vec())
                })
                .collect()
        }
        r => Err(Error::ShapeMismatch(format!(
            "clip tensor must be rank 3 or 4, got rank {r}"
        ))),
    }
}

/// Pool bit-widths per layer, for `--pool` validation and PGM dumps.
fn layer_pool_bits(model: &ModelSpec) -> Result<Vec<Vec<u8>>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| match layer.quant() {
            Some(cfg) => match &cfg.residual_act {
                ResidualActQuant::Pool(pool) => Ok(pool.bits()),
                ResidualActQuant::Single(_) => Err(Error::Config(format!(
                    "layer {l} was calibrated without a pool"
                ))),
            },
            None => Err(Error::Sequencing(format!("layer {l} is not calibrated"))),
        })
        .collect()
}

fn run(args: Run) -> Result<()> {
    note_unused_seed("run", args.seed);
    let mut model = model_io::load_model(&args.model)?;
    let precision = if args.full_precision {
        PrecisionMode::FullPrecision
    } else {
        PrecisionMode::Quantized
    };
    match &args.calib {
        Some(path) => model_io::load_calibration(path, &mut model)?,
        None if args.full_precision => {}
        None => {
            return Err(Error::Config(
                "pass --calib, or --full-precision for an fp32 reference run".into(),
            ))
        }
    }
    if let Some(spec) = &args.pool {
        let want: Vec<u8> = spec
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Parse(format!("bad --pool entry {p:?}")))
            })
            .collect::<Result<_>>()?;
        for (l, bits) in layer_pool_bits(&model)?.iter().enumerate() {
            if *bits != want {
                return Err(Error::Config(format!(
                    "layer {l} pool is {bits:?}, not the requested {want:?}"
                )));
            }
        }
    }
    if args.dump_policy.is_some() && args.mode != RunMode::ResqDynamic {
        return Err(Error::Config(
            "--dump-policy needs --mode resq-dynamic (no maps otherwise)".into(),
        ));
    }

    let frames = load_clip_input(&args.clip)?;
    let schedule = ScheduleConfig::new(args.period)?;
    let policy = PolicyConfig { tau: args.tau };
    let result = run_sequence(&model, &frames, schedule, args.mode, precision, &policy)?;

    if let Some(path) = &args.report {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        result
            .report
            .write_csv(&mut file, args.giga)
            .map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = &args.dump_outputs {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, out) in result.outputs.iter().enumerate() {
            rtf::write_tensor(dir.join(format!("output_{t:03}.rtf")), out)?;
        }
    }
    if let Some(dir) = &args.dump_policy {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pool_bits = layer_pool_bits(&model)?;
        for (t, maps) in result.policy_maps.iter().enumerate() {
            let Some(maps) = maps else { continue };
            for (l, map) in maps.iter().enumerate() {
                let path = dir.join(format!("frame{t:03}_layer{l}.pgm"));
                pgm::write_bits_map(&path, map, &pool_bits[l])?;
            }
        }
    }

    let (unit, scale) = if args.giga { ("gbops", 1e-9) } else { ("bops", 1.0) };
    println!(
        "mode={} period={} frames={} total_{unit}={} amortized_{unit}_per_frame={} mean_mse_vs_fp32={:e}",
        args.mode,
        args.period,
        result.outputs.len(),
        result.report.total_bops() as f64 * scale,
        result.report.amortized_bops_per_frame() * scale,
        result.report.mean_mse()
    );
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────────

#[derive(Args)]
struct Sweep {
    /// JSON experiment file supplying any/all of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Comma-separated schemes; commas inside {..} pools don't split,
    /// e.g. 'W8A8|W8A4,W8A{0,4,8}'.
    #[arg(long)]
    schemes: Option<String>,
    /// Comma-separated run modes.
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated keyframe periods.
    #[arg(long)]
    periods: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    per_channel_weights: bool,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    giga: bool,
    /// Accepted for interface uniformity; sweeps are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// The JSON form of a sweep; every field can also be given as a flag, and
/// flags win over the file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    model: Option<PathBuf>,
    clips: Option<PathBuf>,
    #[serde(default)]
    schemes: Vec<String>,
    #[serde(default)]
    modes: Vec<String>,
    #[serde(default)]
    periods: Vec<usize>,
    samples: Option<usize>,
    grid_points: Option<usize>,
    tau: Option<f64>,
    #[serde(default)]
    per_channel_weights: bool,
    out: Option<PathBuf>,
    #[serde(default)]
    giga: bool,
}

/// Split on commas that are not inside `{...}` (pool syntax carries commas).
fn split_top_level(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '{' => {
                depth += 1;
                cur.push(ch);
            }
            '}' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
            }
            ',' if depth == 0 => {
                parts.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(ch),
        }
    }
    if !cur.trim().is_empty() {
        parts.push(cur.trim().to_string());
    }
    parts
}

fn sweep(args: Sweep) -> Result<()> {
    note_unused_seed("sweep", args.seed);
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<ExperimentFile>(&text)?
        }
        None => ExperimentFile::default(),
    };
    let require = |what: &str, have: bool| -> Result<()> {
        if have {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "--{what} is required (as a flag or in the --config file)"
            )))
        }
    };
    let model_path = args.model.or(file.model);
    let clips_path = args.clips.or(file.clips);
    let out_path = args.out.or(file.out);
    require("model", model_path.is_some())?;
    require("clips", clips_path.is_some())?;
    require("out", out_path.is_some())?;

    let scheme_names: Vec<String> = match &args.schemes {
        Some(s) => split_top_level(s),
        None => file.schemes.clone(),
    };
    require("schemes", !scheme_names.is_empty())?;
    let schemes = scheme_names
        .iter()
        .map(|s| s.parse::<SchemeNotation>())
        .collect::<Result<Vec<_>>>()?;

    let mode_names: Vec<String> = match &args.modes {
        Some(s) => split_top_level(s),
        None if !file.modes.is_empty() => file.modes.clone(),
        None => vec![
            "frame".into(),
            "resq-pairwise".into(),
            "resq-recurrent".into(),
        ],
    };
    let modes = mode_names
        .iter()
        .map(|s| RunMode::from_str(s))
        .collect::<Result<Vec<_>>>()?;
    if modes.contains(&RunMode::ResqDynamic) {
        for scheme in &schemes {
            if !matches!(scheme.residual.act_bits, ActBitsSpec::Pool(_)) {
                eprintln!("note: skipping resq-dynamic for {scheme} (no residual pool)");
            }
        }
    }

    let periods: Vec<usize> = match &args.periods {
        Some(s) => split_top_level(s)
            .iter()
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad period {p:?}")))
            })
            .collect::<Result<_>>()?,
        None if !file.periods.is_empty() => file.periods.clone(),
        None => vec![2, 4, 6, 8],
    };

    let spec = TradeoffSpec {
        schemes,
        modes,
        periods,
        samples: args.samples.or(file.samples).unwrap_or(64),
        grid_points: args.grid.or(file.grid_points).unwrap_or(20),
        tau: args.tau.or(file.tau).unwrap_or(3e-4),
        weight_granularity: weight_granularity(
            args.per_channel_weights || file.per_channel_weights,
        ),
    };
    let giga = args.giga || file.giga;

    let model = model_io::load_model(model_path.as_deref().expect("checked above"))?;
    let clips = load_clips(clips_path.as_deref().expect("checked above"))?;
    let rows = experiment_tradeoff(&model, &clips, &spec)?;
    let csv = tradeoff_csv(&rows, giga);
    let out = out_path.expect("checked above");
    let mut fh = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    fh.write_all(csv.as_bytes()).map_err(|e| Error::io(&out, e))?;
    println!("wrote {} sweep row(s) -> {}", rows.len(), out.display());
    Ok(())
}

// ── policy-map ──────────────────────────────────────────────────────────────

#[derive(Args)]
struct PolicyMap {
    #[arg(long)]
    model: PathBuf,
    /// Calibration JSON; the residual side must carry pools.
    #[arg(long)]
    calib: PathBuf,
    /// Clip corpus directory (motion masks required).
    #[arg(long)]
    clips: PathBuf,
    #[arg(long, default_value_t = 4)]
    period: usize,
    #[arg(long, default_value_t = 3e-4)]
    tau: f64,
    /// Output directory: one PGM per (clip, frame, layer) plus summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Accepted for interface uniformity; this command is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn policy_map(args: PolicyMap) -> Result<()> {
    note_unused_seed("policy-map", args.seed);
    let mut model = model_io::load_model(&args.model)?;
    model_io::load_calibration(&args.calib, &mut model)?;
    let clips: Vec<Clip> = load_clips(&args.clips)?;
    let policy = PolicyConfig { tau: args.tau };
    let result = experiment_policy_map(&model, &clips, args.period, &policy, Some(&args.out))?;
    let summary = args.out.join("summary.csv");
    fs::write(&summary, policy_summary_csv(&result)).map_err(|e| Error::io(&summary, e))?;
    println!(
        "mean selected bits: {:.3} overall ({:.3} moving, {:.3} static) -> {}",
        result.overall_mean_bits,
        result.overall_moving_bits,
        result.overall_static_bits,
        summary.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_level_split_respects_pool_braces() {
        assert_eq!(
            split_top_level("W8A8|W8A4,W8A{0,4,8},W6A6"),
            vec!["W8A8|W8A4", "W8A{0,4,8}", "W6A6"]
        );
        assert_eq!(split_top_level("2, 4 ,8"), vec!["2", "4", "8"]);
        assert!(split_top_level("").is_empty());
    }

    #[test]
    fn cli_declares_all_subcommands() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
        for expected in [
            "gen-clips",
            "build-model",
            "calibrate",
            "run",
            "sweep",
            "policy-map",
        ] {
            assert!(names.contains(&expected), "missing subcommand {expected}");
        }
        cmd.debug_assert();
    }
}
