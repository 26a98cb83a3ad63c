//! Command-line driver wiring configuration, pipeline, evaluation and
//! visualization into reproducible runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
//! Any configuration field can be overridden with a flag of its dotted
//! name, e.g. `--solver.lambda0 1e-3` or `--energy.alpha=2`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sceneflow::config;
use sceneflow::error::Error;
use sceneflow::io::{self, Flow2d, Flow3d, IntrinsicsFile};
use sceneflow::pipeline::{self, median_valid_depth, PipelineConfig};
use sceneflow::solver::write_trace_csv;
use sceneflow::synth;

#[derive(Parser)]
#[command(
    name = "sceneflow",
    version,
    about = "Multiframe RGB-D scene flow from piecewise-rigid segment poses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oversegment the reference depth frame and write a 16-bit label image.
    Segment {
        /// Directory with colorNNNN.png / depthNNNN.png pairs.
        #[arg(long)]
        input: PathBuf,
        /// Plain-text intrinsics file (fx, fy, cx, cy, width, height,
        /// depth_scale).
        #[arg(long)]
        intrinsics: PathBuf,
        /// TOML configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output label PNG (segment id + 1; discarded pixels 0).
        #[arg(long)]
        output: PathBuf,
    },
    /// Estimate scene flow for one temporal window and write flow files.
    Flow {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for flow3d.sf3d and per-frame .flo files.
        #[arg(long)]
        output_dir: PathBuf,
        /// Also write Middlebury-colorized flow PNGs.
        #[arg(long)]
        viz: bool,
        /// Also write the energy trace as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Mean end-point error between a flow file and ground truth.
    Eval {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional per-pixel EPE map PNG (16-bit, millipixels).
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Colorize a 2D flow file with the Middlebury color wheel.
    Viz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Fixed magnitude normalizer (field maximum when omitted).
        #[arg(long)]
        max_mag: Option<f64>,
    },
    /// Render a catalog scene into a sequence directory with ground truth.
    Synth {
        /// Scene id (S1..S5) or name, e.g. two-body.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        output_dir: PathBuf,
        /// Number of frames (scene default when omitted).
        #[arg(long)]
        frames: Option<usize>,
        /// Intensity noise std-dev.
        #[arg(long, default_value_t = 0.0)]
        noise_intensity: f64,
        /// Depth noise std-dev (meters).
        #[arg(long, default_value_t = 0.0)]
        noise_depth: f64,
    },
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_dotted_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Splits `--dotted.path value` and `--dotted.path=value` tokens out of the
/// raw arguments; everything else goes to the regular parser.
type SplitArgs = (Vec<String>, Vec<(String, String)>);

fn extract_dotted_overrides(argv: Vec<String>) -> Result<SplitArgs, String> {
    let mut args = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut iter = argv.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            args.push(arg);
            continue;
        };
        let key_part = body.split('=').next().unwrap();
        if !key_part.contains('.') {
            args.push(arg);
            continue;
        }
        if let Some((key, value)) = body.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else {
            let value = iter
                .next()
                .ok_or_else(|| format!("--{body} expects a value"))?;
            overrides.push((body.to_string(), value));
        }
    }
    Ok((args, overrides))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFiniteInitialEnergy | Error::NonFiniteResidual { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<(), Error> {
    match cli.command {
        Command::Segment {
            input,
            intrinsics,
            config,
            output,
        } => {
            let config = config::load_config(config.as_deref(), overrides)?;
            let intrinsics = io::read_intrinsics(&intrinsics)?;
            let raw = io::load_sequence(&input, &intrinsics)?;
            let frames = pipeline::preprocess(&raw, config.energy.gaussian_sigma)?;
            let reference = frames.get(config.reference_index).unwrap_or(&frames[0]);
            let seg = sceneflow::segmentation::felzenszwalb_depth(
                &reference.depth,
                config.segmentation.threshold,
                config.segmentation.min_size,
            )?;
            io::write_label_png(&output, &seg)?;
            println!(
                "segments: {} ({} px kept) -> {}",
                seg.count(),
                seg.total_kept_pixels(),
                output.display()
            );
            Ok(())
        }
        Command::Flow {
            input,
            intrinsics,
            config,
            output_dir,
            viz,
            trace,
        } => {
            let config = config::load_config(config.as_deref(), overrides)?;
            let intrinsics = io::read_intrinsics(&intrinsics)?;
            let raw = io::load_sequence(&input, &intrinsics)?;
            run_flow(&raw, &intrinsics, &config, &output_dir, viz, trace)
        }
        Command::Eval { flow, gt, map } => {
            let flow = io::read_flow_2d(&flow)?;
            let gt = io::read_flow_2d(&gt)?;
            let (mean, epe_map) = io::compute_epe(&flow, &gt)?;
            if let Some(map_path) = map {
                io::write_epe_map_png(&map_path, &epe_map)?;
            }
            println!("mean EPE {mean:.6}");
            Ok(())
        }
        Command::Viz {
            flow,
            output,
            max_mag,
        } => {
            let flow = io::read_flow_2d(&flow)?;
            let img = io::colorize_flow(&flow, max_mag);
            img.save(&output)
                .map_err(|e| Error::image(output.display().to_string(), e))?;
            Ok(())
        }
        Command::Synth {
            scene,
            output_dir,
            frames,
            noise_intensity,
            noise_depth,
        } => {
            let mut spec = synth::scene_by_name(&scene)
                .ok_or_else(|| Error::Config(format!("unknown scene {scene:?}")))?;
            if let Some(n) = frames {
                spec = spec.with_frames(n);
            }
            spec = spec.with_noise(noise_intensity, noise_depth);
            let rendered = synth::render_sequence(&spec)?;
            let intrinsics = IntrinsicsFile {
                intrinsics: spec.intrinsics,
                depth_scale: 5000.0,
            };
            io::write_sequence(&output_dir, &rendered.frames, &intrinsics)?;
            for frame in &rendered.gt_flow.frames {
                let flow2d = Flow2d::from_flow_frame(frame);
                let path = output_dir.join(format!("gt_flow{:04}.flo", frame.frame_index + 1));
                io::write_flow_2d(&path, &flow2d)?;
            }
            let gt3d = Flow3d::from_flow_frames(&rendered.gt_flow.frames);
            io::write_flow_3d(&output_dir.join("gt_flow3d.sf3d"), &gt3d)?;
            println!(
                "scene {} ({} frames, {} bodies) -> {}",
                spec.name,
                spec.n_frames,
                spec.bodies.len(),
                output_dir.display()
            );
            Ok(())
        }
    }
}

fn run_flow(
    raw: &[pipeline::RawFrame],
    intrinsics: &IntrinsicsFile,
    config: &PipelineConfig,
    output_dir: &Path,
    viz: bool,
    trace: bool,
) -> Result<(), Error> {
    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::io(output_dir.display().to_string(), e))?;

    // The configured window picks how many leading frames participate.
    if raw.len() < config.window {
        return Err(Error::InvalidWindow { n: raw.len() });
    }
    let raw = &raw[..config.window];
    let result = pipeline::run_window(raw, &intrinsics.intrinsics, config)?;

    let gt3d = Flow3d::from_flow_frames(&result.flow.frames);
    io::write_flow_3d(&output_dir.join("flow3d.sf3d"), &gt3d)?;
    for frame in &result.flow.frames {
        let flow2d = Flow2d::from_flow_frame(frame);
        let path = output_dir.join(format!("flow{:04}.flo", frame.frame_index + 1));
        io::write_flow_2d(&path, &flow2d)?;
        if viz {
            let img = io::colorize_flow(&flow2d, None);
            let viz_path = output_dir.join(format!("flow{:04}.png", frame.frame_index + 1));
            img.save(&viz_path)
                .map_err(|e| Error::image(viz_path.display().to_string(), e))?;
        }
    }
    if trace {
        write_trace_csv(&output_dir.join("trace.csv"), &result.trace)?;
    }

    // Motion grouping over the first pair's poses.
    let reference = &result.frames[config.reference_index];
    let scene_scale = median_valid_depth(&reference.depth).unwrap_or(1.0);
    let poses: Vec<_> = (0..result.segmentation.count())
        .map(|s| result.state.pose(0, s))
        .collect();
    let groups = pipeline::group_motions(&poses, config.motion_tol, scene_scale);
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);

    // Weight histogram diagnostic for the gamma/eta balance.
    let weights = result.state.weights();
    if !weights.is_empty() {
        let near = |c: f64| {
            weights
                .iter()
                .filter(|w| (w.abs() - c).abs() < 0.25)
                .count()
        };
        eprintln!(
            "lifting weights: {} total, {} near |w|=1, {} near |w|=0, extremes [{:.3}, {:.3}]",
            weights.len(),
            near(1.0),
            near(0.0),
            weights.iter().cloned().fold(f64::INFINITY, f64::min),
            weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    println!(
        "segments: {}  energy: {:.6e}  iterations: {}  motions: {}",
        result.segmentation.count(),
        result.energy,
        result.trace.last().map_or(0, |t| t.iteration),
        n_groups
    );
    Ok(())
}
