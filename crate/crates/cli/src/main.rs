use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ssni_core::estimators::{calibrate, CalibrationRecord, Roi};
use ssni_core::imaging::{estimate_map, mean_filter, run_phi_demo, EstimateMap, PhiDemoConfig};
use ssni_core::io::{
    read_json, read_stack, sidecar_path, write_json, write_map_csv, write_map_pgm, write_mask, write_stack, RunConfig,
};
use ssni_core::physics::{predicted_variance, quantum_enhancement, u_coh, u_uql, EstimatorKind, LossParams};
use ssni_core::simkernel::generate_stack;
use ssni_core::sweeps::{advantage_crossover, resolution_sweep, SweepResult};

/// Twin-beam sub-shot-noise imaging: simulation, calibration and analysis.
#[derive(Parser)]
#[command(name = "ssni", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stack file from a run configuration.
    Simulate(SimulateArgs),
    /// Calibrate the estimators on a stack taken without the sample.
    Calibrate(CalibrateArgs),
    /// Reconstruct the absorption map of one frame.
    Estimate(EstimateArgs),
    /// Sweep the bin size over a calibration and a sample stack.
    Sweep(SweepArgs),
    /// End-to-end demonstration on the Φ phantom.
    Image(ImageArgs),
    /// Print the sensitivity bounds and predicted uncertainties.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output stack file; overrides the configuration's `output`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Mask file (PGM with sidecar, or CSV); overrides the configuration.
    #[arg(long, conflicts_with = "no_sample")]
    mask: Option<PathBuf>,
    /// Remove the sample, for calibration runs.
    #[arg(long)]
    no_sample: bool,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    stack: PathBuf,
    /// Bin side in base pixels.
    #[arg(short, long)]
    k: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    stack: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value = "optimized")]
    kind: EstimatorKind,
    /// Bin side in base pixels; defaults to the calibration's.
    #[arg(short, long)]
    k: Option<usize>,
    /// Position of the frame in the stack.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Odd window side of an optional mean filter, in bins.
    #[arg(long)]
    filter: Option<usize>,
    /// Output prefix: writes `<prefix>.csv`, `<prefix>.pgm` and sidecars.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    calibration_stack: PathBuf,
    #[arg(long)]
    sample_stack: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ssni_core::sweeps::DEFAULT_K_LIST)]
    k_list: Vec<usize>,
    /// Region of interest as `x,y,width,height` in base pixels.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<Roi>,
    /// Output prefix: writes `<prefix>.csv` and `<prefix>.json`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ImageArgs {
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 300)]
    frames: usize,
    #[arg(long, default_value_t = 100)]
    calibration_frames: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0])]
    x: Vec<f64>,
    /// Side of the square analysis region in base pixels.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    alpha: f64,
    /// Mean detected probe photons per cell without the sample.
    #[arg(long)]
    n: f64,
    /// Heralding efficiency.
    #[arg(long)]
    eta: f64,
    #[arg(long = "eta-d")]
    eta_d: f64,
    #[arg(long)]
    json: bool,
}

fn parse_roi(s: &str) -> std::result::Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok(Roi::new(x, y, w, h)),
        _ => Err("expected x,y,width,height".into()),
    }
}

/// Where a calibration came from.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    calibration: CalibrationRecord,
    stack: PathBuf,
    global_seed: u64,
    scene_hash: String,
}

#[derive(Serialize)]
struct MapProvenance<'a> {
    stack: &'a Path,
    global_seed: u64,
    scene_hash: String,
    frame_index: u64,
    calibration: &'a CalibrationRecord,
    filter: Option<usize>,
}

#[derive(Serialize)]
struct SweepFile<'a> {
    calibration_stack: &'a Path,
    sample_stack: &'a Path,
    roi: Roi,
    crossover: Vec<(EstimatorKind, Option<ssni_core::Advantage>)>,
    result: &'a SweepResult,
}

fn hex(bytes: [u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    if let Some(n) = args.frames {
        cfg.n_frames = n;
    }
    if let Some(s) = args.seed {
        cfg.global_seed = s;
    }
    if args.no_sample {
        cfg.mask = ssni_core::io::MaskSpec::None;
    } else if let Some(m) = args.mask {
        let abs = std::path::absolute(&m).with_context(|| format!("resolving {}", m.display()))?;
        cfg.mask = ssni_core::io::MaskSpec::File { path: abs };
    }
    let output = args
        .output
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| ssni_core::Error::Config("no output path: pass --output or set `output`".into()))?;
    cfg.output = Some(output.clone());
    let scene = cfg.scene(base)?;
    let stack = generate_stack(&scene, cfg.n_frames, cfg.global_seed)?;
    write_stack(&output, &stack)?;
    write_json(&sidecar_path(&output), &cfg)?;
    eprintln!(
        "wrote {} frames ({}x{}) to {}",
        stack.len(),
        scene.grid_w,
        scene.grid_h,
        output.display()
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let stack = read_stack(&args.stack, None)?;
    let record = calibrate(&stack, args.k)?;
    let file = CalibrationFile {
        calibration: record,
        stack: args.stack.clone(),
        global_seed: stack.global_seed(),
        scene_hash: hex(stack.scene().hash()),
    };
    write_json(&args.output, &file)?;
    let c = &file.calibration;
    println!(
        "k = {}  gamma = {:.6}  k_opt = {:.6}  NRF = {:.6} +/- {:.6}  eta = {:.6}  <N_P> = {:.3}",
        c.binning_k, c.gamma, c.k_opt, c.nrf, c.nrf_std_error, c.eta, c.mean_probe
    );
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let stack = read_stack(&args.stack, None)?;
    let cal: CalibrationFile = read_json(&args.calibration)?;
    let k = args.k.unwrap_or(cal.calibration.binning_k);
    let frame = stack.frames().get(args.frame).ok_or_else(|| {
        ssni_core::Error::Domain(format!("stack has {} frames, asked for {}", stack.len(), args.frame))
    })?;
    let mut map: EstimateMap = estimate_map(frame, &cal.calibration, args.kind, k)?;
    if let Some(d) = args.filter {
        map = mean_filter(&map, d)?;
    }
    let csv = with_ext(&args.output, "csv");
    let pgm = with_ext(&args.output, "pgm");
    write_map_csv(&csv, &map)?;
    write_map_pgm(&pgm, &map)?;
    write_json(
        &sidecar_path(&csv),
        &MapProvenance {
            stack: &args.stack,
            global_seed: stack.global_seed(),
            scene_hash: hex(stack.scene().hash()),
            frame_index: map.frame_index,
            calibration: &cal.calibration,
            filter: args.filter,
        },
    )?;
    println!(
        "{} map {}x{} (k = {}), mean alpha = {:.6}, invalid cells = {}",
        map.kind,
        map.alpha.width,
        map.alpha.height,
        k,
        map.mean(),
        map.invalid_cells()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cal = read_stack(&args.calibration_stack, None)?;
    let smp = read_stack(&args.sample_stack, None)?;
    let roi = args.roi.unwrap_or_else(|| Roi::full(smp.scene()));
    let result = resolution_sweep(&cal, &smp, &args.k_list, &roi)?;
    let crossover = EstimatorKind::ALL
        .iter()
        .map(|&k| (k, advantage_crossover(&result, k).ok()))
        .collect();
    let csv = with_ext(&args.output, "csv");
    let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
    result.write_csv(std::io::BufWriter::new(file))?;
    write_json(
        &with_ext(&args.output, "json"),
        &SweepFile {
            calibration_stack: &args.calibration_stack,
            sample_stack: &args.sample_stack,
            roi,
            crossover,
            result: &result,
        },
    )?;
    println!("{:>5} {:>9} {:>7} {:>8} {:>7} {:>7} {:>7} {:>7}", "k", "d_um", "X", "NRF", "E_rat", "E_sub", "E_opt", "fano");
    for r in &result.rows {
        let e = |k| r.get(k).map_or(f64::NAN, |s| s.enhancement);
        println!(
            "{:>5} {:>9.3} {:>7.3} {:>8.5} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.binning_k,
            r.d_object,
            r.x,
            r.nrf_measured,
            e(EstimatorKind::Ratio),
            e(EstimatorKind::Subtraction),
            e(EstimatorKind::Optimized),
            r.fano_probe
        );
    }
    Ok(())
}

fn image(args: ImageArgs) -> Result<()> {
    let cfg = PhiDemoConfig {
        grid: args.grid,
        alpha_level: args.alpha,
        frames: args.frames,
        calibration_frames: args.calibration_frames,
        x_values: args.x,
        seed: args.seed,
        ..PhiDemoConfig::default()
    };
    let demo = run_phi_demo(&cfg)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    write_mask(&args.output.join("mask.csv"), &demo.scene.mask)?;
    for p in &demo.panels {
        let name = format!("map_{}_x{}.csv", p.kind.name(), p.resolution.x);
        write_map_csv(&args.output.join(name), &p.map)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a PhiDemoConfig,
        panels: Vec<(EstimatorKind, f64, f64, f64)>,
        calibrations: &'a [CalibrationRecord],
    }
    let panels = demo
        .panels
        .iter()
        .map(|p| (p.kind, p.resolution.x, p.resolution.d_object, p.rms_error))
        .collect();
    write_json(
        &args.output.join("demo.json"),
        &Summary {
            config: &cfg,
            panels,
            calibrations: &demo.calibrations,
        },
    )?;
    println!("{:>6} {:>8} {:>10} {:>10}", "X", "d_um", "estimator", "rms_error");
    for p in &demo.panels {
        println!(
            "{:>6} {:>8.2} {:>10} {:>10.6}",
            p.resolution.x,
            p.resolution.d_object,
            p.kind.label(),
            p.rms_error
        );
    }
    Ok(())
}

fn bounds(args: BoundsArgs) -> Result<()> {
    let p = LossParams::new(args.alpha, args.n, args.eta_d, args.eta)?;
    let coh = u_coh(p.alpha, p.n_detected)?;
    let uql = u_uql(p.alpha, p.n_detected)?;
    let rows = EstimatorKind::ALL
        .iter()
        .map(|&k| {
            let var = predicted_variance(k, &p)?;
            let enh = quantum_enhancement(k, &p).ok();
            Ok((k, var, enh))
        })
        .collect::<ssni_core::Result<Vec<_>>>()?;
    if args.json {
        let table: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(k, var, enh)| {
                (
                    k.name().to_string(),
                    serde_json::json!({"variance": var, "uncertainty": var.sqrt(), "enhancement": enh}),
                )
            })
            .collect();
        let doc = serde_json::json!({"params": p, "u_coh": coh, "u_uql": uql, "estimators": table});
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!(
        "alpha = {}  N = {}  eta = {}  eta_d = {}",
        p.alpha, p.n_detected, p.eta, p.eta_d
    );
    println!("u_coh = {coh:.6}");
    println!("u_uql = {uql:.6}");
    println!("{:<12} {:>12} {:>12} {:>12}", "estimator", "variance", "uncertainty", "enhancement");
    for (k, var, enh) in rows {
        println!(
            "{:<12} {:>12.4e} {:>12.6} {:>12}",
            k.name(),
            var,
            var.sqrt(),
            enh.map_or("-".to_string(), |e| format!("{e:.6}"))
        );
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SSNI_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| ssni_core::Error::Config(format!("SSNI_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ssni_core::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Estimate(a) => estimate(a),
        Command::Sweep(a) => sweep(a),
        Command::Image(a) => image(a),
        Command::Bounds(a) => bounds(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_parsing() {
        assert_eq!(parse_roi("1,2,3,4").unwrap(), Roi::new(1, 2, 3, 4));
        assert!(parse_roi("1,2,3").is_err());
        assert!(parse_roi("a,2,3,4").is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let cfg: anyhow::Error = ssni_core::Error::Config("x".into()).into();
        assert_eq!(exit_code(&cfg), 2);
        let dom: anyhow::Error = ssni_core::Error::SingularSample.into();
        assert_eq!(exit_code(&dom.context("while estimating")), 4);
        let io: anyhow::Error = std::io::Error::other("disk").into();
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }

    #[test]
    fn suffixes() {
        assert_eq!(with_ext(Path::new("out/run.a"), "csv"), PathBuf::from("out/run.a.csv"));
        assert_eq!(hex([0xab; 32]).len(), 64);
    }
}
