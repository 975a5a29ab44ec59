use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Parser, Subcommand};
use jointtrack::eval::{self, Method};
use jointtrack::scene::{load_sequence, FORMAT_VERSION};
use jointtrack::simulator::{generate_sequence, Scenario};
use jointtrack::{Error, MotionEstimate, ObjectLabel, RunConfig, Sequence};
use rayon::prelude::*;
use serde::Serialize;

static VERSION: LazyLock<String> =
    LazyLock::new(|| format!("{} (format version {FORMAT_VERSION})", env!("CARGO_PKG_VERSION")));

#[derive(Debug, Parser)]
#[command(name = "jointtrack", version = VERSION.as_str(), about = "Joint patient and drill motion tracking")]
struct Cli {
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scenario file (defaults if omitted).
    Simulate {
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track both objects over every consecutive frame pair.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare methods against ground truth.
    Benchmark {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "tatoo,keypoint,icp")]
        methods: Vec<Method>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chain per-frame motions into drill-to-patient poses.
    Navigate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "tatoo")]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Chain ground-truth motions instead of running a method.
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    NoGroundTruth(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::NoGroundTruth(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::NoGroundTruth(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidIntrinsics(_) => Failure::Config(msg),
            Error::MissingPose { .. } => Failure::NoGroundTruth(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    println!("config: {}", config.to_json());
    Ok(config)
}

fn load_with_ground_truth(dir: &Path) -> CliResult<Sequence> {
    let sequence = load_sequence(dir)?;
    if !sequence.has_ground_truth() {
        return Err(Failure::NoGroundTruth(format!(
            "{} has no ground-truth poses",
            dir.display()
        )));
    }
    Ok(sequence)
}

fn simulate(scenario: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut scenario = match scenario {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    if let Some(seed) = seed {
        scenario.trajectory.seed = seed;
    }
    println!(
        "scenario: {}",
        serde_json::to_string(&scenario).expect("scenario serializes")
    );
    println!("seed: {}", scenario.trajectory.seed);
    let sequence = generate_sequence(&scenario, out)?;
    println!("frames: {}", sequence.len());
    for label in ObjectLabel::OBJECTS {
        let counts: Vec<usize> = sequence
            .frames
            .iter()
            .map(|f| f.seg.data().iter().filter(|&&l| l == label).count())
            .collect();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        println!(
            "{label} pixels: min {} mean {mean:.0} max {}",
            counts.iter().min().unwrap_or(&0),
            counts.iter().max().unwrap_or(&0)
        );
    }
    let n = &scenario.noise;
    println!(
        "noise: depth_sigma {} mm, outlier_fraction {}, seg_boundary_flip {}, conf_model {:?}",
        n.depth_sigma, n.outlier_fraction, n.seg_boundary_flip, n.conf_model
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrackedPair {
    frame: usize,
    estimate: MotionEstimate,
}

fn track(data: &Path, config: Option<&Path>, out: &Path) -> CliResult {
    let config = load_config(config)?;
    let sequence = load_sequence(data)?;
    let results: Vec<TrackedPair> = (0..sequence.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| TrackedPair {
            frame: t,
            estimate: jointtrack::track(&sequence.pair(t), &config.tracker),
        })
        .collect();
    let failed = results
        .iter()
        .filter(|r| !r.estimate.patient.tracked || !r.estimate.drill.tracked)
        .count();
    let mut json = serde_json::to_string_pretty(&results).expect("estimates serialize");
    json.push('\n');
    write_file(out, &json)?;
    println!("tracked {} pairs ({failed} with an untracked object), wrote {}", results.len(), out.display());
    Ok(())
}

fn benchmark(data: &Path, methods: &[Method], config: Option<&Path>, out: &Path) -> CliResult {
    let config = load_config(config)?;
    let sequence = load_with_ground_truth(data)?;
    let mut unique: Vec<Method> = Vec::new();
    for m in methods {
        if !unique.contains(m) {
            unique.push(*m);
        }
    }
    let methods = unique;
    println!(
        "methods: {}",
        methods.iter().map(Method::as_str).collect::<Vec<_>>().join(",")
    );
    let mut runs = Vec::new();
    for &m in &methods {
        runs.push((m, eval::evaluate_sequence(&sequence, m, &config)?));
    }
    let report = eval::BenchmarkReport::new(runs.iter().map(|(m, r)| eval::aggregate(*m, r)).collect());
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("report.txt"), &report.to_text())?;
    write_file(&out.join("frames.csv"), &eval::frames_csv(&runs))?;
    print!("{}", report.to_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn navigate(data: &Path, method: Method, config: Option<&Path>, out: &Path, oracle: bool) -> CliResult {
    let config = load_config(config)?;
    let sequence = load_with_ground_truth(data)?;
    let predictions = if oracle {
        println!("method: oracle");
        eval::oracle_predictions(&sequence)?
    } else {
        println!("method: {method}");
        eval::predict_sequence(&sequence, method, &config)
    };
    let nav = eval::navigate_predictions(&sequence, &predictions)?;
    write_file(out, &nav.to_csv())?;
    match (nav.mean_trans_mm, nav.mean_rot_deg) {
        (Some(t), Some(r)) => println!("mean drill-to-patient error: {t:.4} mm, {r:.4} deg"),
        _ => println!("mean drill-to-patient error: none (no chained frames)"),
    }
    if let Some(t) = &nav.truncated {
        println!("chain truncated at frame {} ({}): {}", t.frame, t.object, t.reason);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate { scenario, out, seed } => simulate(scenario.as_deref(), out, *seed),
        Command::Track { data, config, out } => track(data, config.as_deref(), out),
        Command::Benchmark {
            data,
            methods,
            config,
            out,
        } => benchmark(data, methods, config.as_deref(), out),
        Command::Navigate {
            data,
            method,
            config,
            out,
            oracle,
        } => navigate(data, *method, config.as_deref(), out, *oracle),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
