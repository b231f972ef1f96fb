//! `sigtraj` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod plot;
mod settings;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sigtraj::harness::{
    build_windows, closed_loop_unroll, evaluate_open_loop, sim_config_for, OpenLoopPredictor,
    ReplayPredictor,
};
use sigtraj::metrics::{build_report, DisplacementStats};
use sigtraj::microsim::{self, SimConfig};
use sigtraj::model::{train, ConstantVelocity, CvaeModel, ModelVariant, Predictor};
use sigtraj::{Scenario, SignalTimeline, TrajectoryLog};

use settings::{ConfigError, Settings};

/// Trajectory files written by `gen-data` and read by `train`/`eval-open`.
const TRAJ_FILE: &str = "trajectories.csv";
const SIGNAL_FILE: &str = "signals.csv";
const CHECKPOINT_FILE: &str = "model.ckpt";
const CURVE_FILE: &str = "loss.csv";

#[derive(Parser, Debug)]
#[command(name = "sigtraj", version, about = "Train and evaluate trajectory models at a signalized intersection")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate rule-compliant traffic and write trajectory and signal logs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Total arrivals per hour, split evenly across clusters.
        #[arg(long)]
        vph: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the trajectory model on logs written by gen-data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding trajectories.csv and signals.csv.
        #[arg(long)]
        data: PathBuf,
        /// Passes over the data (overrides [train] epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the variant without the position embedding.
        #[arg(long)]
        baseline: bool,
        /// Grid steps between consecutive window anchors.
        #[arg(long)]
        stride: Option<usize>,
        /// Output directory for the checkpoint and loss curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a predictor in closed loop and score the committed traffic.
    EvalClosed {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; required for `--predictor model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which predictor drives the agents.
        #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
        predictor: PredictorKind,
        /// Simulated seconds (overrides [run] duration).
        #[arg(long)]
        duration: Option<f64>,
        /// Total arrivals per hour (overrides [run] total_vph).
        #[arg(long)]
        vph: Option<f64>,
        /// Output directory for the evaluation bundle.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one-shot predictions against logged futures.
    EvalOpen {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; required for `--predictor model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which predictor to score.
        #[arg(long, value_enum, default_value_t = OpenPredictorKind::Model)]
        predictor: OpenPredictorKind,
        /// Directory holding trajectories.csv and signals.csv.
        #[arg(long)]
        data: PathBuf,
        /// Grid steps between consecutive window anchors.
        #[arg(long)]
        stride: Option<usize>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the violation and conflict detectors over external logs.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Trajectory log CSV. The cluster_id column is optional.
        #[arg(long)]
        traj_log: PathBuf,
        /// Signal log CSV (t_s,movement,color).
        #[arg(long)]
        signal_log: PathBuf,
        /// Output directory for report.csv, report.txt and events.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an evaluation bundle as SVG figures.
    Plot {
        /// Scenario document used when the bundle has none.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by eval-closed.
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory for the SVG files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Scenario document (geometry and signal plan). Defaults to
    /// testbed.toml in $SIGTRAJ_CONFIG_DIR, then the bundled testbed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Settings document with optional [model], [train], [run] and
    /// [detectors] tables. Defaults to settings.toml in $SIGTRAJ_CONFIG_DIR.
    #[arg(long, alias = "model-config")]
    settings: Option<PathBuf>,
    /// RNG seed for simulation, training and sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PredictorKind {
    Model,
    ConstVelocity,
    Replay,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OpenPredictorKind {
    Model,
    ConstVelocity,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, duration, vph, out } => gen_data(&common, duration, vph, &out),
        Command::Train {
            common,
            data,
            epochs,
            baseline,
            stride,
            out,
        } => train_cmd(&common, &data, epochs, baseline, stride, &out),
        Command::EvalClosed {
            common,
            checkpoint,
            predictor,
            duration,
            vph,
            out,
        } => eval_closed(&common, checkpoint.as_deref(), predictor, duration, vph, &out),
        Command::EvalOpen {
            common,
            checkpoint,
            predictor,
            data,
            stride,
            out,
        } => eval_open(&common, checkpoint.as_deref(), predictor, &data, stride, &out),
        Command::Audit {
            common,
            traj_log,
            signal_log,
            out,
        } => audit(&common, &traj_log, &signal_log, &out),
        Command::Plot { config, bundle, out } => plot::plot_bundle(config.as_deref(), &bundle, &out),
    }
}

/// Scenario text and parsed scenario.
fn load_scenario(path: Option<&Path>) -> Result<(String, Scenario)> {
    let text = match settings::resolve(path, "testbed.toml")? {
        Some(p) => settings::read_config(&p)?,
        None => sigtraj::DEFAULT_TESTBED.to_string(),
    };
    let sc = Scenario::from_config(&text).map_err(|e| ConfigError(format!("scenario: {e}")))?;
    Ok((text, sc))
}

fn load_settings(common: &Common) -> Result<Settings> {
    let mut s = match settings::resolve(common.settings.as_deref(), "settings.toml")? {
        Some(p) => Settings::from_toml(&settings::read_config(&p)?, &p)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        s.run.seed = seed;
        s.train.seed = seed;
    }
    Ok(s)
}

fn read_data(dir: &Path) -> Result<(TrajectoryLog, SignalTimeline)> {
    let tp = dir.join(TRAJ_FILE);
    let sp = dir.join(SIGNAL_FILE);
    let log = TrajectoryLog::read_csv(open(&tp)?, 0.05)
        .map_err(|e| ConfigError(format!("{}: {e}", tp.display())))?;
    let tl = SignalTimeline::read_csv(open(&sp)?).map_err(|e| ConfigError(format!("{}: {e}", sp.display())))?;
    Ok((log, tl))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
}

fn gen_data(common: &Common, duration: Option<f64>, vph: Option<f64>, out: &Path) -> Result<()> {
    let (_, sc) = load_scenario(common.config.as_deref())?;
    let s = load_settings(common)?;
    let duration = duration.unwrap_or(s.run.duration);
    let vph = vph.unwrap_or(s.run.total_vph);
    if !(duration >= 0.0) || !(vph >= 0.0) {
        return Err(ConfigError("duration and vph must be non-negative".into()).into());
    }
    let sim = SimConfig {
        dt: s.run.sim_dt,
        ..SimConfig::uniform(&sc.geometry, vph, duration, s.run.seed)
    };
    let res = microsim::run(&sim, &sc.geometry, &sc.plan)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    res.log.write_csv(create(&out.join(TRAJ_FILE))?)?;
    res.timeline.write_csv(create(&out.join(SIGNAL_FILE))?)?;
    println!(
        "{} vehicles over {duration} s written to {}",
        res.log.trajectories.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(
    common: &Common,
    data: &Path,
    epochs: Option<usize>,
    baseline: bool,
    stride: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (_, sc) = load_scenario(common.config.as_deref())?;
    let mut s = load_settings(common)?;
    if let Some(e) = epochs {
        s.train.epochs = e;
    }
    if baseline {
        s.model.variant = ModelVariant::Baseline;
    }
    let stride = stride.unwrap_or(s.stride);
    let (log, tl) = read_data(data)?;
    let windows = build_windows(&log, &tl, &sc.geometry, &s.model, stride)?;
    if windows.is_empty() {
        bail!("empty dataset: no training windows in {}", data.display());
    }
    let outcome = train(&windows, &s.model, sc.geometry.cluster_ids(), &s.train)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.model.save(create(&out.join(CHECKPOINT_FILE))?)?;
    let mut w = create(&out.join(CURVE_FILE))?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in outcome.curve.iter().enumerate() {
        writeln!(w, "{i},{l:.9}")?;
    }
    w.flush()?;
    println!(
        "{} windows, {} epochs, loss {:.4} -> {:.4}, skipped {} steps",
        windows.len(),
        s.train.epochs,
        outcome.curve[0],
        outcome.curve.last().unwrap(),
        outcome.skipped_steps
    );
    Ok(())
}

fn load_model(path: Option<&Path>, sc: &Scenario) -> Result<CvaeModel> {
    let Some(p) = path else {
        return Err(ConfigError("--checkpoint is required for the model predictor".into()).into());
    };
    let m = CvaeModel::load(open(p)?).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
    m.check_clusters(&sc.geometry.cluster_ids())
        .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
    Ok(m)
}

fn eval_closed(
    common: &Common,
    checkpoint: Option<&Path>,
    kind: PredictorKind,
    duration: Option<f64>,
    vph: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (text, sc) = load_scenario(common.config.as_deref())?;
    let mut s = load_settings(common)?;
    if let Some(d) = duration {
        s.run.duration = d;
    }
    if let Some(v) = vph {
        s.run.total_vph = v;
    }
    let model = match kind {
        PredictorKind::Model => Some(load_model(checkpoint, &sc)?),
        _ => None,
    };
    let model_cfg = model.as_ref().map_or_else(|| s.model.clone(), |m| m.config.clone());
    let sim = sim_config_for(&s.run, &sc.geometry, model_cfg.dt).map_err(|e| ConfigError(e.to_string()))?;
    let cv = ConstantVelocity { dt: model_cfg.dt };
    let replay;
    let predictor: &dyn Predictor = match kind {
        PredictorKind::Model => model.as_ref().unwrap(),
        PredictorKind::ConstVelocity => &cv,
        PredictorKind::Replay => {
            let gt = microsim::run(&sim, &sc.geometry, &sc.plan)?;
            replay = ReplayPredictor::new(&gt.log, model_cfg.dt);
            &replay
        }
    };
    let bundle = closed_loop_unroll(&sc, &sim, predictor, &model_cfg, &s.run, &s.detectors)?;
    bundle.write_dir(out, &text)?;
    print!("{}", bundle.audit.report.to_table());
    let d = &bundle.displacement;
    println!("closed-loop ADE {:.3}  FDE {:.3} over {} vehicles", d.ade, d.fde, d.count);
    if !bundle.diagnostics.is_clean() {
        eprint!("{}", bundle.diagnostics.to_text());
    }
    Ok(())
}

fn eval_open(
    common: &Common,
    checkpoint: Option<&Path>,
    kind: OpenPredictorKind,
    data: &Path,
    stride: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (_, sc) = load_scenario(common.config.as_deref())?;
    let s = load_settings(common)?;
    let (log, tl) = read_data(data)?;
    let model = match kind {
        OpenPredictorKind::Model => Some(load_model(checkpoint, &sc)?),
        OpenPredictorKind::ConstVelocity => None,
    };
    let model_cfg = model.as_ref().map_or_else(|| s.model.clone(), |m| m.config.clone());
    let cv = ConstantVelocity { dt: model_cfg.dt };
    let predictor: &dyn OpenLoopPredictor = match &model {
        Some(m) => m,
        None => &cv,
    };
    let windows = build_windows(&log, &tl, &sc.geometry, &model_cfg, stride.unwrap_or(s.stride))?;
    if windows.is_empty() {
        bail!("no evaluation windows in {}", data.display());
    }
    let stats = evaluate_open_loop(predictor, &windows, &sc.geometry.cluster_ids(), s.run.batch)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = create(out)?;
    writeln!(w, "cluster,windows,ade,fde,min_ade,min_fde,kde_nll")?;
    let row = |w: &mut BufWriter<File>, name: &str, d: &DisplacementStats| {
        writeln!(
            w,
            "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            d.count, d.ade, d.fde, d.min_ade, d.min_fde, d.kde_nll
        )
    };
    for (name, d) in &stats.per_cluster {
        row(&mut w, name, d)?;
    }
    row(&mut w, "Total", &stats.overall)?;
    w.flush()?;
    let d = &stats.overall;
    println!(
        "{} windows  ADE {:.3}  FDE {:.3}  minADE {:.3}  minFDE {:.3}  KDE-NLL {:.3}",
        d.count, d.ade, d.fde, d.min_ade, d.min_fde, d.kde_nll
    );
    Ok(())
}

fn audit(common: &Common, traj: &Path, signals: &Path, out: &Path) -> Result<()> {
    let (_, sc) = load_scenario(common.config.as_deref())?;
    let s = load_settings(common)?;
    let mut log = TrajectoryLog::read_csv(open(traj)?, 0.1)
        .map_err(|e| ConfigError(format!("{}: {e}", traj.display())))?;
    let tl = SignalTimeline::read_csv(open(signals)?)
        .map_err(|e| ConfigError(format!("{}: {e}", signals.display())))?;
    for tr in &mut log.trajectories {
        if tr.cluster_id.is_none() {
            let id = sc
                .geometry
                .assign_cluster(tr)
                .with_context(|| format!("vehicle {}", tr.vehicle_id))?;
            tr.cluster_id = Some(id);
        }
    }
    let audit = build_report(&log, &tl, &sc.geometry, &s.detectors)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    audit.report.write_csv(create(&out.join("report.csv"))?)?;
    fs::write(out.join("report.txt"), audit.report.to_table())?;
    audit.write_events_csv(create(&out.join("events.csv"))?)?;
    print!("{}", audit.report.to_table());
    Ok(())
}
