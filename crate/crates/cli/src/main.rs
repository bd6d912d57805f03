use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use noarb_core::datasets::{
    linspace, load_mesh_csv, load_quotes_csv, penalty_mesh, synth_in_sample, synth_out_sample, write_mesh_csv, write_quotes_csv,
    DatasetManifest, ManifestCounts, ManifestFiles,
};
use noarb_core::experiments::{
    aggregate, bench, eval_metrics, risk_profiles, run_matrix, summarize_bench, write_bench_csv, write_bench_summary_csv,
    write_matrix_csv, write_summary_csv, Condition, Evaluated, Metrics, RiskProfile, SabrSurface, Sample,
};
use noarb_core::plot::{write_svg, BoxPlot, LineChart, Series};
use noarb_core::training::{train, TrainReport};
use noarb_core::{Error, ExperimentConfig, LossReport, MlpParams, ModelMode, Objective, QuoteGrid, SabrParams};

const CONFIG_KEYS: &str = "\
CONFIG KEYS (JSON, every key optional, unknown keys are rejected):
  sabr          {alpha, beta, rho, nu, f, r, q}   SABR surface; nu/rho are replaced per matrix condition
  grid          {moneyness: [..], tau: [..], boundary, moneyness_max, tau_max}
                in-sample axes; `boundary` points are split between the tau=0 and moneyness=0 edges
  mesh          same shape as grid; penalty mesh (default 26 x 11)
  out_sample    same shape as grid; dense evaluation grid (default 126 x 101)
  penalty       {m_k, m_kk, m_tau, g: identity|square, lower_bound, self_adaptive, eta_m}
                penalty magnitudes; lower_bound also penalizes dC/dM < -exp(-r tau);
                self_adaptive trains one weight per mesh point with step eta_m
  train         {epochs, learning_rate, beta1, beta2, epsilon, seed, architecture: [2, .., 1],
                 activation: softplus|sigmoid|tanh|elu, history_stride}
  output_dir    directory for every artifact (overridden by --out)
  seeds         paired seeds of the matrix; each seed runs both modes
  conditions    [{nu, rho}, ..] matrix conditions (default: the nine published pairs)
  profile_taus  expiry slices of the risk profiles
  bench         {layers: [..], neurons: [..], activations: [..], repeats, epochs}
                layers counts weight layers, 3 = two hidden layers
  jobs          worker threads for matrix and bench (overridden by --jobs)

EXIT CODES: 0 ok, 2 configuration error, 3 runtime or training error, 4 I/O error";

#[derive(Parser)]
#[command(name = "noarb", version, about = "Arbitrage-consistent option premium surfaces from derivative-constrained networks")]
#[command(after_long_help = CONFIG_KEYS)]
struct Cli {
    /// Experiment config (JSON). Defaults to the baseline experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed; for `matrix`, the first paired seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for matrix and bench.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Objective: mlp (data fit only) or dcnn (with the derivative penalty).
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ModelMode>,
    /// Training epochs, overrides `train.epochs`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write in-sample, out-of-sample and mesh CSVs plus a manifest.
    Generate,
    /// Train one network and write its checkpoint and loss history.
    Train {
        /// Directory written by `generate`; synthesized from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Premium, penalty and volatility errors of a checkpoint or the oracle.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the exact SABR pricer instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write risk profiles.
        #[arg(long)]
        profiles: bool,
    },
    /// Train and evaluate every condition x seed x mode.
    Matrix {
        /// Number of paired seeds, counting up from --seed (default 1).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Dual Delta, Dual Gamma and Dual Theta along expiry slices.
    Profiles {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Training time of MLP and DCNN modes over the configured sweep.
    Bench {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Print the effective config as JSON.
    DumpConfig,
}

fn parse_mode(s: &str) -> Result<ModelMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => 4,
        Error::Input(_) | Error::Numerical { .. } | Error::Diverged { .. } | Error::Internal(_) => 3,
    }
}

/// Failure of a command: a library error, or completed work with failed parts.
enum Failure {
    Core(Error),
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(epochs) = cli.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = load_config(&cli)?;
    if matches!(cli.command, Command::DumpConfig) {
        println!("{}", cfg.to_json()?);
        return Ok(());
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    match cli.command {
        Command::Generate => generate(&cfg, &out),
        Command::Train { data } => train_cmd(&cfg, &out, data.as_deref(), cli.mode.unwrap_or(ModelMode::Dcnn)),
        Command::Evaluate { checkpoint, oracle: _, data, profiles } => evaluate(&cfg, &out, checkpoint.as_deref(), data.as_deref(), profiles),
        Command::Matrix { seeds } => {
            if let Some(n) = seeds {
                let base = cli.seed.unwrap_or(1);
                cfg.seeds = (0..n as u64).map(|k| base + k).collect();
            } else if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            cfg.validate()?;
            matrix(&cfg, &out)
        }
        Command::Profiles { checkpoint, oracle: _ } => {
            let (sabr, _) = resolve_sabr(&cfg, None)?;
            profiles(&cfg, &out, checkpoint.as_deref(), sabr)
        }
        Command::Bench { repeats } => {
            if let Some(r) = repeats {
                cfg.bench.repeats = r;
            }
            cfg.validate()?;
            bench_cmd(&cfg, &out)
        }
        Command::DumpConfig => unreachable!(),
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>, Error> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// SABR parameters of the data: the manifest's when a generated directory is
/// given, the config's otherwise.
fn resolve_sabr(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<(SabrParams, Option<DatasetManifest>), Error> {
    let manifest = match data {
        Some(dir) => read_manifest(dir)?,
        None => None,
    };
    Ok((manifest.as_ref().map_or(cfg.sabr, |m| m.sabr), manifest))
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let inner = synth_in_sample(&cfg.sabr, &cfg.grid)?;
    let dense = synth_out_sample(&cfg.sabr, &cfg.out_sample)?;
    let mesh = penalty_mesh(&cfg.mesh)?;
    let files = ManifestFiles { in_sample: "in_sample.csv".into(), out_sample: "out_sample.csv".into(), mesh: "mesh.csv".into() };
    write_quotes_csv(&inner, out.join(&files.in_sample))?;
    write_quotes_csv(&dense, out.join(&files.out_sample))?;
    write_mesh_csv(&mesh, out.join(&files.mesh))?;
    let manifest = DatasetManifest {
        sabr: cfg.sabr,
        in_sample: cfg.grid.clone(),
        out_sample: cfg.out_sample.clone(),
        mesh: cfg.mesh.clone(),
        seed: cfg.train.seed,
        counts: ManifestCounts {
            in_sample: inner.len(),
            in_sample_boundary: inner.boundary_count(),
            out_sample: dense.len(),
            mesh: mesh.len(),
        },
        files,
    };
    write_json(&manifest, &out.join("manifest.json"))?;
    println!(
        "wrote {} in-sample ({} boundary), {} out-of-sample and {} mesh points to {}",
        inner.len(),
        inner.boundary_count(),
        dense.len(),
        mesh.len(),
        out.display()
    );
    Ok(())
}

fn load_grid(path: &Path) -> Result<QuoteGrid, Error> {
    let report = load_quotes_csv(path)?;
    if report.duplicates_merged > 0 {
        log::warn!("{}: merged {} duplicate locations", path.display(), report.duplicates_merged);
    }
    Ok(report.grid)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: ModelMode,
    seed: u64,
    epochs: usize,
    final_loss: &'a LossReport,
}

#[derive(Serialize)]
struct Diagnostic {
    error: String,
    epoch: usize,
    e_mse: f64,
    e_penalty: f64,
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>, mode: ModelMode) -> CmdResult {
    let (sabr, manifest) = resolve_sabr(cfg, data)?;
    let (grid, mesh) = match data {
        Some(dir) => {
            let files = manifest.map(|m| m.files).unwrap_or(ManifestFiles {
                in_sample: "in_sample.csv".into(),
                out_sample: "out_sample.csv".into(),
                mesh: "mesh.csv".into(),
            });
            let mesh_path = dir.join(&files.mesh);
            let mesh = if mesh_path.exists() { load_mesh_csv(&mesh_path)? } else { penalty_mesh(&cfg.mesh)? };
            (load_grid(&dir.join(&files.in_sample))?, mesh)
        }
        None => (synth_in_sample(&sabr, &cfg.grid)?, penalty_mesh(&cfg.mesh)?),
    };
    let objective = Objective::new(mode, cfg.penalty, sabr.r);
    let report = match train(&grid, &mesh, &cfg.train, &objective) {
        Ok(r) => r,
        Err(e @ Error::Diverged { epoch, e_mse, e_penalty }) => {
            write_json(&Diagnostic { error: e.to_string(), epoch, e_mse, e_penalty }, &out.join("diagnostic.json"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    report.params.save_checkpoint(out.join("checkpoint.json"))?;
    report.write_history_csv(out.join("history.csv"))?;
    let summary = TrainSummary { mode, seed: cfg.train.seed, epochs: report.epochs_run, final_loss: &report.final_loss };
    write_json(&summary, &out.join("train_summary.json"))?;
    write_svg(&history_chart(&report, mode), out.join("history.svg"))?;
    log::info!("trained in {:.2}s", report.wall_seconds);
    println!(
        "{mode}: E_MSE {:.4e}, E_P {:.4e} after {} epochs; checkpoint in {}",
        report.final_loss.e_mse,
        report.final_loss.e_penalty,
        report.epochs_run,
        out.display()
    );
    Ok(())
}

fn history_chart(report: &TrainReport, mode: ModelMode) -> String {
    let series = |name: &str, f: fn(&LossReport) -> f64| Series {
        name: name.into(),
        points: report.history.iter().map(|h| (h.epoch as f64, f(&h.loss))).collect(),
    };
    LineChart {
        title: format!("{mode} loss history"),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        log_y: true,
        series: vec![series("E_MSE", |l| l.e_mse), series("E_P", |l| l.e_penalty)],
    }
    .to_svg()
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    condition: String,
    sample: Sample,
    #[serde(flatten)]
    metrics: Metrics,
}

fn evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, data: Option<&Path>, with_profiles: bool) -> CmdResult {
    let (sabr, manifest) = resolve_sabr(cfg, data)?;
    let params = checkpoint.map(MlpParams::load_checkpoint).transpose()?;
    let (surface, label) = match (&params, checkpoint) {
        (Some(p), Some(path)) => (Evaluated::Network(p), path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())),
        _ => (Evaluated::Oracle(SabrSurface::new(sabr)), "oracle".to_string()),
    };
    let mut grids = Vec::new();
    match data {
        Some(dir) => {
            let files = manifest.map(|m| m.files);
            let name = |s: Sample| match (&files, s) {
                (Some(f), Sample::In) => f.in_sample.clone(),
                (Some(f), Sample::Out) => f.out_sample.clone(),
                (None, s) => format!("{}_sample.csv", s.name()),
            };
            for s in [Sample::In, Sample::Out] {
                let path = dir.join(name(s));
                if path.exists() {
                    grids.push((s, load_grid(&path)?));
                }
            }
            if grids.is_empty() {
                return Err(Error::Input(format!("no in_sample.csv or out_sample.csv in {}", dir.display())).into());
            }
        }
        None => {
            grids.push((Sample::In, synth_in_sample(&sabr, &cfg.grid)?));
            grids.push((Sample::Out, synth_out_sample(&sabr, &cfg.out_sample)?));
        }
    }
    let condition = Condition::new(sabr.nu, sabr.rho).tag();
    let mut rows = Vec::new();
    for (sample, grid) in &grids {
        let metrics = eval_metrics(&surface, grid, &grid.locations(), &cfg.penalty, sabr.r, *sample)?;
        println!(
            "{label} {}: E_MSE {:.4e}, E_P {:.4e}, E_MSE(sigma) {}, invalid IV {}",
            sample.name(),
            metrics.e_mse,
            metrics.e_penalty,
            metrics.e_mse_sigma.map_or("-".into(), |v| format!("{v:.4e}")),
            metrics.invalid_iv
        );
        rows.push(EvalRow { model: label.clone(), condition: condition.clone(), sample: *sample, metrics });
    }
    write_json(&rows, &out.join("metrics.json"))?;
    let mut csv = String::from("model,condition,sample,e_mse,e_penalty,e_mse_sigma,sigma_points,invalid_iv,unidentifiable_iv\n");
    for r in &rows {
        let m = &r.metrics;
        csv.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{},{},{},{}\n",
            r.model,
            r.condition,
            r.sample.name(),
            m.e_mse,
            m.e_penalty,
            m.e_mse_sigma.map_or(String::new(), |v| format!("{v:.16e}")),
            m.sigma_points,
            m.invalid_iv,
            m.unidentifiable_iv
        ));
    }
    let path = out.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
    if with_profiles {
        profiles(cfg, out, checkpoint, sabr)?;
    }
    Ok(())
}

fn profiles(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, sabr: SabrParams) -> CmdResult {
    let params = checkpoint.map(MlpParams::load_checkpoint).transpose()?;
    let (surface, tag) = match (&params, checkpoint) {
        (Some(p), Some(path)) => (Evaluated::Network(p), path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())),
        _ => (Evaluated::Oracle(SabrSurface::new(sabr)), "oracle".to_string()),
    };
    let moneyness = linspace(0.0, cfg.out_sample.moneyness_max, 126);
    let profile = risk_profiles(&surface, &cfg.profile_taus, &moneyness, sabr.r)?;
    let dir = out.join("profiles");
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    profile.write_csv(dir.join(format!("{tag}.csv")))?;
    for (name, pick) in [
        ("dual_delta", (|s| &s.dk) as fn(&noarb_core::experiments::ProfileSlice) -> &Vec<f64>),
        ("dual_gamma", |s| &s.dkk),
        ("dual_theta", |s| &s.dtau),
    ] {
        write_svg(&profile_chart(&profile, name, pick), dir.join(format!("{tag}_{name}.svg")))?;
    }
    let [k, kk, tau, lower] = profile.violation_counts();
    println!("{tag}: violations K {k}, KK {kk}, tau {tau}, lower {lower}; profiles in {}", dir.display());
    Ok(())
}

fn profile_chart(profile: &RiskProfile, name: &str, pick: fn(&noarb_core::experiments::ProfileSlice) -> &Vec<f64>) -> String {
    LineChart {
        title: name.replace('_', " "),
        x_label: "moneyness".into(),
        y_label: name.into(),
        log_y: false,
        series: profile
            .slices
            .iter()
            .map(|s| Series { name: format!("tau={}", s.tau), points: profile.moneyness.iter().copied().zip(pick(s).iter().copied()).collect() })
            .collect(),
    }
    .to_svg()
}

fn matrix(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let rows = run_matrix(&cfg.conditions, &cfg.seeds, cfg)?;
    write_matrix_csv(&rows, out.join("matrix.csv"))?;
    let summary = aggregate(&rows);
    write_summary_csv(&summary, out.join("matrix_summary.csv"))?;
    let mut groups = Vec::new();
    for c in &cfg.conditions {
        for model in ModelMode::ALL {
            let values = rows.iter().filter(|r| r.condition == *c && r.model == model).filter_map(|r| r.metric("in_e_penalty")).collect();
            groups.push((format!("{} {}", c.tag(), model), values));
        }
    }
    let plot = BoxPlot { title: "in-sample E_P".into(), y_label: "E_P".into(), log_y: true, groups };
    write_svg(&plot.to_svg(), out.join("matrix_in_penalty.svg"))?;
    for s in summary.iter().filter(|s| s.metric == "in_e_penalty") {
        println!("{} {}: median in-sample E_P {:.3e} over {} runs", s.condition, s.model, s.median, s.runs);
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        return Err(Failure::Partial(format!("{failed} of {} matrix cells failed, see matrix.csv", rows.len())));
    }
    Ok(())
}

fn bench_cmd(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let rows = bench(cfg)?;
    write_bench_csv(&rows, out.join("bench.csv"))?;
    let summary = summarize_bench(&rows);
    write_bench_summary_csv(&summary, out.join("bench_summary.csv"))?;
    for s in &summary {
        println!(
            "{}/{} {} ({} params): mlp {:.3}s, dcnn {:.3}s, ratio {:.2}",
            s.layers, s.neurons, s.activation, s.params, s.mlp_mean, s.dcnn_mean, s.ratio
        );
    }
    Ok(())
}
