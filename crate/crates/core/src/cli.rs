//! Command-line front end: config files in, CSV files, checkpoints and run
//! manifests out.
//!
//! Exit codes: 0 on success, 1 on user error (bad arguments, config or
//! files), 2 on numerical failure. Every failure prints one line to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::KeyValues;
use crate::dbme::{train_dbme, DbmeConfig, DbmeSolution};
use crate::dgme::{train_dgme, DgmeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_surfaces, export_d2_lines, export_d3_simplex_heat, export_runtime_scaling, export_trajectory,
    reconstruct_equilibrium, runtime_scaling, sampling_rate_study, DbmeSurface, FigureKind, OracleSurface,
    ValueSurface,
};
use crate::model::{self, MeanFieldModel};
use crate::neural::{load_checkpoint, save_checkpoint, NeuralSurface};
use crate::ode::{solve_mfg_system, PicardOptions, TimeGrid};
use crate::simplex::Distribution;

/// Overrides the output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "MFG_MASTER_OUT";

const DEFAULT_OUT_DIR: &str = "mfg-out";

#[derive(Debug, Parser)]
#[command(name = "mfg-master", version, about = "Neural and classical solvers for finite-state mean field game master equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run config (flat `key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $MFG_MASTER_OUT, then the config's
    /// `output` key, then `mfg-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sample-parallel stages.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one space-time network on the master-equation residual.
    TrainDgme(Common),
    /// Train one network per time node by backward induction.
    TrainDbme(Common),
    /// Solve the forward-backward system from one initial distribution.
    SolveOracle {
        #[command(flatten)]
        common: Common,
        /// Initial distribution, comma separated.
        #[arg(long)]
        eta: Option<String>,
    },
    /// Mean and sup differences between two surfaces.
    Compare {
        #[command(flatten)]
        common: Common,
        /// `dgme:<checkpoint or run dir>`, `dbme:<run dir>` or `oracle`.
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Evaluation times, comma separated.
        #[arg(long)]
        times: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Rebuild the equilibrium flow from a surface.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        surface: String,
        #[arg(long)]
        eta: Option<String>,
        /// Grid intervals on `[0, T]`.
        #[arg(long)]
        intervals: Option<usize>,
    },
    /// Decay of the sampled minimum over uniform simplex draws.
    SampleStudy {
        #[arg(long)]
        d: usize,
        /// Sample counts, comma separated.
        #[arg(long = "K")]
        k: String,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot data.
    Export {
        #[command(flatten)]
        common: Common,
        /// d2-lines, d3-simplex-heat, trajectory, loss-curves or runtime-scaling.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        surface: Option<String>,
        #[arg(long)]
        times: Option<String>,
        #[arg(long)]
        eta: Option<String>,
        /// Barycentric grid resolution for d3-simplex-heat.
        #[arg(long, default_value_t = 20)]
        resolution: usize,
        /// Training run directory for loss-curves.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Epoch-mean loss to reach for runtime-scaling.
        #[arg(long)]
        target_loss: Option<f64>,
        /// State counts for runtime-scaling, comma separated.
        #[arg(long, default_value = "2,3,4,5,6")]
        dims: String,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let line = msg.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{line}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(message) => {
            if !message.is_empty() {
                println!("{message}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::TrainDgme(common) => cmd_train_dgme(&common),
        Command::TrainDbme(common) => cmd_train_dbme(&common),
        Command::SolveOracle { common, eta } => cmd_solve_oracle(&common, eta.as_deref()),
        Command::Compare {
            common,
            a,
            b,
            times,
            samples,
        } => cmd_compare(&common, &a, &b, times.as_deref(), samples),
        Command::Reconstruct {
            common,
            surface,
            eta,
            intervals,
        } => cmd_reconstruct(&common, &surface, eta.as_deref(), intervals),
        Command::SampleStudy { d, k, trials, seed, out } => cmd_sample_study(d, &k, trials, seed, out),
        Command::Export {
            common,
            kind,
            surface,
            times,
            eta,
            resolution,
            run,
            target_loss,
            dims,
        } => cmd_export(
            &common,
            &kind,
            ExportArgs {
                surface,
                times,
                eta,
                resolution,
                run,
                target_loss,
                dims,
            },
        ),
    }
}

/// Config sections. Each subcommand checks the ones it reads and skips the
/// rest, so one file can serve training and evaluation.
const SECTIONS: &[&str] = &["dgme", "dbme", "net", "oracle", "compare", "reconstruct"];

/// A parsed config with its model and output directory.
struct Session {
    kv: KeyValues,
    raw: KeyValues,
    model: Arc<dyn MeanFieldModel>,
    out: PathBuf,
    started: Instant,
}

impl Session {
    /// `method`, when given, must match the config's `method` key if present;
    /// evaluation commands accept any method. `reads` lists the sections the
    /// subcommand consumes.
    fn open(common: &Common, method: Option<&str>, reads: &[&str]) -> Result<Self> {
        let mut kv = KeyValues::read(&common.config)?;
        let raw = kv.clone();
        let configured = kv.take_opt_string("method");
        if let (Some(m), Some(method)) = (configured, method) {
            if m != method {
                return Err(Error::Config(format!(
                    "{}: method = {m} does not match the {method} subcommand",
                    common.config.display()
                )));
            }
        }
        let configured_out = kv.take_opt_string("output");
        let out = output_dir(common.out.clone(), configured_out.map(PathBuf::from));
        let model = model::from_config(&mut kv)?;
        let skipped: Vec<&str> = SECTIONS.iter().copied().filter(|s| !reads.contains(s)).collect();
        kv.ignore_sections(&skipped);
        if common.threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        Ok(Session {
            kv,
            raw,
            model,
            out,
            started: Instant::now(),
        })
    }

    /// Errors on unread keys. The evaluation default `eta` is optional
    /// everywhere.
    fn finish(&mut self) -> Result<()> {
        self.kv.take_opt_string("eta");
        self.kv.finish()
    }

    fn seed(&mut self) -> Result<u64> {
        self.kv.take_or("seed", 0)
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn manifest(&self, command: &str, seed: u64, outputs: &[&str], extra: &[(String, String)]) -> Result<()> {
        let entries = extra.iter().cloned().chain([("outputs".to_string(), outputs.join(","))]);
        write_manifest(
            &self.out,
            command,
            seed,
            Some(&self.raw),
            &self.model.describe(),
            entries.collect(),
            self.started,
        )
    }
}

fn output_dir(flag: Option<PathBuf>, configured: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or(configured)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// `manifest.txt`: flat `key = value` lines. The run config is embedded
/// under `config.`, so the manifest alone reproduces the run.
fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: Option<&KeyValues>,
    model: &[(String, String)],
    extra: Vec<(String, String)>,
    started: Instant,
) -> Result<()> {
    let mut text = String::from("# mfg-master run manifest\n");
    let mut line = |k: &str, v: &str| {
        let _ = writeln!(text, "{k} = {v}");
    };
    line("command", command);
    line("version", env!("CARGO_PKG_VERSION"));
    line("seed", &seed.to_string());
    if let Some(kv) = config {
        line("config_hash", &kv.hash());
    }
    for (k, v) in model {
        line(&format!("model_info.{k}"), v);
    }
    for (k, v) in &extra {
        line(k, v);
    }
    line("wall_seconds", &format!("{:.3}", started.elapsed().as_secs_f64()));
    if let Some(kv) = config {
        for l in kv.canonical().lines() {
            text.push_str("config.");
            text.push_str(l);
            text.push('\n');
        }
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train_dgme(common: &Common) -> Result<String> {
    let mut s = Session::open(common, Some("dgme"), &["dgme", "net"])?;
    let config = DgmeConfig::from_config(&mut s.kv)?;
    s.finish()?;
    let solution = train_dgme(s.model.as_ref(), &config)?;
    s.create_out()?;
    save_checkpoint(&solution.net, &s.out.join("network.ckpt"))?;
    let mut trace = String::from("iteration,loss\n");
    for (i, l) in solution.loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{l:?}");
    }
    write_file(&s.out.join("loss_trace.csv"), &trace)?;
    let mut epochs = String::from("epoch,mean_loss\n");
    for (i, l) in solution.epoch_losses.iter().enumerate() {
        let _ = writeln!(epochs, "{i},{l:?}");
    }
    write_file(&s.out.join("loss_epochs.csv"), &epochs)?;
    s.manifest(
        "train-dgme",
        config.seed,
        &["network.ckpt", "loss_trace.csv", "loss_epochs.csv"],
        &[("holdout_loss".into(), format!("{:?}", solution.holdout_loss))],
    )?;
    Ok(format!("held-out loss {:.6e}; wrote {}", solution.holdout_loss, s.out.display()))
}

fn cmd_train_dbme(common: &Common) -> Result<String> {
    let mut s = Session::open(common, Some("dbme"), &["dbme", "net"])?;
    let config = DbmeConfig::from_config(&mut s.kv, s.model.horizon())?;
    s.finish()?;
    let solution = train_dbme(s.model.as_ref(), &config)?;
    s.create_out()?;
    solution.save(&s.out)?;
    s.manifest(
        "train-dbme",
        config.seed,
        &["node_*.ckpt", "epsilons.csv", "losses.csv"],
        &[
            ("max_epsilon".into(), format!("{:?}", solution.max_epsilon())),
            ("lipschitz_bound".into(), format!("{:?}", solution.lipschitz_bound)),
        ],
    )?;
    Ok(format!(
        "max held-out loss {:.6e} over {} nodes; wrote {}",
        solution.max_epsilon(),
        solution.nets.len(),
        s.out.display()
    ))
}

fn oracle_options(kv: &mut KeyValues) -> Result<(f64, PicardOptions)> {
    let d = PicardOptions::default();
    let step = kv.take_or("oracle.step", 0.01)?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("oracle.step must be positive, got {step}")));
    }
    let options = PicardOptions {
        damping: kv.take_or("oracle.damping", d.damping)?,
        tolerance: kv.take_or("oracle.tolerance", d.tolerance)?,
        max_iterations: kv.take_or("oracle.max_iterations", d.max_iterations)?,
    };
    if !(options.damping > 0.0 && options.damping <= 1.0) || !(options.tolerance > 0.0) {
        return Err(Error::Config("oracle.damping must lie in (0, 1] and oracle.tolerance be positive".into()));
    }
    Ok((step, options))
}

/// Parses `a,b,...` into a distribution, normalizing within 1e-10 of the
/// simplex.
pub fn parse_eta(text: &str, d: usize) -> Result<Distribution> {
    let eta = Distribution::parse(text).map_err(|e| Error::Config(format!("--eta {text:?}: {e}")))?;
    if eta.dim() != d {
        return Err(Error::Config(format!(
            "--eta has {} entries but the model has {d} states",
            eta.dim()
        )));
    }
    Ok(eta)
}

fn eta_arg(flag: Option<&str>, kv: &mut KeyValues, d: usize) -> Result<Distribution> {
    let from_config = kv.take_opt_string("eta");
    match flag.map(str::to_string).or(from_config) {
        Some(text) => parse_eta(&text, d),
        None => Err(Error::Config("an initial distribution is required (--eta or `eta` in the config)".into())),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn cmd_solve_oracle(common: &Common, eta: Option<&str>) -> Result<String> {
    let mut s = Session::open(common, None, &["oracle"])?;
    let (step, options) = oracle_options(&mut s.kv)?;
    let eta = eta_arg(eta, &mut s.kv, s.model.num_states())?;
    let seed = s.seed()?;
    s.finish()?;
    let grid = TimeGrid::with_step(0.0, s.model.horizon(), step)?;
    let trajectory = solve_mfg_system(s.model.as_ref(), &eta, &grid, &options)?;
    s.create_out()?;
    trajectory.save_csv(&s.out.join("trajectory.csv"))?;
    s.manifest(
        "solve-oracle",
        seed,
        &["trajectory.csv"],
        &[("eta".into(), format_list(eta.as_slice()))],
    )?;
    Ok(format!("u(0, .) = ({})", format_list(&trajectory.values_u[0])))
}

fn format_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// A loaded surface; the owning storage for [`ValueSurface`] views.
enum LoadedSurface {
    Neural(NeuralSurface),
    Dbme(DbmeSolution),
    Oracle { step: f64, options: PicardOptions },
}

impl LoadedSurface {
    fn load(spec: &str, oracle: (f64, PicardOptions)) -> Result<Self> {
        if spec == "oracle" {
            return Ok(LoadedSurface::Oracle {
                step: oracle.0,
                options: oracle.1,
            });
        }
        match spec.split_once(':') {
            Some(("dgme", path)) => {
                let path = Path::new(path);
                let file = if path.is_dir() { path.join("network.ckpt") } else { path.to_path_buf() };
                Ok(LoadedSurface::Neural(load_checkpoint(&file)?))
            }
            Some(("dbme", path)) => Ok(LoadedSurface::Dbme(DbmeSolution::load(Path::new(path))?)),
            _ => Err(Error::Config(format!(
                "surface {spec:?}: expected dgme:<path>, dbme:<dir> or oracle"
            ))),
        }
    }

    fn view<'a>(&'a self, model: &'a dyn MeanFieldModel) -> Result<Box<dyn ValueSurface + 'a>> {
        let d = model.num_states();
        let check = |actual: usize| {
            if actual == d {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: d, actual })
            }
        };
        match self {
            LoadedSurface::Neural(net) => {
                check(net.num_states())?;
                if !net.has_time_input() {
                    return Err(Error::Config("a dgme surface needs a network with a time input".into()));
                }
                Ok(Box::new(net))
            }
            LoadedSurface::Dbme(solution) => {
                if let Some(net) = solution.nets.first() {
                    check(net.num_states())?;
                }
                Ok(Box::new(DbmeSurface { solution, model }))
            }
            LoadedSurface::Oracle { step, options } => Ok(Box::new(OracleSurface {
                model,
                step: *step,
                options: *options,
            })),
        }
    }

    fn grid(&self) -> Option<&TimeGrid> {
        match self {
            LoadedSurface::Dbme(s) => Some(&s.grid),
            _ => None,
        }
    }
}

fn default_times(horizon: f64, surfaces: &[&LoadedSurface]) -> Vec<f64> {
    match surfaces.iter().find_map(|s| s.grid()) {
        Some(grid) => grid.nodes().to_vec(),
        None => (0..=10).map(|i| horizon * i as f64 / 10.0).collect(),
    }
}

fn cmd_compare(common: &Common, a: &str, b: &str, times: Option<&str>, samples: Option<usize>) -> Result<String> {
    let mut s = Session::open(common, None, &["oracle", "compare"])?;
    let oracle = oracle_options(&mut s.kv)?;
    let seed = s.seed()?;
    let config_samples = s.kv.take_or("compare.samples", 1000usize)?;
    let config_times = s.kv.take_opt_string("compare.times");
    s.finish()?;
    let la = LoadedSurface::load(a, oracle)?;
    let lb = LoadedSurface::load(b, oracle)?;
    let times = match times.map(str::to_string).or(config_times) {
        Some(t) => parse_list(&t, "time")?,
        None => default_times(s.model.horizon(), &[&la, &lb]),
    };
    let samples = samples.unwrap_or(config_samples);
    let model = s.model.as_ref();
    let report = compare_surfaces(
        la.view(model)?.as_ref(),
        lb.view(model)?.as_ref(),
        &times,
        samples,
        seed,
        common.threads,
    )?;
    s.create_out()?;
    let path = s.out.join("comparison.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&path, e))?;
    s.manifest(
        "compare",
        seed,
        &["comparison.csv"],
        &[("a".into(), a.into()), ("b".into(), b.into()), ("samples".into(), samples.to_string())],
    )?;
    Ok(format!(
        "largest per-time mean {:.6e}, largest sup {:.6e}",
        report.max_mean(),
        report.max_sup()
    ))
}

fn cmd_reconstruct(common: &Common, surface: &str, eta: Option<&str>, intervals: Option<usize>) -> Result<String> {
    let mut s = Session::open(common, None, &["oracle", "reconstruct"])?;
    let oracle = oracle_options(&mut s.kv)?;
    let eta = eta_arg(eta, &mut s.kv, s.model.num_states())?;
    let seed = s.seed()?;
    let config_intervals = s.kv.take_opt::<usize>("reconstruct.intervals")?;
    s.finish()?;
    let loaded = LoadedSurface::load(surface, oracle)?;
    let grid = reconstruction_grid(&loaded, s.model.horizon(), intervals.or(config_intervals))?;
    let model = s.model.as_ref();
    let trajectory = reconstruct_equilibrium(loaded.view(model)?.as_ref(), model, &eta, &grid)?;
    s.create_out()?;
    export_trajectory(&trajectory, &s.out.join("trajectory.csv"))?;
    s.manifest(
        "reconstruct",
        seed,
        &["trajectory.csv"],
        &[("surface".into(), surface.into()), ("eta".into(), format_list(eta.as_slice()))],
    )?;
    Ok(format!("u(0, .) = ({})", format_list(&trajectory.values_u[0])))
}

fn reconstruction_grid(loaded: &LoadedSurface, horizon: f64, intervals: Option<usize>) -> Result<TimeGrid> {
    match (intervals, loaded) {
        (Some(n), _) => TimeGrid::uniform(0.0, horizon, n),
        (None, LoadedSurface::Dbme(s)) => Ok(s.grid.clone()),
        (None, LoadedSurface::Oracle { step, .. }) => TimeGrid::with_step(0.0, horizon, *step),
        (None, LoadedSurface::Neural(_)) => TimeGrid::uniform(0.0, horizon, 50),
    }
}

fn cmd_sample_study(d: usize, k: &str, trials: usize, seed: u64, out: Option<PathBuf>) -> Result<String> {
    let started = Instant::now();
    let ks: Vec<usize> = parse_list(k, "K")?;
    let study = sampling_rate_study(d, &ks, trials, seed)?;
    let out = output_dir(out, None);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("sampling.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    study
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&path, e))?;
    write_manifest(
        &out,
        "sample-study",
        seed,
        None,
        &[],
        vec![
            ("d".into(), d.to_string()),
            ("K".into(), k.into()),
            ("trials".into(), trials.to_string()),
            ("slope".into(), format!("{:?}", study.slope)),
            ("outputs".into(), "sampling.csv".into()),
        ],
        started,
    )?;
    Ok(format!(
        "fitted slope {:.4} (rate exponent -1/(d-1) = {:.4})",
        study.slope,
        -1.0 / (d as f64 - 1.0)
    ))
}

struct ExportArgs {
    surface: Option<String>,
    times: Option<String>,
    eta: Option<String>,
    resolution: usize,
    run: Option<PathBuf>,
    target_loss: Option<f64>,
    dims: String,
}

fn cmd_export(common: &Common, kind: &str, args: ExportArgs) -> Result<String> {
    let kind: FigureKind = kind.parse()?;
    let reads: &[&str] = match kind {
        FigureKind::RuntimeScaling => &["oracle", "dgme", "net"],
        _ => &["oracle"],
    };
    let mut s = Session::open(common, None, reads)?;
    let oracle = oracle_options(&mut s.kv)?;
    let seed = s.seed()?;
    let eta = match kind {
        FigureKind::Trajectory => Some(eta_arg(args.eta.as_deref(), &mut s.kv, s.model.num_states())?),
        _ => None,
    };
    let base_dgme = match kind {
        FigureKind::RuntimeScaling => Some(DgmeConfig::from_config(&mut s.kv)?),
        _ => None,
    };
    let (b, horizon) = match kind {
        FigureKind::RuntimeScaling => (s.kv.take_or("model.b", 4.0)?, s.model.horizon()),
        _ => (0.0, 0.0),
    };
    s.finish()?;
    s.create_out()?;
    let model = s.model.as_ref();
    let need_surface = || -> Result<LoadedSurface> {
        let spec = args
            .surface
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--surface is required for {kind:?}")))?;
        LoadedSurface::load(spec, oracle)
    };
    let times = |loaded: &LoadedSurface| -> Result<Vec<f64>> {
        match &args.times {
            Some(t) => parse_list(t, "time"),
            None => Ok(default_times(model.horizon(), &[loaded])),
        }
    };
    let file = match kind {
        FigureKind::D2Lines => {
            let loaded = need_surface()?;
            export_d2_lines(loaded.view(model)?.as_ref(), &times(&loaded)?, &s.out.join("d2_lines.csv"))?;
            "d2_lines.csv"
        }
        FigureKind::D3SimplexHeat => {
            let loaded = need_surface()?;
            export_d3_simplex_heat(
                loaded.view(model)?.as_ref(),
                &times(&loaded)?,
                args.resolution,
                &s.out.join("d3_simplex_heat.csv"),
            )?;
            "d3_simplex_heat.csv"
        }
        FigureKind::Trajectory => {
            let loaded = need_surface()?;
            let grid = reconstruction_grid(&loaded, model.horizon(), None)?;
            let eta = eta.expect("parsed above");
            let tr = reconstruct_equilibrium(loaded.view(model)?.as_ref(), model, &eta, &grid)?;
            export_trajectory(&tr, &s.out.join("trajectory.csv"))?;
            "trajectory.csv"
        }
        FigureKind::LossCurves => {
            let run = args
                .run
                .as_deref()
                .ok_or_else(|| Error::Config("--run <training output dir> is required for loss-curves".into()))?;
            copy_loss_curves(run, &s.out.join("loss_curves.csv"))?;
            "loss_curves.csv"
        }
        FigureKind::RuntimeScaling => {
            let target = args
                .target_loss
                .ok_or_else(|| Error::Config("--target-loss is required for runtime-scaling".into()))?;
            let dims: Vec<usize> = parse_list(&args.dims, "dimension")?;
            let rows = runtime_scaling(&dims, target, b, horizon, base_dgme.as_ref().expect("parsed above"))?;
            export_runtime_scaling(&rows, &s.out.join("runtime_scaling.csv"))?;
            "runtime_scaling.csv"
        }
    };
    s.manifest("export", seed, &[file], &[])?;
    Ok(format!("wrote {}", s.out.join(file).display()))
}

/// DGME runs carry `loss_epochs.csv`; DBME runs carry per-node traces, which
/// are averaged per node over epochs of thirty iterations.
fn copy_loss_curves(run: &Path, dest: &Path) -> Result<()> {
    let dgme = run.join("loss_epochs.csv");
    if dgme.exists() {
        let text = std::fs::read_to_string(&dgme).map_err(|e| Error::io(&dgme, e))?;
        return write_file(dest, &text);
    }
    let solution = DbmeSolution::load(run)?;
    let mut text = String::from("node,epoch,mean_loss\n");
    for (node, trace) in solution.loss_traces.iter().enumerate() {
        for (epoch, chunk) in trace.chunks(30).enumerate() {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let _ = writeln!(text, "{node},{epoch},{mean:?}");
        }
    }
    write_file(dest, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run_in(args: &[&str]) -> i32 {
        run(std::iter::once("mfg-master").chain(args.iter().copied()))
    }

    #[test]
    fn solve_oracle_writes_the_symmetric_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(dir.path(), "q.cfg", "model = quadratic\nmodel.d = 2\nmodel.b = 4\nmodel.T = 0.5\n");
        let out = dir.path().join("out");
        let code = run_in(&[
            "solve-oracle",
            "--config",
            cfg.to_str().unwrap(),
            "--eta",
            "0.5,0.5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
        let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[0], 0.0);
        assert!((first[2] - 0.25).abs() < 1e-6);
        let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("config.model = quadratic"));
        assert!(manifest.contains("config_hash = "));
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.cfg");
        assert_eq!(run_in(&["train-dgme", "--config", missing.to_str().unwrap()]), 1);
        let typo = write(dir.path(), "typo.cfg", "model = quadratic\ndgme.iteratons = 3\n");
        assert_eq!(run_in(&["train-dgme", "--config", typo.to_str().unwrap()]), 1);
        assert_eq!(run_in(&["no-such-command"]), 1);
        // A single Picard iteration cannot meet the tolerance.
        let strict = write(
            dir.path(),
            "strict.cfg",
            "model = quadratic\nmodel.d = 3\noracle.max_iterations = 1\n",
        );
        let out = dir.path().join("o");
        let code = run_in(&[
            "solve-oracle",
            "--config",
            strict.to_str().unwrap(),
            "--eta",
            "0.7,0.2,0.1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn eta_parsing() {
        assert!(parse_eta("0.5,0.5", 2).is_ok());
        assert!(parse_eta("0.5,0.5", 3).is_err());
        assert!(parse_eta("0.6,0.6", 2).is_err());
        let e = parse_eta("0.3,0.70000000000001", 2).unwrap();
        assert!((e.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sample_study_runs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        let code = run_in(&[
            "sample-study",
            "--d",
            "2",
            "--K",
            "16,64,256",
            "--trials",
            "1000",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(out.join("sampling.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn output_dir_precedence() {
        assert_eq!(output_dir(Some("a".into()), Some("c".into())), PathBuf::from("a"));
        if std::env::var_os(OUT_DIR_ENV).is_none() {
            assert_eq!(output_dir(None, Some("c".into())), PathBuf::from("c"));
            assert_eq!(output_dir(None, None), PathBuf::from(DEFAULT_OUT_DIR));
        }
    }
}
