use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;
use vbfsi_core::config::Settings;
use vbfsi_core::nalgebra::DMatrix;
use vbfsi_core::obsdata::{
    inject_stream_outliers, load_dense_csv, load_dense_matrices, load_long_csv, load_sparse_csv,
    save_dense_blocks, save_long_csv, save_sparse_csv, DayStream, OutlierInjectionSpec, SparseMap,
};
use vbfsi_core::pipeline::{mre, rmse, run_online, EtaSchedule, OnlineRun, ETA_GRID, P_GRID};
use vbfsi_core::robust::support_f1;
use vbfsi_core::synth::{masked_stream, synthetic_matrices};

use crate::{Cli, Command, EvalArgs, InputFormat, RobustArgs, RunArgs, SweepArgs, SynthArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Bad flags or settings.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<vbfsi_core::Error>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            };
        }
    }
    EXIT_DATA
}

struct Ctx {
    settings: Settings,
    out_dir: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

fn set(s: &mut Settings, key: &str, value: Option<impl ToString>) -> Result<()> {
    if let Some(v) = value {
        s.set(key, &v.to_string())
            .map_err(|e| usage(format!("--{}: {e}", key.replace('_', "-"))))?;
    }
    Ok(())
}

fn load_settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Settings::from_text(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => Settings::default(),
    };
    for kv in &cli.global.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), v.trim())
            .map_err(|e| usage(format!("--set {kv}: {e}")))?;
    }
    set(&mut s, "seed", cli.global.seed)?;
    match &cli.command {
        Command::Synth(a) => {
            set(&mut s, "n", a.n)?;
            set(&mut s, "t", a.t)?;
            set(&mut s, "days", a.days)?;
            set(&mut s, "rank", a.rank)?;
            set(&mut s, "p", a.p)?;
            set(&mut s, "noise_std", a.noise_std)?;
            set(&mut s, "drift_std", a.drift_std)?;
            set(&mut s, "periodic", a.periodic.then_some(true))?;
            set(&mut s, "outlier_fraction", a.outlier_fraction)?;
            set(&mut s, "outlier_magnitude", a.outlier_magnitude)?;
        }
        Command::Impute(a) => run_flags(&mut s, a)?,
        Command::Robust(a) => run_flags(&mut s, &a.run)?,
        Command::Sweep(_) | Command::Eval(_) => {}
    }
    s.validate().map_err(|e| usage(e.to_string()))?;
    Ok(s)
}

fn run_flags(s: &mut Settings, a: &RunArgs) -> Result<()> {
    set(s, "eta", a.eta)?;
    set(s, "schedule", a.schedule.as_ref())?;
    set(s, "warmup_days", a.warmup_days)?;
    set(s, "robust", a.robust.then_some(true))
}

pub fn run(cli: &Cli) -> Result<()> {
    let settings = load_settings(cli)?;
    fs::create_dir_all(&cli.global.out_dir)
        .with_context(|| format!("creating {}", cli.global.out_dir.display()))?;
    let ctx = Ctx {
        settings,
        out_dir: cli.global.out_dir.clone(),
        verbose: cli.global.verbose,
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Impute(a) => cmd_impute(&ctx, a, None),
        Command::Robust(a) => cmd_robust(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
    }
}

/// The stream `synth` writes for these settings, with the injected outliers
/// when `outlier_fraction > 0`.
fn synthetic_stream(s: &Settings) -> Result<(DayStream, Option<Vec<SparseMap>>)> {
    let stream = masked_stream(synthetic_matrices(&s.synth)?, s.synth.p, s.synth.seed)?;
    corrupt(stream, s)
}

fn corrupt(stream: DayStream, s: &Settings) -> Result<(DayStream, Option<Vec<SparseMap>>)> {
    if s.outlier_fraction > 0.0 {
        let spec =
            OutlierInjectionSpec::new(s.outlier_fraction, s.outlier_magnitude, s.synth.seed)?;
        let (c, truth) = inject_stream_outliers(&stream, &spec)?;
        Ok((c, Some(truth)))
    } else {
        Ok((stream, None))
    }
}

fn cmd_synth(ctx: &Ctx, _args: &SynthArgs) -> Result<()> {
    let s = &ctx.settings;
    let (stream, outliers) = synthetic_stream(s)?;
    save_long_csv(&stream, &ctx.path("stream.csv"))?;
    let truth = stream
        .ground_truth()
        .expect("synthetic streams carry truth");
    save_dense_blocks(truth, &s.missing_token, &ctx.path("truth.csv"))?;
    let mut files = vec!["stream.csv", "truth.csv"];
    if let Some(o) = &outliers {
        let days: Vec<(usize, &SparseMap)> = o.iter().enumerate().collect();
        save_sparse_csv(&days, "e", &ctx.path("outliers_truth.csv"))?;
        files.push("outliers_truth.csv");
    }
    files.push("manifest.json");
    let manifest = json!({
        "command": "synth",
        "seed": s.synth.seed,
        "synth": s.synth,
        "outlier_fraction": s.outlier_fraction,
        "outlier_magnitude": s.outlier_magnitude,
        "observed_per_day": stream.days().iter().map(|d| d.len()).collect::<Vec<_>>(),
        "files": files,
    });
    ctx.write(
        "manifest.json",
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    ctx.log(format!(
        "wrote {} day(s) of {}x{} to {}",
        stream.len(),
        s.synth.n,
        s.synth.t,
        ctx.out_dir.display()
    ));
    Ok(())
}

fn load_input(ctx: &Ctx, args: &RunArgs) -> Result<DayStream> {
    let s = &ctx.settings;
    let stream = match args.format {
        InputFormat::Long => load_long_csv(&args.input, s.dims)?,
        InputFormat::Dense => load_dense_csv(&args.input, &s.missing_token)?,
    };
    match &args.truth {
        Some(path) => {
            let truth = load_dense_matrices(path, &s.missing_token)?;
            Ok(stream.with_ground_truth(truth)?)
        }
        None => Ok(stream),
    }
}

fn online(ctx: &Ctx, stream: &DayStream, schedule: &EtaSchedule) -> Result<OnlineRun> {
    let mut cfg = ctx.settings.pipeline.clone();
    if stream.len() == 1 {
        cfg.warmup_days = 0;
    } else if stream.len() <= cfg.warmup_days {
        return Err(vbfsi_core::Error::InvalidParameter(format!(
            "stream has {} days, warmup needs {} plus at least one",
            stream.len(),
            cfg.warmup_days
        ))
        .into());
    }
    Ok(run_online(stream, &cfg, schedule)?)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| v.to_string())
}

fn cmd_impute(ctx: &Ctx, args: &RunArgs, outlier_truth: Option<&Path>) -> Result<()> {
    let s = &ctx.settings;
    let stream = load_input(ctx, args)?;
    let schedule = s.eta_schedule()?;
    ctx.log(format!(
        "{} day(s), schedule {}, robust {}",
        stream.len(),
        schedule.name(),
        s.pipeline.robust
    ));
    let mut run = online(ctx, &stream, &schedule)?;
    if let Some(path) = outlier_truth {
        let known = load_sparse_csv(path)?;
        let empty = SparseMap::new();
        for (report, out) in run.report.days.iter_mut().zip(&run.outputs) {
            let est = out.outliers.as_ref().unwrap_or(&empty);
            let truth = known.get(&out.day).unwrap_or(&empty);
            report.outlier_f1 = Some(support_f1(est, truth));
        }
    }
    for out in &run.outputs {
        let name = format!("imputed_day{}.csv", out.day);
        save_dense_blocks(
            std::slice::from_ref(&out.estimate),
            &s.missing_token,
            &ctx.path(&name),
        )?;
        if let Some(o) = &out.outliers {
            save_sparse_csv(
                &[(out.day, o)],
                "e_hat",
                &ctx.path(&format!("outliers_day{}.csv", out.day)),
            )?;
        }
    }
    ctx.write("report.jsonl", &run.report.to_json_lines())?;
    for d in &run.report.days {
        ctx.log(format!(
            "day {}: mre {} iters {} converged {} rank {}",
            d.day,
            fmt_opt(d.mre),
            d.iters,
            d.converged,
            d.rank
        ));
        if let Some(f1) = d.outlier_f1 {
            println!("day {} outlier_f1 {f1}", d.day);
        }
    }
    println!(
        "days {} mean_mre {} mean_rmse {}",
        run.report.days.len(),
        fmt_opt(run.report.mean_mre()),
        fmt_opt(run.report.mean_rmse())
    );
    Ok(())
}

fn cmd_robust(ctx: &Ctx, args: &RobustArgs) -> Result<()> {
    if !ctx.settings.pipeline.robust {
        return Err(usage(
            "the robust path needs --robust (or robust = true in the config)",
        ));
    }
    cmd_impute(ctx, &args.run, args.outlier_truth.as_deref())
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let s = &ctx.settings;
    let etas = args.etas.clone().unwrap_or_else(|| ETA_GRID.to_vec());
    let ps = args.ps.clone().unwrap_or_else(|| P_GRID.to_vec());
    if etas.is_empty() || ps.is_empty() {
        return Err(usage("empty grid"));
    }
    let truth = match &args.truth {
        Some(path) => load_dense_matrices(path, &s.missing_token)?,
        None => synthetic_matrices(&s.synth)?,
    };
    let streams = ps
        .iter()
        .map(|&p| corrupt(masked_stream(truth.clone(), p, s.synth.seed)?, s).map(|x| x.0))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, f64)> = (0..ps.len())
        .flat_map(|k| etas.iter().map(move |&e| (k, e)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(k, eta)| {
            let sched = EtaSchedule::Constant(eta);
            sched.validate().map_err(|e| usage(e.to_string()))?;
            let run = online(ctx, &streams[k], &sched)?;
            ctx.log(format!(
                "p {} eta {eta}: mre {}",
                ps[k],
                fmt_opt(run.report.mean_mre())
            ));
            Ok(format!(
                "{},{eta},{},{}\n",
                ps[k],
                fmt_opt(run.report.mean_mre()),
                fmt_opt(run.report.mean_rmse())
            ))
        })
        .collect::<Result<Vec<String>>>()?;
    let mut body = String::from("p,eta,mre,rmse\n");
    body.extend(rows);
    ctx.write("sweep.csv", &body)?;
    println!("{} grid points written to sweep.csv", jobs.len());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let s = &ctx.settings;
    let truth = load_dense_matrices(&args.truth, &s.missing_token)?;
    let mut estimates: Vec<DMatrix<f64>> = Vec::new();
    for path in &args.estimate {
        estimates.extend(load_dense_matrices(path, &s.missing_token)?);
    }
    let observed = match &args.input {
        Some(path) => Some(load_long_csv(path, s.dims)?),
        None => None,
    };
    let mut body = String::from("day,mre,rmse\n");
    for (k, est) in estimates.iter().enumerate() {
        let day = args.first_day + k;
        let x = truth
            .get(day)
            .ok_or_else(|| vbfsi_core::Error::Dimension(format!("truth has no day {day}")))?;
        if x.shape() != est.shape() {
            return Err(vbfsi_core::Error::Dimension(format!(
                "day {day}: truth {:?} vs estimate {:?}",
                x.shape(),
                est.shape()
            ))
            .into());
        }
        let obs = observed
            .as_ref()
            .and_then(|o| o.days().iter().find(|d| d.day_index() == day));
        let holdout: Vec<(usize, usize)> = match obs {
            Some(o) => o.complement(),
            None => (0..x.nrows())
                .flat_map(|i| (0..x.ncols()).map(move |j| (i, j)))
                .collect(),
        };
        let m = mre(x, est, &holdout)?;
        let r = rmse(x, est, &holdout)?;
        println!("day {day} mre {m} rmse {r}");
        body.push_str(&format!("{day},{m},{r}\n"));
    }
    ctx.write("eval.csv", &body)?;
    Ok(())
}
