//! `cgfm`: train, forecast, evaluate, verify and pca.

mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use log::info;

use args::{to_toml, Cli, Command, RunArgs, VerifyArgs, RESOLVED_CONFIG};
use cgfm::dataio::{read_window_csv, rows_to_windows, save_aux_csv, windows_to_rows, write_window_csv};
use cgfm::evalkit::{aggregate, pca_trajectory, ForecastReport};
use cgfm::netcore::{load_params, save_params};
use cgfm::pipeline::{forecast_split, score, train_model, RunConfig};
use cgfm::sampling::threads_from_env;
use cgfm::training::write_log_csv;
use cgfm::verify::{any_failed, run_suite, Fault, VerifyOptions};
use cgfm::{CgfmError, Result};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(run) => cmd_train(&run),
        Command::Forecast { run, params } => cmd_forecast(&run, params),
        Command::Evaluate { run, forecast, runs } => match runs {
            Some(dir) => cmd_aggregate(&dir, run.out.as_deref()),
            None => cmd_evaluate(&run, forecast),
        },
        Command::Verify(v) => cmd_verify(&v),
        Command::Pca { forecast, output } => cmd_pca(&forecast, output),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CgfmError::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            })
        }
    }
}

/// Resolves the config and echoes it to `<out>/config.resolved` before any
/// work. Refuses to overwrite the input config with different contents.
fn prepare(run: &RunArgs) -> Result<RunConfig> {
    let cfg = run.resolve()?;
    std::fs::create_dir_all(&cfg.out)?;
    let text = to_toml(&cfg)?;
    let dest = cfg.out.join(RESOLVED_CONFIG);
    if let Some(src) = &run.config {
        if same_file(src, &dest) {
            if std::fs::read_to_string(&dest)? != text {
                return Err(CgfmError::Config(format!(
                    "flags would overwrite the input config {}; pass a different --out",
                    src.display()
                )));
            }
            return Ok(cfg);
        }
    }
    std::fs::write(dest, text)?;
    Ok(cfg)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn cmd_train(run: &RunArgs) -> Result<u8> {
    let cfg = prepare(run)?;
    let ds = cfg.build_dataset()?;
    let aux = cfg.build_aux(&ds)?;
    info!("{} windows, {} channels", ds.len(), ds.channels());
    let mut outcome = train_model(&cfg, &ds, aux.as_ref())?;
    if !cfg.timing {
        outcome.log.iter_mut().for_each(|r| r.wall_ms = 0);
    }
    std::fs::write(cfg.out.join("params.bin"), save_params(&outcome.net))?;
    write_log_csv(&outcome.log, cfg.out.join("train_log.csv"))?;
    std::fs::write(
        cfg.out.join("norm_stats.json"),
        serde_json::to_string_pretty(ds.stats())? + "\n",
    )?;
    if let Some(a) = &aux {
        save_aux_csv(a, cfg.out.join("aux.csv"))?;
    }
    eprintln!(
        "trained {} steps; best validation loss {:.6} at step {}",
        outcome.steps, outcome.best_val, outcome.best_step
    );
    Ok(0)
}

fn cmd_forecast(run: &RunArgs, params: Option<PathBuf>) -> Result<u8> {
    let cfg = prepare(run)?;
    let params = params.unwrap_or_else(|| cfg.out.join("params.bin"));
    let bytes = std::fs::read(&params).map_err(|e| {
        CgfmError::Input(format!("cannot read parameter file {}: {e}", params.display()))
    })?;
    let net = load_params(&bytes)?;
    let ds = cfg.build_dataset()?;
    let aux = cfg.build_aux(&ds)?;
    let (idx, preds) = forecast_split(&cfg, &net, &ds, aux.as_ref(), cfg.eval_split, threads_from_env())?;
    let rows = windows_to_rows(&preds)?;
    write_window_csv(cfg.out.join("forecast.csv"), &idx, rows.view(), ds.channels(), ds.horizon())?;
    eprintln!("forecast {} {} windows", idx.len(), cfg.eval_split);
    Ok(0)
}

fn cmd_evaluate(run: &RunArgs, forecast: Option<PathBuf>) -> Result<u8> {
    let started = Instant::now();
    let cfg = prepare(run)?;
    let path = forecast.unwrap_or_else(|| cfg.out.join("forecast.csv"));
    let (idx, rows) = read_window_csv(&path)?;
    let ds = cfg.build_dataset()?;
    if let Some(&w) = idx.iter().find(|&&w| w >= ds.len()) {
        return Err(CgfmError::Input(format!(
            "forecast window {w} outside the dataset's {} windows",
            ds.len()
        )));
    }
    let preds = rows_to_windows(&rows, ds.channels(), ds.horizon())?;
    let mut report = score(&cfg, &ds, &idx, &preds)?;
    if cfg.timing {
        report.wall_ms = Some(started.elapsed().as_millis() as u64);
    }
    std::fs::write(cfg.out.join("report.json"), report.to_json()?)?;
    eprintln!("mse {:.6} mae {:.6} over {} windows", report.mse, report.mae, report.n_windows);
    Ok(0)
}

/// Aggregates `<dir>/*/report.json` into mean and standard deviation.
fn cmd_aggregate(dir: &Path, out: Option<&Path>) -> Result<u8> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CgfmError::Input(format!("no */report.json under {}", dir.display())));
    }
    let reports = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<ForecastReport>(&text)
                .map_err(|e| CgfmError::Format(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&reports)?;
    let json = serde_json::to_string_pretty(&agg)? + "\n";
    let dest = out.unwrap_or(dir).join("aggregate.json");
    std::fs::create_dir_all(dest.parent().unwrap_or(dir))?;
    std::fs::write(&dest, &json)?;
    print!("{json}");
    Ok(0)
}

fn cmd_verify(v: &VerifyArgs) -> Result<u8> {
    let opts = VerifyOptions {
        seed: v.seed,
        budget: v.budget_secs.map(Duration::from_secs_f64),
        fault: v.inject_fault.as_deref().map(|_| Fault::CorruptBackward),
    };
    let checks = run_suite(&opts);
    let failed = any_failed(&checks);
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "passed": !failed,
        "checks": checks,
    }))? + "\n";
    if let Some(p) = &v.json {
        std::fs::write(p, &json)?;
    }
    print!("{json}");
    for c in &checks {
        let mark = if c.skipped { "SKIP" } else if c.passed { "PASS" } else { "FAIL" };
        eprintln!("{mark} {} ({} ms)", c.name, c.ms);
    }
    Ok(if failed { EXIT_VERIFY } else { 0 })
}

fn cmd_pca(forecast: &Path, output: Option<PathBuf>) -> Result<u8> {
    let (idx, rows) = read_window_csv(forecast)?;
    let pca = pca_trajectory(&rows)?;
    let dest = output.unwrap_or_else(|| forecast.with_file_name("pca.csv"));
    let mut text = String::from("idx,pc1,pc2\n");
    for (w, p) in idx.iter().zip(pca.projection.outer_iter()) {
        text.push_str(&format!("{w},{:.16e},{:.16e}\n", p[0], p[1]));
    }
    std::fs::write(&dest, text)?;
    eprintln!(
        "explained variance ratio: pc1 {:.6}, pc2 {:.6}",
        pca.explained_variance_ratio[0], pca.explained_variance_ratio[1]
    );
    Ok(0)
}
