//! Command-line front end: case generation, offline calibration, the
//! frozen-layer replacement study, latency benchmarking, and the property
//! selftest.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 property
//! failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use dsattn::calibration::FitObjective;
use dsattn::harness::{
    bench_latency, evaluate_layers, fit_layers, gen_case, load_case, load_layer, run_replacement,
    save_case, save_layer, ExperimentConfig,
};
use dsattn::numerics::stream_key;
use dsattn::sinkhorn::KernelKind;

#[derive(Parser)]
#[command(
    name = "dsattn",
    about = "Finite-budget doubly-stochastic attention, compiled into non-iterative operators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON config document; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tokens per sequence.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Teacher entropy scale.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Teacher normalization budget S (even budgets end on a column).
    #[arg(long)]
    budget: Option<u32>,
    /// Teacher kernel: "score" or "quadratic_cost".
    #[arg(long)]
    kernel: Option<String>,
    /// Reduced normalizer budgets to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    normalizer_budgets: Option<Vec<u32>>,
    /// Slice count L.
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    fit_examples: Option<usize>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Fit objectives: comma list of "ls" and "kl".
    #[arg(long, value_delimiter = ',')]
    objectives: Option<Vec<String>>,
    #[arg(long)]
    warmup_runs: Option<usize>,
    #[arg(long)]
    timed_runs: Option<usize>,
    /// Sequence lengths for the latency benchmark, comma separated.
    #[arg(long, value_delimiter = ',')]
    bench_lengths: Option<Vec<usize>>,
    #[arg(long)]
    bench_fit_examples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit synthetic case files.
    Gen {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Number of case files to write.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a compiled layer and write it to a layer file.
    Calibrate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Directory of case files to calibrate on (default: generate from
        /// the config's fit partition).
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frozen-layer replacement study; writes one CSV row per
    /// (operator, eval case).
    Eval {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Evaluate a saved layer file instead of fitting in-process.
        #[arg(long)]
        layer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-latency benchmark with warmup and break-even accounting.
    Bench {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full property suite; exits 2 on any failure.
    Selftest,
}

fn parse_kernel(text: &str) -> Result<KernelKind, String> {
    match text {
        "score" => Ok(KernelKind::Score),
        "quadratic_cost" => Ok(KernelKind::QuadraticCost),
        other => Err(format!("unknown kernel '{other}' (use score or quadratic_cost)")),
    }
}

fn parse_objective(text: &str) -> Result<FitObjective, String> {
    match text {
        "ls" => Ok(FitObjective::LeastSquares),
        "kl" => Ok(FitObjective::Kl),
        other => Err(format!("unknown objective '{other}' (use ls or kl)")),
    }
}

fn effective_config(flags: &ConfigFlags) -> Result<ExperimentConfig, String> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| format!("malformed config {}: {e}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.n {
        cfg.n = v;
    }
    if let Some(v) = flags.d_h {
        cfg.d_h = v;
    }
    if let Some(v) = flags.d_v {
        cfg.d_v = v;
    }
    if let Some(v) = flags.heads {
        cfg.heads = v;
    }
    if let Some(v) = flags.epsilon {
        cfg.teacher.epsilon = v;
    }
    if let Some(v) = flags.budget {
        cfg.teacher.budget = v;
    }
    if let Some(k) = &flags.kernel {
        cfg.teacher.kernel = parse_kernel(k)?;
    }
    if let Some(v) = &flags.normalizer_budgets {
        cfg.normalizer_budgets = v.clone();
    }
    if let Some(v) = flags.slices {
        cfg.slices = v;
    }
    if let Some(v) = flags.fit_examples {
        cfg.fit_examples = v;
    }
    if let Some(v) = flags.eval_examples {
        cfg.eval_examples = v;
    }
    if let Some(v) = flags.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = flags.mask_fraction {
        cfg.mask_fraction = v;
    }
    if let Some(objs) = &flags.objectives {
        cfg.objectives = objs
            .iter()
            .map(|o| parse_objective(o))
            .collect::<Result<Vec<_>, _>>()?;
    }
    if let Some(v) = flags.warmup_runs {
        cfg.warmup_runs = v;
    }
    if let Some(v) = flags.timed_runs {
        cfg.timed_runs = v;
    }
    if let Some(v) = &flags.bench_lengths {
        cfg.bench_lengths = v.clone();
    }
    if let Some(v) = flags.bench_fit_examples {
        cfg.bench_fit_examples = v;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(command: Command) -> Result<ExitCode, String> {
    match command {
        Command::Gen { flags, count, out_dir } => {
            let cfg = effective_config(&flags)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
            for i in 0..count {
                let seed = stream_key(cfg.seed, &[0x9e4, i as u64]);
                let case = gen_case(seed, cfg.n, cfg.d_h, cfg.d_v, cfg.mask_fraction)
                    .map_err(|e| e.to_string())?;
                let path = out_dir.join(format!("case_{i:04}.json"));
                save_case(&case, &path).map_err(|e| e.to_string())?;
            }
            println!("wrote {count} case files to {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { flags, cases, out } => {
            let mut cfg = effective_config(&flags)?;
            if cfg.objectives.len() != 1 {
                return Err("calibrate fits exactly one objective; pass --objectives ls or kl"
                    .to_string());
            }
            let layer = match cases {
                None => fit_layers(&cfg).map_err(|e| e.to_string())?.remove(0),
                Some(dir) => {
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "json"))
                        .collect();
                    paths.sort();
                    if paths.is_empty() {
                        return Err(format!("no case files in {}", dir.display()));
                    }
                    let loaded: Vec<_> = paths
                        .iter()
                        .map(|p| load_case(p).map_err(|e| format!("{}: {e}", p.display())))
                        .collect::<Result<_, _>>()?;
                    cfg.d_h = loaded[0].d_h();
                    let bank =
                        dsattn::sliced::SliceBank::sample(cfg.seed, cfg.slices, cfg.d_h);
                    let with_kl = cfg.objectives[0] == FitObjective::Kl;
                    let data = dsattn::calibration::build_fit_dataset(
                        &loaded,
                        &bank,
                        &cfg.teacher,
                        with_kl,
                    )
                    .map_err(|e| e.to_string())?;
                    match cfg.objectives[0] {
                        FitObjective::LeastSquares => {
                            dsattn::calibration::fit_ls(&data, &bank, &cfg.teacher, cfg.lambda)
                        }
                        FitObjective::Kl => {
                            dsattn::calibration::fit_kl(&data, &bank, &cfg.teacher, cfg.lambda)
                        }
                    }
                    .map_err(|e| e.to_string())?
                }
            };
            save_layer(&layer, &out).map_err(|e| e.to_string())?;
            println!(
                "layer ({}, L={}, {} cases, residual {:.3e}, {:.2}s) -> {}",
                layer.objective.label(),
                layer.bank.len(),
                layer.fit_stats.cases,
                layer.fit_stats.residual,
                layer.fit_stats.fit_seconds,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { flags, layer, out } => {
            let mut cfg = effective_config(&flags)?;
            let report = match layer {
                None => run_replacement(&cfg).map_err(|e| e.to_string())?,
                Some(path) => {
                    let loaded = load_layer(&path).map_err(|e| e.to_string())?;
                    cfg.teacher = loaded.teacher_cfg.clone();
                    cfg.d_h = loaded.bank.d_h();
                    cfg.slices = loaded.bank.len();
                    evaluate_layers(&cfg, std::slice::from_ref(&loaded))
                        .map_err(|e| e.to_string())?
                }
            };
            report.write_case_csv(&out).map_err(|e| e.to_string())?;
            println!("machine: {}", report.machine);
            println!(
                "{:<26} {:>7} {:>12} {:>12} {:>10} {:>10}",
                "operator", "cases", "rel_l2(med)", "rmse(med)", "row_err", "col_err"
            );
            for s in &report.summaries {
                println!(
                    "{:<26} {:>7} {:>12.4e} {:>12.4e} {:>10.3e} {:>10.3e}",
                    s.operator,
                    s.cases,
                    s.median_attention_rel_l2,
                    s.median_output_rmse,
                    s.mean_row_err,
                    s.mean_col_err
                );
            }
            for f in &report.fits {
                println!(
                    "fit {}: {} cases, residual {:.3e}, {:.2}s{}",
                    f.layer,
                    f.stats.cases,
                    f.stats.residual,
                    f.stats.fit_seconds,
                    if f.stats.converged { String::new() } else { " (NOT converged)".into() }
                );
            }
            println!("per-case rows -> {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { flags, out } => {
            let cfg = effective_config(&flags)?;
            let report = bench_latency(&cfg).map_err(|e| e.to_string())?;
            report.write_csv(&out).map_err(|e| e.to_string())?;
            println!("machine: {}", report.machine);
            println!(
                "{:>6} {:<26} {:<17} {:>11} {:>11} {:>7} {:>9} {:>12}",
                "n", "operator", "stage", "median_ms", "mean_ms", "passes", "speedup",
                "break_even"
            );
            for r in &report.rows {
                println!(
                    "{:>6} {:<26} {:<17} {:>11.3} {:>11.3} {:>7} {:>9.2} {:>12}",
                    r.n,
                    r.operator,
                    r.stage.label(),
                    r.median_ms,
                    r.mean_ms,
                    r.passes,
                    r.speedup_vs_compiled_one_sided,
                    if r.break_even_evals.is_finite() {
                        format!("{:.0}", r.break_even_evals)
                    } else {
                        "-".into()
                    }
                );
            }
            println!("rows -> {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let mut failed = false;
            for (name, result, seconds) in dsattn::selftest::run_all() {
                match result {
                    Ok(detail) => println!("PASS {name} ({seconds:.2}s): {detail}"),
                    Err(msg) => {
                        failed = true;
                        println!("FAIL {name} ({seconds:.2}s): {msg}");
                    }
                }
            }
            if failed {
                Ok(ExitCode::from(2))
            } else {
                println!("selftest: all checks passed");
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
