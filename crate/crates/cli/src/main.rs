use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nightseg::config::{self, Config};
use nightseg::evalkit::{self, EvalReport, VariantResult};
use nightseg::gradcheck::{self, GradcheckOptions};
use nightseg::synth::{build_dataset, dir_digest, Dataset, DatasetConfig, Taxonomy};
use nightseg::trainer::{self, RunOptions, TrainConfig, STATE_FILE};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "nightseg",
    version,
    about = "Day-to-night segmentation adaptation on synthetic street scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a directory of rendered predictions.
    Eval(EvalArgs),
    /// Train and compare several variants over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference checks of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    num_source: usize,
    #[arg(long, default_value_t = 200)]
    num_target: usize,
    #[arg(long, default_value_t = 50)]
    num_test: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Apply a named ablation variant before the overrides.
    #[arg(long)]
    variant: Option<String>,
    /// Continue from a training state (default: OUT/checkpoint.bin).
    #[arg(long, value_name = "STATE")]
    resume: Option<Option<PathBuf>>,
    /// Stop after this many completed steps, keeping the schedule of the
    /// full run.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    /// Held-out night test images.
    NightTest,
    /// Target night training images against their sealed labels.
    TargetNight,
}

#[derive(Args)]
struct EvalArgs {
    /// Training state or model checkpoint.
    #[arg(long, required_unless_present = "preds")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "night-test")]
    split: Split,
    /// Score `pred_%05d.ppm` files from this directory instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    preds: Option<PathBuf>,
    /// Report directory (default: next to the checkpoint or predictions).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip writing prediction images.
    #[arg(long)]
    no_render: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "baseline,dsr,dsr_full,dsr_fpa_nw,full"
    )]
    variants: Vec<String>,
    /// Seeds per variant, counting up from `trainer.seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Grid axes such as `trainer.alpha=0.75,1.0`; every combination is run
    /// for every variant.
    #[arg(long, num_args = 1.., value_name = "KEY=V1,V2")]
    sweep: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
    seeds: u64,
    /// Run only checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    /// Corrupt the analytic gradient of one check (exercises the failure path).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// Raised for violated internal invariants; maps to exit code 2.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "internal error: {}", self.0)
    }
}

impl std::error::Error for Internal {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use nightseg::Error as E;
    if err.downcast_ref::<Internal>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Shape { .. } | E::NonFinite { .. } | E::Backward(_) | E::DivByZero { .. }) => 2,
        _ => 1,
    }
}

fn resolve_config(args: &ConfigArgs, variant: Option<&str>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        Config::load(path)?.apply(&mut cfg)?;
    }
    if let Some(v) = variant {
        trainer::apply_variant(&mut cfg, v)?;
    }
    let mut overrides = Config::default();
    for s in &args.sets {
        overrides.set(s)?;
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> anyhow::Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn print_config(cfg: &TrainConfig, header: &str) {
    println!("# {header}");
    print!("{}", config::render(cfg));
    println!();
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let cfg = DatasetConfig {
        seed: args.seed,
        num_source: args.num_source,
        num_target: args.num_target,
        num_test: args.num_test,
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(&cfg, &Taxonomy::street(), &args.out)
        .with_context(|| format!("generating dataset in {}", args.out.display()))?;
    print!("{}", manifest.render());
    println!("digest = {}", dir_digest(&args.out)?);
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args.config, args.variant.as_deref())?;
    print_config(&cfg, "resolved configuration");
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_file(&args.out.join("run.cfg"), &config::render(&cfg))?;
    let opts = RunOptions {
        resume_from: args
            .resume
            .map(|p| p.unwrap_or_else(|| args.out.join(STATE_FILE))),
        stop_after: args.stop_after,
    };
    let summary = trainer::run(&cfg, &dataset, &Taxonomy::street(), &args.out, &opts)?;
    println!(
        "completed {} of {} steps; state written to {}",
        summary.state.iteration,
        cfg.total_iters,
        args.out.join(STATE_FILE).display()
    );
    if let Some(r) = summary.final_eval {
        print!("{}", r.to_markdown());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let taxonomy = Taxonomy::street();
    let dataset = load_dataset(&args.data)?;
    let (images, labels): (Vec<_>, Vec<_>) = match args.split {
        Split::NightTest => dataset.test.iter().map(|(x, y)| (x, y.clone())).unzip(),
        Split::TargetNight => {
            let sealed = Dataset::load_sealed_target_labels(&args.data)?;
            let n = sealed.shape()[0];
            if n != dataset.target.len() {
                bail!(
                    "{n} sealed labels for {} target pairs",
                    dataset.target.len()
                );
            }
            dataset
                .target
                .iter()
                .enumerate()
                .map(|(i, (_, night))| (night, sealed.index_first(i)))
                .unzip()
        }
    };
    if images.is_empty() {
        bail!("split has no samples");
    }
    let gts: Vec<_> = labels.iter().collect();
    let (preds, out_dir, render) = match (&args.ckpt, &args.preds) {
        (Some(ckpt), _) => {
            let params = trainer::load_student(ckpt)?;
            let parent = ckpt.parent().unwrap_or(Path::new("."));
            let out = args.out.clone().unwrap_or_else(|| parent.join("eval"));
            (
                evalkit::predict_all(&params, &images)?,
                out,
                !args.no_render,
            )
        }
        (None, Some(dir)) => {
            let preds = (0..images.len())
                .map(|i| evalkit::read_prediction(&dir.join(format!("pred_{i:05}.ppm")), &taxonomy))
                .collect::<nightseg::Result<Vec<_>>>()?;
            (
                preds,
                args.out.clone().unwrap_or_else(|| dir.clone()),
                false,
            )
        }
        (None, None) => bail!("either --ckpt or --preds is required"),
    };
    let report = evalkit::evaluate_predictions(&preds, &gts, &taxonomy)?;
    report.write(&out_dir)?;
    if render {
        for (i, p) in preds.iter().enumerate() {
            evalkit::render_prediction(p, &taxonomy, &out_dir.join(format!("pred_{i:05}.ppm")))?;
        }
    }
    print!("{}", report.to_markdown());
    println!("reports written to {}", out_dir.display());
    Ok(())
}

/// Cartesian product of the sweep axes; one empty cell when there are none.
fn sweep_cells(axes: &[String]) -> anyhow::Result<Vec<Vec<String>>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| anyhow!("sweep axis must be KEY=V1,V2,..., got {axis:?}"))?;
        let values: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            bail!("sweep axis {key} has no values");
        }
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push(format!("{}={v}", key.trim()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn report_row(variant: &str, seed: u64, r: &EvalReport) -> String {
    format!(
        "{variant},{seed},{},{},{}",
        r.miou, r.static_miou, r.dynamic_miou
    )
}

fn write_comparison(out: &Path, results: &[VariantResult]) -> anyhow::Result<()> {
    if results.len() < 2 {
        return Ok(());
    }
    let cmp = evalkit::compare_runs(results)?;
    write_file(&out.join("comparison.md"), &cmp.markdown)?;
    write_file(&out.join("comparison.csv"), &cmp.csv)?;
    Ok(())
}

fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if args.variants.is_empty() {
        bail!("--variants is empty");
    }
    let cells = sweep_cells(&args.sweep)?;
    let mut plan = Vec::new();
    for variant in &args.variants {
        for cell in &cells {
            let mut cfg = resolve_config(&args.config, Some(variant))?;
            let mut sweep = Config::default();
            for kv in cell {
                sweep.set(kv)?;
            }
            sweep.apply(&mut cfg)?;
            cfg.validate()?;
            let name = if cell.is_empty() {
                variant.clone()
            } else {
                format!("{variant}[{}]", cell.join(","))
            };
            plan.push((name, cfg));
        }
    }
    let dataset = load_dataset(&args.data)?;
    let taxonomy = Taxonomy::street();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let runs_path = args.out.join("runs.csv");
    write_file(&runs_path, "variant,seed,miou,static,dynamic_small\n")?;

    let mut results: Vec<VariantResult> = Vec::new();
    for (name, base) in &plan {
        print_config(base, &format!("variant {name}"));
        let mut result = VariantResult {
            name: name.clone(),
            reports: Vec::new(),
        };
        for i in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + i;
            let dir = args.out.join(name).join(format!("seed_{}", cfg.seed));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_file(&dir.join("run.cfg"), &config::render(&cfg))?;
            log::info!("training {name} with seed {}", cfg.seed);
            let summary = trainer::run(&cfg, &dataset, &taxonomy, &dir, &RunOptions::default());
            let summary = match summary {
                Ok(s) => s,
                Err(e) => {
                    if !result.reports.is_empty() {
                        results.push(result);
                    }
                    write_comparison(&args.out, &results)?;
                    return Err(
                        anyhow::Error::new(e).context(format!("variant {name}, seed {}", cfg.seed))
                    );
                }
            };
            let report = summary
                .final_eval
                .ok_or_else(|| anyhow!("dataset has no night test split to evaluate on"))?;
            let mut f = OpenOptions::new().append(true).open(&runs_path)?;
            writeln!(f, "{}", report_row(name, cfg.seed, &report))?;
            println!(
                "{name} seed {}: mIoU {:.2} (static {:.2}, dynamic+small {:.2})",
                cfg.seed,
                100.0 * report.miou,
                100.0 * report.static_miou,
                100.0 * report.dynamic_miou
            );
            result.reports.push(report);
        }
        results.push(result);
        write_comparison(&args.out, &results)?;
    }
    if results.len() >= 2 {
        print!("{}", evalkit::compare_runs(&results)?.markdown);
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let opts = GradcheckOptions {
        seeds: args.seeds,
        corrupt: args.corrupt,
        filter: args.filter,
        ..GradcheckOptions::default()
    };
    let start = std::time::Instant::now();
    let outcomes = gradcheck::run_gradcheck(&opts)?;
    if outcomes.is_empty() {
        bail!("no gradient check matches the filter");
    }
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<26} max rel err {:.3e} (tol {:.0e}, {} elements, {} seeds)",
            o.name, o.max_rel_err, o.tol, o.elements, opts.seeds
        );
        if !o.passed() {
            failed.push(o.name);
        }
    }
    println!(
        "{} checks in {:.2}s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = std::panic::catch_unwind(|| dispatch(cli)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(Internal(msg).into())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
