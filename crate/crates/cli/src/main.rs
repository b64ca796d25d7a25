use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use symgpt::bench::{self, Method, ResultRow, Solvers, SweepRow, TimingCell};
use symgpt::config::{Experiment, ExperimentConfig};
use symgpt::eqgen::{generate_splits, instance_rng, read_jsonl, Instance};
use symgpt::expr::Vocabulary;
use symgpt::infer::infer;
use symgpt::model::Model;
use symgpt::train::{train, RunFiles, BEST_CHECKPOINT};

#[derive(Parser)]
#[command(
    name = "symgpt",
    version,
    about = "Symbolic regression with a point-cloud-conditioned transformer"
)]
struct Cli {
    /// Experiment description (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given, or to override the file's.
    #[arg(long, global = true)]
    experiment: Option<Experiment>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Multiplies the train/val/test counts.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test corpora to <out>/data.
    Generate,
    /// Train on <out>/data, writing checkpoints and metrics to <out>/model.
    Train {
        /// Continue from <out>/model/last.ckpt.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Predict equations for a corpus and score them.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL corpus; defaults to <out>/data/test.jsonl.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        retries: Option<usize>,
    },
    /// Run every method on the test split and write results, curves and timings.
    Benchmark {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        instances: Option<usize>,
        /// Also run the point-count sweep.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Redraw charts and build one timing table from benchmark run directories.
    Plot {
        /// Run directories; defaults to <out>.
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
                Some("json") => serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?,
                _ => {
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
            };
            if let Some(e) = cli.experiment {
                cfg.experiment = e;
            }
            cfg
        }
        None => ExperimentConfig::preset(cli.experiment.unwrap_or(Experiment::OneVar)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = cli.scale {
        cfg.scale = scale;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }

    fn save_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(&self.root)
            .with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.root.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(cfg)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn read_split(path: &Path) -> Result<Vec<Instance>> {
    read_jsonl(path)
        .with_context(|| format!("reading {} (run `symgpt generate` first?)", path.display()))
}

fn cmd_generate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    layout.save_config(cfg)?;
    let started = Instant::now();
    let written = generate_splits(&cfg.split_specs(), &layout.root.join("data"))?;
    for (path, stats) in written {
        println!(
            "{}: {} instances, {} distinct skeletons, {:.2} constants/eq",
            path.display(),
            stats.count,
            stats.distinct_skeletons,
            stats.constants_mean
        );
    }
    println!("generated in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    layout: &Layout,
    resume: bool,
    epochs: Option<usize>,
    max_steps: Option<u64>,
) -> Result<()> {
    layout.save_config(cfg)?;
    let train_set = read_split(&layout.data("train"))?;
    let val_set = read_split(&layout.data("val"))?;
    let mut tc = cfg.training_config();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    if max_steps.is_some() {
        tc.max_steps = max_steps;
    }
    let mut model = Model::new(cfg.model_config(), Vocabulary::default())?;
    eprintln!(
        "{} parameters, {} training instances, {} steps/epoch",
        model.num_parameters(),
        train_set.len(),
        tc.steps_per_epoch(train_set.len())
    );
    let files = RunFiles {
        dir: Some(layout.model()),
        resume,
    };
    let started = Instant::now();
    let report = train(
        &mut model,
        &train_set,
        &val_set,
        &tc,
        &files,
        |step, epoch, loss| {
            if step % 25 == 0 {
                eprintln!(
                    "step {step:>6} epoch {epoch} loss {loss:.4} ({:.0}s)",
                    started.elapsed().as_secs_f64()
                );
            }
        },
    )?;
    println!("initial val loss {:.4}", report.initial_val_loss);
    for e in &report.epochs {
        println!(
            "epoch {} train loss {:.4} val loss {:.4}",
            e.epoch, e.train_loss, e.val_loss
        );
    }
    println!(
        "best epoch {} (val loss {:.4}), checkpoint {}",
        report.best_epoch,
        report.best_val_loss,
        layout.model().join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord {
    instance_id: usize,
    d: usize,
    n: usize,
    skeleton: String,
    equation: String,
    mse_n: f64,
    attempts: usize,
    t_encode: f64,
    t_sample: f64,
    t_fit: f64,
    t_total: f64,
}

fn load_model(layout: &Layout, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.model().join(BEST_CHECKPOINT));
    Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_infer(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    limit: Option<usize>,
    retries: Option<usize>,
) -> Result<()> {
    let model = load_model(layout, checkpoint)?;
    let path = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.data("test"));
    let mut instances = read_split(&path)?;
    instances.truncate(limit.unwrap_or(usize::MAX));
    let mut ic = cfg.inference;
    if let Some(r) = retries {
        ic.retries = r;
    }
    let dir = layout.root.join("infer");
    fs::create_dir_all(&dir)?;
    let out_path = dir.join("predictions.jsonl");
    let mut out = BufWriter::new(
        fs::File::create(&out_path).with_context(|| format!("creating {}", out_path.display()))?,
    );
    let mut failures = 0;
    for (id, inst) in instances.iter().enumerate() {
        let mut rng = instance_rng(cfg.seed, id as u64);
        let p = infer(&model, &inst.x, inst.d, &inst.y, &ic, &mut rng)?;
        failures += usize::from(p.failed());
        println!(
            "{id:>5}  mse_n {:<12.4e} {:>7.3}s  {}",
            p.mse_n,
            p.timing.total,
            if p.failed() {
                "<failed>".into()
            } else {
                p.equation()
            }
        );
        let rec = PredictionRecord {
            instance_id: id,
            d: inst.d,
            n: inst.n,
            equation: p.equation(),
            skeleton: p.skeleton,
            mse_n: p.mse_n,
            attempts: p.attempts,
            t_encode: p.timing.encode,
            t_sample: p.timing.sample,
            t_fit: p.timing.fit,
            t_total: p.timing.total,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    println!(
        "{} instances, {failures} failures, predictions in {}",
        instances.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_benchmark(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: Option<&Path>,
    methods: Option<Vec<Method>>,
    instances: Option<usize>,
    sweep: bool,
    deterministic: bool,
) -> Result<()> {
    layout.save_config(cfg)?;
    let methods = methods.unwrap_or_else(|| cfg.methods.clone());
    let deterministic = deterministic || cfg.deterministic;
    let model = if methods.contains(&Method::SymbolicGpt) {
        Some(load_model(layout, checkpoint)?)
    } else {
        None
    };
    let mut test = read_split(&layout.data("test"))?;
    test.truncate(instances.or(cfg.bench_instances).unwrap_or(usize::MAX));
    let solvers = Solvers {
        model: model.as_ref(),
        infer: cfg.inference,
        gp: cfg.gp.clone(),
        gp_max: cfg.gp_max.clone(),
    };
    let dir = layout.bench();
    fs::create_dir_all(&dir)?;
    let progress = |r: &ResultRow| {
        eprintln!(
            "{:<12} #{:<5} mse_n {:<12.4e} {:>8.3}s",
            r.method.name(),
            r.instance_id,
            r.mse_n,
            r.seconds
        )
    };

    let rows = bench::run(&test, &methods, &solvers, cfg.seed, progress)?;
    let timing = bench::timing_cells(cfg.experiment.name(), &rows, &methods);
    bench::write_rows(&dir.join("results.csv"), &stable(&rows, deterministic))?;
    write_figures(&dir, &rows, &methods, cfg.experiment.name())?;
    bench::write_rows(&dir.join("timing.csv"), &timing)?;
    bench::write_text(&dir.join("timing.md"), &bench::render_timing_table(&timing))?;
    print!("{}", bench::render_timing_table(&timing));
    for &m in &methods {
        let scores: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.mse_n)
            .collect();
        let fails = scores.iter().filter(|s| !s.is_finite()).count();
        println!(
            "{:<12} median mse_n {:.4e}, {fails} failures / {}",
            m.name(),
            bench::median_of(&scores),
            scores.len()
        );
    }

    if sweep {
        let (summary, sweep_rows) = bench::sweep(
            &test,
            &cfg.test_domain,
            &cfg.sweep_n,
            &methods,
            &solvers,
            cfg.seed,
            progress,
        )?;
        bench::write_rows(&dir.join("sweep.csv"), &summary)?;
        bench::write_rows(
            &dir.join("sweep_results.csv"),
            &stable(&sweep_rows, deterministic),
        )?;
        bench::write_text(
            &dir.join("sweep.svg"),
            &bench::sweep_chart(
                &summary,
                &format!("{}: error vs. points", cfg.experiment.name()),
            ),
        )?;
        for r in &summary {
            println!(
                "{:<12} n={:<4} median log10 mse_n {:.3}",
                r.method.name(),
                r.n,
                r.median_log10_mse_n
            );
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn stable(rows: &[ResultRow], deterministic: bool) -> Vec<ResultRow> {
    rows.iter()
        .map(|r| ResultRow {
            seconds: if deterministic { 0.0 } else { r.seconds },
            ..r.clone()
        })
        .collect()
}

fn write_figures(dir: &Path, rows: &[ResultRow], methods: &[Method], name: &str) -> Result<()> {
    let curve = bench::cdf_rows(rows, methods);
    bench::write_rows(&dir.join("cdf.csv"), &curve)?;
    bench::write_text(
        &dir.join("cdf.svg"),
        &bench::cdf_chart(&curve, &format!("{name}: cumulative MSE_N")),
    )?;
    Ok(())
}

fn cmd_plot(layout: &Layout, runs: &[PathBuf]) -> Result<()> {
    let runs = if runs.is_empty() {
        vec![layout.root.clone()]
    } else {
        runs.to_vec()
    };
    let mut cells: Vec<TimingCell> = Vec::new();
    for run in &runs {
        let cfg_path = run.join("config.json");
        let cfg: ExperimentConfig = serde_json::from_str(
            &fs::read_to_string(&cfg_path)
                .with_context(|| format!("reading {}", cfg_path.display()))?,
        )?;
        let dir = run.join("bench");
        let rows: Vec<ResultRow> = bench::read_rows(&dir.join("results.csv"))?;
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        write_figures(&dir, &rows, &methods, cfg.experiment.name())?;
        let timing_path = dir.join("timing.csv");
        if timing_path.exists() {
            cells.extend(bench::read_rows::<TimingCell>(&timing_path)?);
        } else {
            cells.extend(bench::timing_cells(cfg.experiment.name(), &rows, &methods));
        }
        let sweep_path = dir.join("sweep.csv");
        if sweep_path.exists() {
            let summary: Vec<SweepRow> = bench::read_rows(&sweep_path)?;
            bench::write_text(
                &dir.join("sweep.svg"),
                &bench::sweep_chart(
                    &summary,
                    &format!("{}: error vs. points", cfg.experiment.name()),
                ),
            )?;
        }
        println!("redrew {}", dir.display());
    }
    if cells.is_empty() {
        bail!("no benchmark results found");
    }
    let table = bench::render_timing_table(&cells);
    fs::create_dir_all(&layout.root)?;
    bench::write_text(&layout.root.join("timing_table.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let layout = Layout {
        root: cfg.out_dir(),
    };
    match cli.command {
        Command::Generate => cmd_generate(&cfg, &layout),
        Command::Train {
            resume,
            epochs,
            max_steps,
        } => cmd_train(&cfg, &layout, resume, epochs, max_steps),
        Command::Infer {
            checkpoint,
            input,
            limit,
            retries,
        } => cmd_infer(
            &cfg,
            &layout,
            checkpoint.as_deref(),
            input.as_deref(),
            limit,
            retries,
        ),
        Command::Benchmark {
            checkpoint,
            methods,
            instances,
            sweep,
            deterministic,
        } => cmd_benchmark(
            &cfg,
            &layout,
            checkpoint.as_deref(),
            methods,
            instances,
            sweep,
            deterministic,
        ),
        Command::Plot { runs } => cmd_plot(&layout, &runs),
    }
}
