use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use nnorder::config::{ExperimentConfig, OutputFormat};
use nnorder::dataset::{training_from_csv, training_to_csv};
use nnorder::emit::{write_table, Cell, CellKind, Table};
use nnorder::experiment::{
    row_bayes_risk, run_scaling, run_table1, scaling_table, table1_table, unit_seed, Checkpoint,
};
use nnorder::kselect::{select_k_for_training, BootstrapPlan, TestResampling};
use nnorder::knn::{classify_knn, IndexKind, NeighborIndex};
use nnorder::sampling::{draw_training, split_stream};
use nnorder::theory::{expansion_for_pair, regret_curve, theoretical_kopt, TheoryError};

#[derive(Parser)]
#[command(name = "nnorder", version, about = "k-NN classification experiments under Poisson and Binomial sampling")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: table1-full, table1-desk, scaling-d2, scaling-d16.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one training set for a config row and dump it as CSV.
    Simulate {
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },
    /// Classify points with the k-NN rule of a dumped training set.
    Classify {
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        k: usize,
        /// Comma-separated coordinates; repeat for several points.
        #[arg(long = "at", required = true, allow_hyphen_values = true)]
        at: Vec<String>,
    },
    /// Bayes risk of every config row.
    Bayes,
    /// Bootstrap choice of k for a dumped training set.
    SelectK {
        #[arg(long)]
        training: PathBuf,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        r: f64,
        #[arg(long, default_value_t = 100)]
        b: usize,
        /// Draw test resamples from the whole sample instead of the points left out of training.
        #[arg(long)]
        independent_test: bool,
    },
    /// Expansion constants, theoretical k_opt and regret curve for a row.
    Theory {
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// Largest k of the regret curve.
        #[arg(long, default_value_t = 250)]
        k_max: usize,
    },
    /// Bayes risk, k_opt error and bootstrap-selected error for every row.
    Table1,
    /// Growth of k_opt across the configured (mu, nu) levels.
    Scaling,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, e: impl ToString) -> Self {
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli, default_preset: &str) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => ExperimentConfig::preset(default_preset),
    }
    .map_err(|e| Failure::new("config", e))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn format_of(cli: &Cli, cfg: Option<&ExperimentConfig>) -> OutputFormat {
    cli.format
        .or(cfg.map(|c| c.output.format))
        .unwrap_or_default()
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Option<PathBuf> {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.output.dir.clone()))
}

fn emit(table: &Table, name: &str, format: OutputFormat, dir: Option<&Path>) -> Outcome {
    match dir {
        Some(dir) => {
            let path = dir.join(format!("{name}.{}", format.extension()));
            write_table(table, format, &path).map_err(|e| Failure::new("output", e))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{}", table.render(format)),
    }
    Ok(())
}

fn row_of(cfg: &ExperimentConfig, row: usize) -> Result<&nnorder::config::RowConfig, Failure> {
    cfg.rows.get(row).ok_or_else(|| {
        Failure::new(
            "argument",
            format!("row {row} out of range: config has {} rows", cfg.rows.len()),
        )
    })
}

fn read_training(path: &Path) -> Result<nnorder::sampling::TrainingSet, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    training_from_csv(&text).map_err(|e| Failure::new("input", format!("{}: {e}", path.display())))
}

fn simulate(cli: &Cli, row: usize, stream: u64) -> Outcome {
    let cfg = load_config(cli, "table1-desk")?;
    let pair = row_of(&cfg, row)?.pair().map_err(|e| Failure::new("config", e))?;
    let mut rng = split_stream(unit_seed(cfg.seed, row as u64), stream);
    let set = draw_training(&pair, cfg.model, &mut rng);
    let text = training_to_csv(&set);
    match out_dir(cli, Some(&cfg)) {
        Some(dir) => {
            let path = dir.join(format!("training-row{row}-stream{stream}.csv"));
            fs::create_dir_all(&dir)
                .and_then(|_| fs::write(&path, text))
                .map_err(|e| Failure::new("output", format!("{}: {e}", path.display())))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn classify(cli: &Cli, training: &Path, k: usize, at: &[String]) -> Outcome {
    let set = read_training(training)?;
    let d = set.dim();
    let index = NeighborIndex::for_training(&set, IndexKind::suggest(set.len(), k, d))
        .map_err(|e| Failure::new("input", e))?;
    let mut cols: Vec<(String, CellKind)> = vec![("point".into(), CellKind::Int)];
    cols.extend((1..=d).map(|j| (format!("z{j}"), CellKind::Real)));
    cols.extend([("k".into(), CellKind::Int), ("label".into(), CellKind::Text)]);
    let cols_ref: Vec<(&str, CellKind)> = cols.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let mut table = Table::new("nnorder-classify", &cols_ref);
    for (i, spec) in at.iter().enumerate() {
        let z = spec
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::new("argument", format!("--at {spec:?}: {e}")))?;
        let label = classify_knn(&set, &index, &z, k).map_err(|e| Failure::new("argument", e))?;
        let mut row = vec![Cell::Int(i as i64)];
        row.extend(z.iter().map(|v| Cell::Real(*v)));
        row.extend([Cell::Int(k as i64), Cell::Text(label.as_str().into())]);
        table.push(row).map_err(|e| Failure::new("internal", e))?;
    }
    emit(&table, "classify", format_of(cli, None), cli.out.as_deref())
}

fn bayes(cli: &Cli) -> Outcome {
    let cfg = load_config(cli, "table1-desk")?;
    let mut table = Table::new(
        "nnorder-bayes",
        &[
            ("row", CellKind::Int),
            ("label", CellKind::Text),
            ("d", CellKind::Int),
            ("mu", CellKind::Real),
            ("nu", CellKind::Real),
            ("correlation", CellKind::Real),
            ("bayes", CellKind::Real),
            ("resolution", CellKind::Int),
            ("master_seed", CellKind::Text),
            ("stream", CellKind::Int),
            ("config_hash", CellKind::Text),
        ],
    );
    for (i, row) in cfg.rows.iter().enumerate() {
        let risk = row_bayes_risk(&cfg, row).map_err(|e| Failure::new("compute", e))?;
        table
            .push(vec![
                Cell::Int(i as i64),
                Cell::Text(row.label.clone().unwrap_or_default()),
                Cell::Int(row.dim() as i64),
                Cell::Real(row.mu),
                Cell::Real(row.nu),
                Cell::Real(row.correlation()),
                Cell::Real(risk),
                Cell::Int(cfg.quadrature.resolution as i64),
                Cell::Text(cfg.seed.to_string()),
                Cell::Int(i as i64),
                Cell::Text(cfg.hash()),
            ])
            .map_err(|e| Failure::new("internal", e))?;
    }
    emit(&table, "bayes", format_of(cli, Some(&cfg)), out_dir(cli, Some(&cfg)).as_deref())
}

fn select_k(cli: &Cli, training: &Path, r: f64, b: usize, independent_test: bool) -> Outcome {
    let set = read_training(training)?;
    let mut plan = BootstrapPlan::new(r, b).map_err(|e| Failure::new("argument", e))?;
    if independent_test {
        plan.test_resampling = TestResampling::Independent;
    }
    let seed = cli.seed.unwrap_or(set.seed());
    let result = select_k_for_training(&set, &plan, seed).map_err(|e| Failure::new("compute", e))?;
    let mut table = Table::new(
        "nnorder-select-k",
        &[
            ("k", CellKind::Int),
            ("bootstrap_err", CellKind::Real),
            ("k_hat", CellKind::Int),
            ("k_tilde", CellKind::Int),
            ("r", CellKind::Real),
            ("b", CellKind::Int),
            ("master_seed", CellKind::Text),
            ("stream", CellKind::Int),
        ],
    );
    for (k, err) in &result.error_curve {
        table
            .push(vec![
                Cell::Int(*k as i64),
                Cell::Real(*err),
                Cell::Int(result.k_hat as i64),
                Cell::Int(result.k_tilde as i64),
                Cell::Real(r),
                Cell::Int(b as i64),
                Cell::Text(seed.to_string()),
                Cell::Int(set.stream() as i64),
            ])
            .map_err(|e| Failure::new("internal", e))?;
    }
    eprintln!("k_hat = {}, k_tilde = {}", result.k_hat, result.k_tilde);
    emit(&table, "select_k", format_of(cli, None), cli.out.as_deref())
}

fn theory(cli: &Cli, row: usize, k_max: usize) -> Outcome {
    let cfg = load_config(cli, "table1-desk")?;
    let row_cfg = row_of(&cfg, row)?;
    let pair = row_cfg.pair().map_err(|e| Failure::new("config", e))?;
    let d = row_cfg.dim();
    let report = expansion_for_pair(&pair, &cfg.region_for(d), cfg.quadrature.boundary_resolution)
        .map_err(|e| Failure::new("compute", e))?;
    let kopt = match theoretical_kopt(&report, row_cfg.nu, d) {
        Ok(k) => Cell::Int(k as i64),
        Err(TheoryError::Degenerate) => Cell::Missing,
        Err(e) => return Err(Failure::new("compute", e)),
    };
    let mut summary = Table::new(
        "nnorder-theory",
        &[
            ("row", CellKind::Int),
            ("d", CellKind::Int),
            ("mu", CellKind::Real),
            ("nu", CellKind::Real),
            ("c1", CellKind::Real),
            ("c2", CellKind::Real),
            ("a_d", CellKind::Real),
            ("degenerate", CellKind::Int),
            ("theory_kopt", CellKind::Int),
            ("config_hash", CellKind::Text),
        ],
    );
    summary
        .push(vec![
            Cell::Int(row as i64),
            Cell::Int(d as i64),
            Cell::Real(row_cfg.mu),
            Cell::Real(row_cfg.nu),
            Cell::Real(report.c1),
            Cell::Real(report.c2),
            Cell::Real(report.a_d),
            Cell::Int(report.degenerate as i64),
            kopt,
            Cell::Text(cfg.hash()),
        ])
        .map_err(|e| Failure::new("internal", e))?;
    let mut curve = Table::new(
        "nnorder-regret",
        &[("k", CellKind::Int), ("expansion_regret", CellKind::Real)],
    );
    let ks: Vec<usize> = (1..=k_max.max(1)).collect();
    for (k, v) in regret_curve(&report, row_cfg.nu, &ks) {
        curve
            .push(vec![Cell::Int(k as i64), Cell::Real(v)])
            .map_err(|e| Failure::new("internal", e))?;
    }
    let fmt = format_of(cli, Some(&cfg));
    let dir = out_dir(cli, Some(&cfg));
    emit(&summary, "theory", fmt, dir.as_deref())?;
    emit(&curve, "regret_curve", fmt, dir.as_deref())
}

fn checkpoint_for(cli: &Cli, cfg: &ExperimentConfig, name: &str) -> Option<Checkpoint> {
    out_dir(cli, Some(cfg)).map(|d| Checkpoint::new(d.join(format!("{name}.checkpoint.jsonl")), cfg))
}

fn table1(cli: &Cli) -> Outcome {
    let cfg = load_config(cli, "table1-desk")?;
    let cp = checkpoint_for(cli, &cfg, "table1");
    let records = run_table1(&cfg, cp.as_ref()).map_err(|e| Failure::new("compute", e))?;
    emit(
        &table1_table(&records),
        "table1",
        format_of(cli, Some(&cfg)),
        out_dir(cli, Some(&cfg)).as_deref(),
    )
}

fn scaling(cli: &Cli) -> Outcome {
    let cfg = load_config(cli, "scaling-d2")?;
    let cp = checkpoint_for(cli, &cfg, "scaling");
    let records = run_scaling(&cfg, cp.as_ref()).map_err(|e| Failure::new("compute", e))?;
    emit(
        &scaling_table(&records),
        "scaling",
        format_of(cli, Some(&cfg)),
        out_dir(cli, Some(&cfg)).as_deref(),
    )
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::new("argument", e))?;
    }
    match &cli.command {
        Command::Simulate { row, stream } => simulate(cli, *row, *stream),
        Command::Classify { training, k, at } => classify(cli, training, *k, at),
        Command::Bayes => bayes(cli),
        Command::SelectK {
            training,
            r,
            b,
            independent_test,
        } => select_k(cli, training, *r, *b, *independent_test),
        Command::Theory { row, k_max } => theory(cli, *row, *k_max),
        Command::Table1 => table1(cli),
        Command::Scaling => scaling(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": {"kind": f.kind, "message": f.message}}));
            ExitCode::FAILURE
        }
    }
}
