use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gaia::inspect::{edge_attention, row_correlation};
use gaia::model::Ablation;
use gaia::selfcheck::{model_gradient_check, op_gradient_checks};
use gaia::synth::{self, SynthSpec};
use gaia::train::{self, write_epoch_log, Baseline, Checkpoint, Evaluation, Metrics, Trainer};
use gaia::{Dataset, GaiaError, TrainConfig};

#[derive(Parser)]
#[command(name = "gaia", version, about = "Seller GMV forecasting on a seller graph")]
struct Cli {
    /// Worker threads (default: logical cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of the spec or config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic universe (graph, truth sidecar and summary).
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write 0 in the seconds column of the epoch log.
        #[arg(long)]
        no_timing: bool,
    },
    /// Metrics of a checkpoint and the baselines on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        json: bool,
    },
    /// Per-month and summed forecast of one node.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        node: String,
        #[arg(long)]
        json: bool,
    },
    /// Export the attention matrix of an edge as CSV (row = query time).
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `src,dst`; with `--intra` only `dst` matters.
        #[arg(long)]
        edge: String,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Use the destination's self term instead of the edge.
        #[arg(long)]
        intra: bool,
        /// Also write `(correlation, attention)` pairs over time-index pairs.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; nonzero exit on any failure.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const CHECKPOINT: u8 = 4;
const NUMERIC: u8 = 5;

impl From<GaiaError> for Failure {
    fn from(e: GaiaError) -> Self {
        let code = match &e {
            GaiaError::Config(_) => CONFIG,
            GaiaError::Checkpoint(_) => CHECKPOINT,
            GaiaError::Divergence { .. } | GaiaError::Tensor(_) => NUMERIC,
            _ => DATA,
        };
        Failure::new(code, e.to_string())
    }
}

fn io_failure(code: u8, path: &Path, e: io::Error) -> Failure {
    Failure::new(code, format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GAIA_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(CONFIG);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Generate { spec, out } => generate(&spec, &out, seed),
        Command::Train { data, config, out, log, no_timing } => {
            train_cmd(&data, config.as_deref(), &out, log, !no_timing, seed)
        }
        Command::Eval { ckpt, data, split, json } => eval(&ckpt, &data, split, json),
        Command::Predict { ckpt, data, node, json } => predict(&ckpt, &data, &node, json),
        Command::InspectAttention { ckpt, data, edge, layer, out, intra, scatter } => {
            inspect(&ckpt, &data, &edge, layer, &out, intra, scatter.as_deref())
        }
        Command::Selfcheck => selfcheck(seed.unwrap_or(0)),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            Failure::new(CONFIG, format!("{what} not found: {}", path.display()))
        } else {
            io_failure(CONFIG, path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load_dir(dir)?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        GaiaError::Io { .. } | GaiaError::Checkpoint(_) => Failure::new(CHECKPOINT, e.to_string()),
        other => other.into(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| io_failure(DATA, path, e))
}

fn generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> Outcome {
    let mut spec: SynthSpec = read_json(spec_path, "spec")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let generated = synth::generate(&spec)?;
    let summary = synth::write_dataset(out, &generated)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn train_cmd(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
    timing: bool,
    seed: Option<u64>,
) -> Outcome {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p, "config")?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = load_data(data_dir)?;
    let splits = synth::split(&data.graph, cfg.split, cfg.seed)?;
    let mut trainer = Trainer::new(&data, cfg, &splits.train)?;
    eprintln!(
        "training {} parameters on {} nodes ({} val, {} test)",
        trainer.model().param_count(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let report = trainer.fit(&data, &splits, |r| {
        eprintln!("epoch {:>4}  train_loss {:.6}  val_mae {:.3}", r.epoch, r.train_loss, r.val_mae)
    })?;
    trainer.checkpoint().save(out).map_err(|e| Failure::new(CHECKPOINT, e.to_string()))?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut buf = Vec::new();
    write_epoch_log(&mut buf, &report.log, timing).expect("write to memory");
    write_file(&log_path, &buf)?;
    if let Some(best) = report.best_epoch {
        eprintln!("kept epoch {best} (best validation MAE)");
    }
    Ok(())
}

fn split_nodes(ck: &Checkpoint, data: &Dataset, which: SplitName) -> Result<Vec<usize>, Failure> {
    let s = synth::split(&data.graph, ck.train.split, ck.train.seed)?;
    Ok(match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
        SplitName::All => (0..data.graph.len()).collect(),
    })
}

fn eval(ckpt: &Path, data_dir: &Path, which: SplitName, json: bool) -> Outcome {
    let ck = load_ckpt(ckpt)?;
    let model = ck.model()?;
    let data = load_data(data_dir)?;
    let nodes = split_nodes(&ck, &data, which)?;
    let gaia = train::evaluate(&model, &ck.train, &data, &nodes)?;
    let mut baselines = Vec::new();
    for b in [Baseline::LastValue, Baseline::SeasonalNaive { period: 12 }, Baseline::ArLs { order: 2 }] {
        let (e, fell_back) = train::evaluate_baseline(b, &data, &nodes)?;
        baselines.push((b.name(), e, fell_back));
    }
    if json {
        let base: serde_json::Map<String, serde_json::Value> = baselines
            .iter()
            .map(|(n, e, fb)| {
                let mut v = serde_json::to_value(e).expect("evaluation serializes");
                v["fell_back"] = (*fb).into();
                (n.clone(), v)
            })
            .collect();
        let doc = serde_json::json!({
            "nodes": nodes.len(),
            "mae": gaia.total.mae,
            "rmse": gaia.total.rmse,
            "mape": gaia.total.mape,
            "mape_excluded": gaia.total.mape_excluded,
            "evaluation": gaia,
            "baselines": base,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        print_table(&gaia, &baselines);
    }
    Ok(())
}

fn print_table(gaia: &Evaluation, baselines: &[(String, Evaluation, usize)]) {
    let row = |name: &str, m: &Metrics| {
        println!("{name:<20} {:>14.3} {:>14.3} {:>10.4}", m.mae, m.rmse, m.mape);
    };
    println!("{:<20} {:>14} {:>14} {:>10}", "model (3-month sum)", "MAE", "RMSE", "MAPE");
    row("gaia", &gaia.total);
    for (n, e, _) in baselines {
        row(n, &e.total);
    }
    if let (Some(new), Some(old)) = (&gaia.new_shops, &gaia.old_shops) {
        row("gaia / new shops", new);
        row("gaia / old shops", old);
    }
    for (i, m) in gaia.monthly.iter().enumerate() {
        row(&format!("gaia / month {}", i + 1), m);
    }
    if gaia.total.mape_excluded > 0 {
        println!("MAPE excludes {} truths below {}", gaia.total.mape_excluded, train::MAPE_FLOOR);
    }
}

fn predict(ckpt: &Path, data_dir: &Path, node: &str, json: bool) -> Outcome {
    let ck = load_ckpt(ckpt)?;
    let model = ck.model()?;
    let data = load_data(data_dir)?;
    let idx = data.graph.require(node)?;
    let months = train::predict_nodes(&model, &ck.train, &data, &[idx])?.remove(0);
    let total: f64 = months.iter().sum();
    if json {
        let doc = serde_json::json!({ "node": node, "months": months, "total": total });
        println!("{doc}");
    } else {
        for (i, v) in months.iter().enumerate() {
            println!("month {}: {v:.3}", i + 1);
        }
        println!("total:   {total:.3}");
    }
    Ok(())
}

fn inspect(
    ckpt: &Path,
    data_dir: &Path,
    edge: &str,
    layer: usize,
    out: &Path,
    intra: bool,
    scatter: Option<&Path>,
) -> Outcome {
    let (src, dst) = edge
        .split_once(',')
        .map(|(s, d)| (s.trim(), d.trim()))
        .ok_or_else(|| Failure::new(CONFIG, format!("--edge expects `src,dst`, got `{edge}`")))?;
    let ck = load_ckpt(ckpt)?;
    let model = ck.model()?;
    let data = load_data(data_dir)?;
    let att = edge_attention(&model, &ck.train, &data, src, dst, layer, intra)?;
    let m = &att.matrix;
    let n = m.shape()[0];
    let file = fs::File::create(out).map_err(|e| io_failure(DATA, out, e))?;
    let mut w = BufWriter::new(file);
    let write_err = |e: io::Error| io_failure(DATA, out, e);
    for i in 0..n {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(write_err)?;
    }
    w.flush().map_err(write_err)?;
    if let Some(a) = att.alpha {
        eprintln!("alpha {src} -> {dst} at layer {layer}: {a}");
    }
    if let Some(path) = scatter {
        let mut text = String::from("query_t,key_t,correlation,attention\n");
        for i in 0..n {
            for j in 0..=i {
                let c = row_correlation(&att.embedding, i, j);
                text.push_str(&format!("{i},{j},{c},{}\n", m.at(i, j)));
            }
        }
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn selfcheck(seed: u64) -> Outcome {
    let mut ok = true;
    for (name, r) in op_gradient_checks(seed)? {
        println!("{:<28} max_rel_err {:.3e}  {}", name, r.max_rel_err(), verdict(r.passed));
        ok &= r.passed;
    }
    let variants: [(&str, &[&str]); 4] = [
        ("model", &[]),
        ("model/no_ita", &["no_ita"]),
        ("model/no_ffl", &["no_ffl"]),
        ("model/no_tel", &["no_tel"]),
    ];
    for (name, abl) in variants {
        let r = model_gradient_check(seed, Ablation::parse(abl)?)?;
        println!(
            "{:<28} max_rel_err {:.3e}  checked {} skipped {}  {}",
            name,
            r.max_rel_err(),
            r.checked(),
            r.skipped(),
            verdict(r.passed)
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::new(NUMERIC, "gradient check failed"))
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "ok"
    } else {
        "FAIL"
    }
}
