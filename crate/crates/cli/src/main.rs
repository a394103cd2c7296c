use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dlgn::checkpoint::{read_checkpoint, write_checkpoint};
use dlgn::compile::{circuit_accuracy, export_netlist, harden, import_netlist, pruning_curve, DiscreteCircuit};
use dlgn::data::{
    concat_datasets, dataset_from_idx, generate_synthetic, load_idx_images, load_idx_labels, take_classes,
    write_label_map, BinaryDataset, Split, SyntheticSpec,
};
use dlgn::experiment::{
    activation_rates, best_tau_grid, extreme_mass, rate_histogram, run_sweep, write_histogram_csv, ExperimentPlan,
};
use dlgn::heads::{GroupSumHead, Head};
use dlgn::train::{evaluate, train, EvalMode, HeadConfig, TrainConfig};
use dlgn::{Exec, LogicNetwork};

const WIDE_LAYER: usize = 8192;

#[derive(Parser)]
#[command(name = "dlgn", version, about = "Train, compile and study differentiable logic gate networks")]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset file.
    #[command(subcommand)]
    Datagen(Datagen),
    /// Train a network and write its run record and checkpoints.
    Train(TrainArgs),
    /// Accuracy of a checkpoint or a netlist on a dataset split.
    Eval(EvalArgs),
    /// Harden a checkpoint and export the circuit as a netlist.
    Compile(CompileArgs),
    /// Accuracy and pruned fraction as output neurons are removed.
    Prune(PruneArgs),
    /// Run an experiment plan (Cartesian product of sweep axes and seeds).
    Sweep(SweepArgs),
    /// Histogram of output-neuron activation rates in discrete mode.
    ActivationHist(HistArgs),
}

#[derive(Subcommand)]
enum Datagen {
    /// Synthetic fixed-bit classes; writes a JSON sidecar of class signatures.
    Synthetic {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 784)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        fixed_min: usize,
        #[arg(long, default_value_t = 40)]
        fixed_max: usize,
        #[arg(long, default_value_t = 600)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binarized images from IDX files.
    Idx {
        #[arg(long)]
        name: String,
        #[arg(long)]
        train_images: PathBuf,
        #[arg(long)]
        train_labels: PathBuf,
        #[arg(long)]
        test_images: PathBuf,
        #[arg(long)]
        test_labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate datasets with offset label ranges; writes a label map CSV.
    Concat {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Keep only labels below `classes`.
    Take {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadKind {
    GroupSum,
    BinaryLogit,
    Codebook,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Config file (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated layer widths; overrides --layers/--width/--output-width.
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4096)]
    width: usize,
    /// Output width, rounded down to a multiple of the class count.
    #[arg(long)]
    output_width: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for sample order and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for wiring and initial logits.
    #[arg(long, default_value_t = 0)]
    net_seed: u64,
    #[arg(long, value_enum)]
    head: Option<HeadKind>,
    /// Codebook length in bits.
    #[arg(long)]
    code_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "circuit")]
    model: Option<PathBuf>,
    /// Netlist to evaluate with a Group-Sum decision over --classes segments.
    #[arg(long, requires = "classes")]
    circuit: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value_t = ModeArg::Discrete)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Relaxed,
    Discrete,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Kept neurons per class; defaults to powers of two up to the group size.
    #[arg(long, value_delimiter = ',')]
    keep: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("DLGN_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_data(path: &Path) -> Result<BinaryDataset> {
    BinaryDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<(LogicNetwork, Head)> {
    let ck = read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let head = ck.head.context("checkpoint carries no output head")?;
    Ok((ck.network, head))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn datagen(cmd: Datagen) -> Result<()> {
    match cmd {
        Datagen::Synthetic {
            classes,
            seed,
            dim,
            fixed_min,
            fixed_max,
            per_class,
            out,
        } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                dim,
                fixed_bits_min: fixed_min,
                fixed_bits_max: fixed_max,
                samples_per_class: per_class,
                seed,
            };
            let (ds, sigs) = generate_synthetic(&spec)?;
            ds.save(&out)?;
            let sidecar = sidecar_path(&out);
            let json = serde_json::json!({ "spec": spec, "classes": sigs });
            fs::write(&sidecar, serde_json::to_string_pretty(&json)?)?;
            println!("wrote {} ({} samples) and {}", out.display(), ds.len(), sidecar.display());
        }
        Datagen::Idx {
            name,
            train_images,
            train_labels,
            test_images,
            test_labels,
            seed,
            out,
        } => {
            let tr = (load_idx_images(&train_images)?, load_idx_labels(&train_labels)?);
            let te = (load_idx_images(&test_images)?, load_idx_labels(&test_labels)?);
            let ds = dataset_from_idx(&name, (&tr.0, &tr.1), (&te.0, &te.1), seed)?;
            ds.save(&out)?;
            println!("wrote {} ({} samples, {} classes)", out.display(), ds.len(), ds.num_classes);
        }
        Datagen::Concat { out, inputs } => {
            let parts = inputs.iter().map(|p| load_data(p)).collect::<Result<Vec<_>>>()?;
            let ds = concat_datasets(&parts)?;
            ds.save(&out)?;
            let map = out.with_extension("labels.csv");
            write_label_map(&ds, create(&map)?)?;
            println!("wrote {} ({} classes) and {}", out.display(), ds.num_classes, map.display());
        }
        Datagen::Take { input, classes, out } => {
            let ds = take_classes(&load_data(&input)?, classes)?;
            ds.save(&out)?;
            println!("wrote {} ({} samples)", out.display(), ds.len());
        }
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, exec: Exec) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.exec = exec;
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout.p = v;
    }
    let k = ds.num_classes;
    let widths = if a.widths.is_empty() {
        if a.layers == 0 {
            bail!("--layers must be at least 1");
        }
        let out = a.output_width.unwrap_or(a.width) / k * k;
        let mut w = vec![a.width; a.layers - 1];
        w.push(out);
        w
    } else {
        a.widths.clone()
    };
    if let Some(h) = a.head {
        cfg.head = match h {
            HeadKind::GroupSum => HeadConfig::GroupSum,
            HeadKind::BinaryLogit => HeadConfig::BinaryLogit,
            HeadKind::Codebook => {
                let n = *widths.last().expect("at least one layer");
                let code_len = a.code_len.unwrap_or(n);
                HeadConfig::Codebook {
                    code_len,
                    group_reduction: code_len != n,
                    codebook_seed: a.net_seed,
                }
            }
        };
    }
    if widths.iter().any(|&w| w > WIDE_LAYER) {
        log::warn!("layers wider than {WIDE_LAYER} neurons need a lot of memory and time on a desk machine");
    }
    let net = LogicNetwork::build(ds.dim(), &widths, a.net_seed)?;
    let out_dir = a.out_dir.unwrap_or_else(default_out_dir);
    fs::create_dir_all(&out_dir)?;
    let result = train(net, &ds, &cfg)?;
    let rec = &result.record;
    rec.write_csv(create(&out_dir.join("run.csv"))?)?;
    write_checkpoint(out_dir.join("model.ckpt"), &result.network, Some(&result.head))?;
    write_checkpoint(out_dir.join("best.ckpt"), &result.best_network, Some(&result.head))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    println!(
        "config {}  test discrete {}  relaxed {}  best val epoch {}  ({:.1}s)",
        rec.config_hash,
        fmt_acc(rec.test_acc_discrete),
        fmt_acc(rec.test_acc_relaxed),
        rec.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        rec.wall_clock_secs
    );
    Ok(())
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.2}%")).unwrap_or_else(|| "-".into())
}

fn cmd_eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let ds = load_data(&a.data)?;
    let acc = match (&a.model, &a.circuit) {
        (Some(m), None) => {
            let (net, head) = load_model(m)?;
            let mode = match a.mode {
                ModeArg::Relaxed => EvalMode::Relaxed,
                ModeArg::Discrete => EvalMode::Discrete,
            };
            evaluate(&net, &ds, a.split, mode, &head, exec)?
        }
        (None, Some(c)) => {
            if matches!(a.mode, ModeArg::Relaxed) {
                bail!("a circuit can only be evaluated in discrete mode");
            }
            let circ = import_netlist(c).with_context(|| format!("reading netlist {}", c.display()))?;
            let k = a.classes.expect("clap enforces --classes");
            let head = Head::GroupSum(GroupSumHead::new(circ.original_outputs, k, 1.0)?);
            circuit_accuracy(&circ, &head, &ds, ds.split(a.split)?, exec)?
        }
        _ => bail!("pass either --model or --circuit"),
    };
    println!("accuracy {acc:.4}");
    Ok(())
}

fn cmd_compile(a: CompileArgs) -> Result<()> {
    let ck = read_checkpoint(&a.model).with_context(|| format!("loading checkpoint {}", a.model.display()))?;
    let circ = harden(&ck.network);
    export_netlist(&circ, &a.out)?;
    println!("wrote {} ({} gates)", a.out.display(), circ.num_gates());
    Ok(())
}

fn groupsum_of(head: &Head) -> Result<GroupSumHead> {
    match head {
        Head::GroupSum(h) => Ok(*h),
        _ => bail!("pruning needs a Group-Sum head"),
    }
}

fn cmd_prune(a: PruneArgs, exec: Exec) -> Result<()> {
    let ds = load_data(&a.data)?;
    let (net, head) = load_model(&a.model)?;
    let gs = groupsum_of(&head)?;
    let circ: DiscreteCircuit = harden(&net);
    let idx = ds.split(a.split)?;
    let baseline = circuit_accuracy(&circ, &head, &ds, idx, exec)?;
    let keeps = if a.keep.is_empty() {
        let g = gs.group_size();
        let mut v: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|&k| k < g).collect();
        v.push(g);
        v
    } else {
        a.keep.clone()
    };
    let curve = pruning_curve(&circ, &gs, &ds, idx, &keeps, a.seed, exec)?;
    let out = a.out.unwrap_or_else(|| default_out_dir().join("pruning.csv"));
    let mut w = csv_out(&out)?;
    w.write_record(["kept_per_class", "acc_discrete", "pruned_fraction", "source"])?;
    for p in &curve {
        w.write_record([
            p.kept_per_class.to_string(),
            p.accuracy.to_string(),
            p.pruned_fraction.to_string(),
            circ.source.clone(),
        ])?;
    }
    w.flush()?;
    println!("baseline accuracy {baseline:.4}");
    for p in &curve {
        println!("kept {:>6}  accuracy {:.4}  pruned {:.4}", p.kept_per_class, p.accuracy, p.pruned_fraction);
    }
    Ok(())
}

fn csv_out(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn cmd_sweep(a: SweepArgs, exec: Exec) -> Result<()> {
    let mut plan = ExperimentPlan::load(&a.plan).with_context(|| format!("reading plan {}", a.plan.display()))?;
    if exec == Exec::Sequential {
        plan.train.exec = Exec::Sequential;
    }
    if plan.model.width > WIDE_LAYER {
        log::warn!("layers wider than {WIDE_LAYER} neurons need a lot of memory and time on a desk machine");
    }
    let out_dir = a.out_dir.or_else(|| plan.out_dir.clone()).unwrap_or_else(default_out_dir);
    let summary = run_sweep(&plan, &out_dir, a.workers)?;
    let agg = dlgn::experiment::aggregate(&summary.rows);
    let grid = best_tau_grid(&agg);
    let mut w = csv_out(&out_dir.join("best_tau.csv"))?;
    w.write_record(["classes", "neurons_per_class", "tau", "acc_discrete"])?;
    for b in &grid {
        w.write_record([
            b.classes.to_string(),
            b.neurons_per_class.to_string(),
            b.best_tau.to_string(),
            b.acc_discrete.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "ran {} cells, skipped {} already present; results in {}",
        summary.ran,
        summary.skipped,
        out_dir.display()
    );
    for r in &agg {
        println!(
            "classes {:>5}  npc {:>6}  tau {:>6}  dropout {:.2}  discrete {:.2} ± {:.2}  relaxed {:.2} ± {:.2}  (n={})",
            r.classes,
            r.neurons_per_class,
            r.tau,
            r.dropout,
            r.acc_discrete_mean,
            r.acc_discrete_std,
            r.acc_relaxed_mean,
            r.acc_relaxed_std,
            r.runs
        );
    }
    Ok(())
}

fn cmd_hist(a: HistArgs, exec: Exec) -> Result<()> {
    let ds = load_data(&a.data)?;
    let (net, _) = load_model(&a.model)?;
    let circ = harden(&net);
    let rates = activation_rates(&circ, &ds, ds.split(a.split)?, exec)?;
    let hist = rate_histogram(&rates, a.bins)?;
    let out = a.out.unwrap_or_else(|| default_out_dir().join("activation_hist.csv"));
    write_histogram_csv(&hist, create(&out)?)?;
    println!("extreme-rate mass {:.4}; histogram in {}", extreme_mass(&rates), out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let result = match cli.command {
        Command::Datagen(d) => datagen(d),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Compile(a) => cmd_compile(a),
        Command::Prune(a) => cmd_prune(a, exec),
        Command::Sweep(a) => cmd_sweep(a, exec),
        Command::ActivationHist(a) => cmd_hist(a, exec),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
