//! Activation-rate statistics and the sweep harness: Cartesian products of
//! sweep axes and seeds, resumable CSV output, aggregation and best-τ grids.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{short_hash, write_checkpoint};
use crate::compile::{eval_packed, harden, pruning_curve, DiscreteCircuit, PackedBatch};
use crate::data::{generate_synthetic, take_classes, BinaryDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::heads::{DropoutConfig, Head};
use crate::network::LogicNetwork;
use crate::train::{train, TrainConfig};

/// Fraction of samples on which each kept output of the circuit is 1.
pub fn activation_rates(circ: &DiscreteCircuit, ds: &BinaryDataset, indices: &[u32], exec: Exec) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::config("activation rates need at least one sample"));
    }
    let batch = PackedBatch::from_dataset(ds, indices);
    let out = eval_packed(circ, &batch, exec)?;
    Ok((0..circ.output_width())
        .filter(|&j| circ.kept_outputs[j])
        .map(|j| {
            let ones: u32 = out.feature_words(j).iter().map(|w| w.count_ones()).sum();
            ones as f64 / indices.len() as f64
        })
        .collect())
}

/// Percent of rates per bin; bin `i` covers `[i/bins, (i+1)/bins)`, the last bin is closed.
pub fn rate_histogram(rates: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let mut counts = vec![0usize; bins];
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config(format!("rate {r} outside [0, 1]")));
        }
        counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = rates.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| 100.0 * c as f64 / n).collect())
}

/// Fraction of rates near 0, 1/2 or 1: `[0, 0.02] ∪ [0.48, 0.52] ∪ [0.98, 1]`.
pub fn extreme_mass(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let hit = rates
        .iter()
        .filter(|&&r| r <= 0.02 || (0.48..=0.52).contains(&r) || r >= 0.98)
        .count();
    hit as f64 / rates.len() as f64
}

pub fn write_histogram_csv<W: Write>(hist: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lo", "bin_hi", "percent"])?;
    let b = hist.len() as f64;
    for (i, p) in hist.iter().enumerate() {
        out.write_record([(i as f64 / b).to_string(), ((i + 1) as f64 / b).to_string(), p.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Temperature for a Group-Sum head with `neurons_per_class` outputs per
/// class: large groups get large τ, small groups small τ. Returns a value
/// from `{1, 3, 10, 30, 100}`, the grid entry log-nearest to `sqrt(npc) / 2`.
pub fn suggest_tau(neurons_per_class: usize) -> f64 {
    const GRID: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];
    let target = ((neurons_per_class.max(1) as f64).sqrt() / 2.0).ln();
    GRID.into_iter()
        .min_by(|a, b| (a.ln() - target).abs().total_cmp(&(b.ln() - target).abs()))
        .expect("grid is non-empty")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Fresh synthetic data per cell; the cell seed is added to `seed`.
    Synthetic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_fixed_min")]
        fixed_bits_min: usize,
        #[serde(default = "default_fixed_max")]
        fixed_bits_max: usize,
        #[serde(default = "default_per_class")]
        samples_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A dataset file; the classes axis keeps labels below each ladder value.
    File { path: PathBuf },
}

fn default_dim() -> usize {
    784
}
fn default_fixed_min() -> usize {
    5
}
fn default_fixed_max() -> usize {
    40
}
fn default_per_class() -> usize {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub layers: usize,
    pub width: usize,
    /// Output layer width, rounded down to a multiple of the class count.
    /// Ignored when the neurons-per-class axis is set.
    pub output_width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 4096,
            output_width: 4096,
        }
    }
}

impl ModelSpec {
    pub fn widths(&self, classes: usize, neurons_per_class: Option<usize>) -> Result<Vec<usize>> {
        if self.layers == 0 || self.width == 0 || classes == 0 {
            return Err(Error::config("model needs at least one layer, a positive width and classes"));
        }
        let out = match neurons_per_class {
            Some(n) => n * classes,
            None => self.output_width / classes * classes,
        };
        if out == 0 {
            return Err(Error::config(format!(
                "output width {} is smaller than the class count {classes}",
                self.output_width
            )));
        }
        let mut w = vec![self.width; self.layers - 1];
        w.push(out);
        Ok(w)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub tau: Vec<f64>,
    pub classes: Vec<usize>,
    pub neurons_per_class: Vec<usize>,
    pub dropout: Vec<f64>,
    pub keep_per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Store the trained network of every cell next to the CSV.
    #[serde(default)]
    pub save_checkpoints: bool,
    /// Record the extreme-rate mass of the trained circuit on the test split.
    #[serde(default)]
    pub activation_stats: bool,
}

fn default_kind() -> String {
    "sweep".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One point of the Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub classes: usize,
    pub tau: f64,
    pub neurons_per_class: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub classes: usize,
    pub tau: f64,
    pub neurons_per_class: usize,
    pub dropout: f64,
    pub seed: u64,
    pub acc_discrete: f64,
    pub acc_relaxed: f64,
    pub best_val_discrete: f64,
    pub extreme_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub config_hash: String,
    pub classes: usize,
    pub tau: f64,
    pub neurons_per_class: usize,
    pub seed: u64,
    pub kept_per_class: usize,
    pub acc_discrete: f64,
    pub pruned_fraction: f64,
}

pub struct CellOutcome {
    pub row: SweepRow,
    pub pruning: Vec<PruneRow>,
    pub network: LogicNetwork,
    pub head: Head,
}

impl ExperimentPlan {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let plan: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("a plan needs at least one seed"));
        }
        let a = &self.axes;
        if a.tau.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::config("every τ must be positive"));
        }
        if a.classes.contains(&0) || a.classes.contains(&1) {
            return Err(Error::config("class ladder values must be >= 2"));
        }
        if a.neurons_per_class.contains(&0) || a.keep_per_class.contains(&0) {
            return Err(Error::config("neuron counts must be >= 1"));
        }
        if a.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        self.train.validate()
    }

    /// Cells in a fixed order: classes, neurons per class, τ, dropout, seed.
    /// Empty axes fall back to the base configuration.
    pub fn cells(&self, base_classes: usize) -> Vec<Cell> {
        let classes = if self.axes.classes.is_empty() { vec![base_classes] } else { self.axes.classes.clone() };
        let npc: Vec<Option<usize>> = if self.axes.neurons_per_class.is_empty() {
            vec![None]
        } else {
            self.axes.neurons_per_class.iter().map(|&n| Some(n)).collect()
        };
        let taus = if self.axes.tau.is_empty() { vec![self.train.tau] } else { self.axes.tau.clone() };
        let drops = if self.axes.dropout.is_empty() { vec![self.train.dropout.p] } else { self.axes.dropout.clone() };
        let mut cells = Vec::new();
        for &k in &classes {
            for &n in &npc {
                for &tau in &taus {
                    for &p in &drops {
                        for &seed in &self.seeds {
                            cells.push(Cell {
                                classes: k,
                                tau,
                                neurons_per_class: n,
                                dropout: p,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    fn cell_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            tau: cell.tau,
            seed: cell.seed,
            dropout: DropoutConfig {
                p: cell.dropout,
                ..self.train.dropout
            },
            ..self.train.clone()
        }
    }

    /// Hash of everything that determines a cell's results.
    pub fn cell_hash(&self, cell: &Cell) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "cell": cell,
            "train": self.cell_config(cell).hash(),
            "keep": self.axes.keep_per_class,
            "activation": self.activation_stats,
        });
        short_hash(key.to_string().as_bytes())
    }

    fn cell_dataset(&self, cell: &Cell, file: Option<&BinaryDataset>) -> Result<BinaryDataset> {
        match (&self.dataset, file) {
            (
                DatasetSpec::Synthetic {
                    dim,
                    fixed_bits_min,
                    fixed_bits_max,
                    samples_per_class,
                    seed,
                },
                _,
            ) => {
                let spec = SyntheticSpec {
                    num_classes: cell.classes,
                    dim: *dim,
                    fixed_bits_min: *fixed_bits_min,
                    fixed_bits_max: *fixed_bits_max,
                    samples_per_class: *samples_per_class,
                    seed: seed.wrapping_add(cell.seed),
                };
                Ok(generate_synthetic(&spec)?.0)
            }
            (DatasetSpec::File { .. }, Some(ds)) if ds.num_classes == cell.classes => Ok(ds.clone()),
            (DatasetSpec::File { .. }, Some(ds)) => take_classes(ds, cell.classes),
            (DatasetSpec::File { path }, None) => Err(Error::config(format!("dataset {} not loaded", path.display()))),
        }
    }

    fn base_dataset(&self) -> Result<Option<BinaryDataset>> {
        match &self.dataset {
            DatasetSpec::File { path } => Ok(Some(BinaryDataset::load(path)?)),
            DatasetSpec::Synthetic { .. } => Ok(None),
        }
    }

    /// Trains and evaluates one cell.
    pub fn run_cell(&self, cell: &Cell, file: Option<&BinaryDataset>) -> Result<CellOutcome> {
        let ds = self.cell_dataset(cell, file)?;
        let widths = self.model.widths(cell.classes, cell.neurons_per_class)?;
        let npc = widths[widths.len() - 1] / cell.classes;
        let net = LogicNetwork::build(ds.dim(), &widths, cell.seed)?;
        let cfg = self.cell_config(cell);
        let result = train(net, &ds, &cfg)?;
        let hash = self.cell_hash(cell);
        let test = ds.split(Split::Test)?;
        let circ = harden(&result.network);
        let extreme = if self.activation_stats {
            Some(extreme_mass(&activation_rates(&circ, &ds, test, cfg.exec)?))
        } else {
            None
        };
        let mut pruning = Vec::new();
        if let (false, Head::GroupSum(h)) = (self.axes.keep_per_class.is_empty(), &result.head) {
            let keeps: Vec<usize> = self.axes.keep_per_class.iter().copied().filter(|&k| k <= npc).collect();
            for p in pruning_curve(&circ, h, &ds, test, &keeps, cell.seed, cfg.exec)? {
                pruning.push(PruneRow {
                    config_hash: hash.clone(),
                    classes: cell.classes,
                    tau: cell.tau,
                    neurons_per_class: npc,
                    seed: cell.seed,
                    kept_per_class: p.kept_per_class,
                    acc_discrete: p.accuracy,
                    pruned_fraction: p.pruned_fraction,
                });
            }
        }
        let rec = &result.record;
        Ok(CellOutcome {
            row: SweepRow {
                config_hash: hash,
                classes: cell.classes,
                tau: cell.tau,
                neurons_per_class: npc,
                dropout: cell.dropout,
                seed: cell.seed,
                acc_discrete: rec.test_acc_discrete.unwrap_or(f64::NAN),
                acc_relaxed: rec.test_acc_relaxed.unwrap_or(f64::NAN),
                best_val_discrete: rec.best_val_acc_discrete.unwrap_or(f64::NAN),
                extreme_mass: extreme,
            },
            pruning,
            network: result.network,
            head: result.head,
        })
    }
}

/// Rows of an existing sweep CSV; a missing file reads as empty.
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct SweepSummary {
    pub ran: usize,
    pub skipped: usize,
    pub rows: Vec<SweepRow>,
}

/// Runs every cell not yet present in `<out_dir>/sweep.csv`, `workers` at a
/// time. Results are appended by a single writer as cells finish; pruning
/// curves go to `pruning.csv` and aggregates to `aggregate.csv`.
pub fn run_sweep(plan: &ExperimentPlan, out_dir: &Path, workers: usize) -> Result<SweepSummary> {
    plan.validate()?;
    fs::create_dir_all(out_dir)?;
    let sweep_csv = out_dir.join("sweep.csv");
    let prune_csv = out_dir.join("pruning.csv");
    let existing: Vec<SweepRow> = read_rows(&sweep_csv)?;
    let done: HashSet<String> = existing.iter().map(|r| r.config_hash.clone()).collect();

    let file = plan.base_dataset()?;
    let base_classes = match &file {
        Some(ds) => ds.num_classes,
        None if !plan.axes.classes.is_empty() => plan.axes.classes[0],
        None => return Err(Error::config("a synthetic plan needs a classes axis")),
    };
    let all = plan.cells(base_classes);
    let todo: Vec<Cell> = all.iter().filter(|c| !done.contains(&plan.cell_hash(c))).cloned().collect();
    let skipped = all.len() - todo.len();

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<CellOutcome>>();
    let workers = workers.clamp(1, todo.len().max(1));
    let mut ran = 0;
    let mut first_err = None;
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next, file) = (&todo, &next, file.as_ref());
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = todo.get(i) else { break };
                if tx.send(plan.run_cell(cell, file)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            let written = outcome.and_then(|o| {
                append_rows(&sweep_csv, std::slice::from_ref(&o.row))?;
                if !o.pruning.is_empty() {
                    append_rows(&prune_csv, &o.pruning)?;
                }
                if plan.save_checkpoints {
                    write_checkpoint(out_dir.join(format!("{}.ckpt", o.row.config_hash)), &o.network, Some(&o.head))?;
                }
                log::info!(
                    "cell k={} tau={} seed={}: discrete {:.2}%",
                    o.row.classes,
                    o.row.tau,
                    o.row.seed,
                    o.row.acc_discrete
                );
                Ok(())
            });
            match written {
                Ok(()) => ran += 1,
                Err(e) => {
                    // stop handing out new cells; finish the ones in flight
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    let rows: Vec<SweepRow> = read_rows(&sweep_csv)?;
    write_aggregate(&aggregate(&rows), out_dir.join("aggregate.csv"))?;
    Ok(SweepSummary { ran, skipped, rows })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub classes: usize,
    pub tau: f64,
    pub neurons_per_class: usize,
    pub dropout: f64,
    pub runs: usize,
    pub acc_discrete_mean: f64,
    pub acc_discrete_std: f64,
    pub acc_relaxed_mean: f64,
    pub acc_relaxed_std: f64,
}

type GroupKey = (usize, usize, u64, u64);

fn key(r: &SweepRow) -> GroupKey {
    (r.classes, r.neurons_per_class, r.tau.to_bits(), r.dropout.to_bits())
}

/// Mean ± sample std over seeds for every (classes, neurons per class, τ, dropout).
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let d: Vec<f64> = g.iter().map(|r| r.acc_discrete).collect();
            let rl: Vec<f64> = g.iter().map(|r| r.acc_relaxed).collect();
            let (dm, ds) = mean_std(&d);
            let (rm, rs) = mean_std(&rl);
            AggregateRow {
                classes: g[0].classes,
                tau: g[0].tau,
                neurons_per_class: g[0].neurons_per_class,
                dropout: g[0].dropout,
                runs: g.len(),
                acc_discrete_mean: dm,
                acc_discrete_std: ds,
                acc_relaxed_mean: rm,
                acc_relaxed_std: rs,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestTau {
    pub classes: usize,
    pub neurons_per_class: usize,
    pub best_tau: f64,
    pub acc_discrete: f64,
}

/// For every (classes, neurons per class) cell, the τ with the highest mean
/// discrete accuracy. Ties go to the smaller τ.
pub fn best_tau_grid(rows: &[AggregateRow]) -> Vec<BestTau> {
    let mut best: BTreeMap<(usize, usize), BestTau> = BTreeMap::new();
    for r in rows {
        let cand = BestTau {
            classes: r.classes,
            neurons_per_class: r.neurons_per_class,
            best_tau: r.tau,
            acc_discrete: r.acc_discrete_mean,
        };
        best.entry((r.classes, r.neurons_per_class))
            .and_modify(|b| {
                if cand.acc_discrete > b.acc_discrete || (cand.acc_discrete == b.acc_discrete && cand.best_tau < b.best_tau) {
                    *b = cand.clone();
                }
            })
            .or_insert(cand);
    }
    best.into_values().collect()
}

/// Best τ per (classes, seed), same tie rule; used for per-seed majority checks.
pub fn best_tau_per_seed(rows: &[SweepRow]) -> BTreeMap<(usize, u64), f64> {
    let mut best: BTreeMap<(usize, u64), (f64, f64)> = BTreeMap::new();
    for r in rows {
        best.entry((r.classes, r.seed))
            .and_modify(|(tau, acc)| {
                if r.acc_discrete > *acc || (r.acc_discrete == *acc && r.tau < *tau) {
                    *tau = r.tau;
                    *acc = r.acc_discrete;
                }
            })
            .or_insert((r.tau, r.acc_discrete));
    }
    best.into_iter().map(|(k, (t, _))| (k, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateKind;

    #[test]
    fn histogram_sums_to_hundred() {
        let rates: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let h = rate_histogram(&rates, 100).unwrap();
        assert!((h.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert!(h[99] > 0.0);
        assert!(rate_histogram(&[1.5], 10).is_err());
        assert!(rate_histogram(&[0.5], 0).is_err());
    }

    #[test]
    fn extreme_mass_bins() {
        assert_eq!(extreme_mass(&[0.0, 0.5, 1.0, 0.3]), 0.75);
        assert_eq!(extreme_mass(&[0.021, 0.479, 0.521, 0.979]), 0.0);
        assert_eq!(extreme_mass(&[]), 0.0);
    }

    #[test]
    fn constant_true_neuron_rate_is_one() {
        let ds = generate_synthetic(&SyntheticSpec {
            dim: 16,
            fixed_bits_min: 2,
            fixed_bits_max: 4,
            samples_per_class: 50,
            ..SyntheticSpec::new(2, 3)
        })
        .unwrap()
        .0;
        let mut net = LogicNetwork::build(16, &[4], 0).unwrap();
        for (j, g) in [GateKind::True, GateKind::False, GateKind::A, GateKind::True].into_iter().enumerate() {
            net.set_gate(0, j, g);
        }
        let circ = harden(&net);
        let idx: Vec<u32> = (0..ds.len() as u32).collect();
        let rates = activation_rates(&circ, &ds, &idx, Exec::Sequential).unwrap();
        assert_eq!(rates[0], 1.0);
        assert_eq!(rates[1], 0.0);
        assert_eq!(rates[3], 1.0);
        let (a, _) = net.layers()[0].inputs(2);
        let ones = idx.iter().filter(|&&i| ds.bits.get(i as usize, a)).count();
        assert_eq!(rates[2], ones as f64 / idx.len() as f64);
    }

    #[test]
    fn tau_rule_prefers_large_tau_for_large_groups() {
        assert_eq!(suggest_tau(2048), 30.0);
        assert_eq!(suggest_tau(409), 10.0);
        assert_eq!(suggest_tau(1), 1.0);
        let mut last = 0.0;
        for n in [1, 10, 100, 1000, 10000, 100000] {
            let t = suggest_tau(n);
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    fn row(classes: usize, tau: f64, seed: u64, acc: f64) -> SweepRow {
        SweepRow {
            config_hash: format!("{classes}-{tau}-{seed}"),
            classes,
            tau,
            neurons_per_class: 8,
            dropout: 0.0,
            seed,
            acc_discrete: acc,
            acc_relaxed: acc,
            best_val_discrete: acc,
            extreme_mass: None,
        }
    }

    #[test]
    fn best_tau_breaks_ties_low() {
        let rows = vec![
            row(2, 1.0, 0, 90.0),
            row(2, 10.0, 0, 95.0),
            row(2, 100.0, 0, 95.0),
            row(5, 1.0, 0, 80.0),
            row(5, 10.0, 0, 70.0),
        ];
        let grid = best_tau_grid(&aggregate(&rows));
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].best_tau, 10.0);
        assert_eq!(grid[1].best_tau, 1.0);
        let per_seed = best_tau_per_seed(&rows);
        assert_eq!(per_seed[&(2, 0)], 10.0);
        assert_eq!(per_seed[&(5, 0)], 1.0);
    }

    #[test]
    fn plan_cells_cover_product() {
        let plan = ExperimentPlan::from_toml_str(
            r#"
            seeds = [0, 1]
            [dataset]
            kind = "synthetic"
            dim = 32
            [axes]
            tau = [1.0, 10.0]
            classes = [2, 4]
            "#,
        )
        .unwrap();
        let cells = plan.cells(2);
        assert_eq!(cells.len(), 8);
        let hashes: HashSet<String> = cells.iter().map(|c| plan.cell_hash(c)).collect();
        assert_eq!(hashes.len(), 8);
        assert!(ExperimentPlan::from_toml_str("seeds = []\n[dataset]\nkind = \"synthetic\"").is_err());
    }

    #[test]
    fn model_widths_round_to_class_multiple() {
        let m = ModelSpec::default();
        assert_eq!(m.widths(10, None).unwrap(), vec![4096, 4096, 4096, 4090]);
        assert_eq!(m.widths(100, None).unwrap()[3], 4000);
        assert_eq!(m.widths(3, Some(7)).unwrap()[3], 21);
    }

    #[test]
    fn sweep_resumes_without_rerunning() {
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::from_toml_str(
            r#"
            seeds = [0]
            [dataset]
            kind = "synthetic"
            dim = 32
            fixed_bits_min = 4
            fixed_bits_max = 8
            samples_per_class = 40
            [model]
            layers = 2
            width = 32
            output_width = 16
            [axes]
            tau = [1.0, 3.0]
            classes = [2]
            keep_per_class = [1, 4, 8]
            [train]
            epochs = 2
            batch_size = 16
            "#,
        )
        .unwrap();
        let first = run_sweep(&plan, dir.path(), 2).unwrap();
        assert_eq!((first.ran, first.skipped), (2, 0));
        let before = fs::read(dir.path().join("sweep.csv")).unwrap();
        let second = run_sweep(&plan, dir.path(), 1).unwrap();
        assert_eq!((second.ran, second.skipped), (0, 2));
        assert_eq!(fs::read(dir.path().join("sweep.csv")).unwrap(), before);
        let prune: Vec<PruneRow> = read_rows(dir.path().join("pruning.csv")).unwrap();
        assert_eq!(prune.len(), 6);
        let agg: Vec<AggregateRow> = read_rows(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(agg.len(), 2);
    }
}
