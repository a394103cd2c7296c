//! Mini-batch training with Adam, evaluation in relaxed and discrete mode,
//! and per-epoch run records.
//!
//! Each batch is cut into fixed-size shards. Shards run forward, head loss
//! and backward independently (in parallel when enabled) and their
//! coefficient gradients are summed in shard order, so a run is
//! bit-reproducible under both execution policies.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::short_hash;
use crate::compile::{circuit_accuracy, harden};
use crate::data::{BinaryDataset, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::heads::{argmax, dropout_mask, Codebook, DropoutConfig, GroupSumHead, Head};
use crate::matrix::Matrix;
use crate::network::{CoefficientGrads, LogicNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat `f32` parameter vector; moments kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        Error::check_dim("adam parameters", self.m.len(), params.len())?;
        Error::check_dim("adam gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g as f64;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    #[default]
    GroupSum,
    BinaryLogit,
    /// Random codes of `code_len` bits. With `group_reduction` the output
    /// layer is averaged down to `code_len` segments first; otherwise
    /// `code_len` must equal the output width.
    Codebook {
        code_len: usize,
        #[serde(default)]
        group_reduction: bool,
        #[serde(default)]
        codebook_seed: u64,
    },
}

impl HeadConfig {
    pub fn build(&self, outputs: usize, classes: usize, tau: f64) -> Result<Head> {
        Ok(match *self {
            HeadConfig::GroupSum => Head::GroupSum(GroupSumHead::new(outputs, classes, tau)?),
            HeadConfig::BinaryLogit => Head::BinaryLogit(GroupSumHead::new(outputs, classes, tau)?),
            HeadConfig::Codebook {
                code_len,
                group_reduction,
                codebook_seed,
            } => {
                if !(tau > 0.0) {
                    return Err(Error::config("temperature must be positive"));
                }
                let cb = Codebook::generate(classes, code_len, codebook_seed)?;
                let cb = if group_reduction {
                    cb.with_group_reduction(outputs)?
                } else {
                    Error::check_dim("codebook length vs output width", outputs, code_len)?;
                    cb
                };
                Head::Codebook { codebook: cb, tau }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    pub head: HeadConfig,
    pub dropout: DropoutConfig,
    /// Seeds the sample order and dropout masks.
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs (and after the last).
    pub eval_cadence: usize,
    /// Train on grayscale values when the dataset carries them.
    pub continuous_inputs: bool,
    /// Relaxed validation accuracy on grayscale inputs instead of the binarized copy.
    pub continuous_validation: bool,
    /// Samples per gradient shard; fixes the summation order.
    pub shard_size: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 100,
            batch_size: 256,
            tau: 10.0,
            adam: AdamConfig::default(),
            head: HeadConfig::GroupSum,
            dropout: DropoutConfig::default(),
            seed: 0,
            eval_cadence: 1,
            continuous_inputs: false,
            continuous_validation: false,
            shard_size: 64,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.shard_size == 0 || self.eval_cadence == 0 {
            return Err(Error::config("epochs, batch_size, shard_size and eval_cadence must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.tau)));
        }
        self.dropout.validate()
    }

    /// Hash of every setting that can change results (execution policy excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("exec");
        }
        short_hash(v.to_string().as_bytes())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Relaxed,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc_relaxed: Option<f64>,
    pub val_acc_discrete: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub network_seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc_discrete: Option<f64>,
    pub test_acc_discrete: Option<f64>,
    pub test_acc_relaxed: Option<f64>,
    pub wall_clock_secs: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    /// Equality on everything except wall-clock time.
    pub fn metrics_eq(&self, other: &RunRecord) -> bool {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        } == RunRecord {
            wall_clock_secs: 0.0,
            ..other.clone()
        }
    }

    /// Per-epoch CSV: `epoch,train_loss,acc_relaxed,acc_discrete,config_hash`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "acc_relaxed", "acc_discrete", "config_hash"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                fmt_opt(e.val_acc_relaxed),
                fmt_opt(e.val_acc_discrete),
                self.config_hash.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub struct TrainResult {
    pub network: LogicNetwork,
    /// Network at the epoch with the best discrete validation accuracy.
    pub best_network: LogicNetwork,
    pub head: Head,
    pub record: RunRecord,
}

fn check_compat(net: &LogicNetwork, ds: &BinaryDataset, head: &Head) -> Result<()> {
    Error::check_dim("dataset dimension vs network input", net.input_dim(), ds.dim())?;
    Error::check_dim("head input vs network output", head.input_width(), net.output_width())?;
    Error::check_dim("head classes vs dataset classes", ds.num_classes, head.classes())?;
    Ok(())
}

/// Loss and coefficient gradients of one shard.
#[allow(clippy::too_many_arguments)]
fn shard_step(
    net: &LogicNetwork,
    mix: &crate::network::Mixture,
    ds: &BinaryDataset,
    head: &Head,
    shard: &[u32],
    continuous: bool,
    scale: f64,
    mask: Option<&Matrix>,
) -> Result<(f64, CoefficientGrads)> {
    let x = ds.features(shard, continuous);
    let labels = ds.labels_of(shard);
    let trace = net.forward_with(mix, &x)?;
    let (loss, mut grad) = match mask {
        Some(m) => {
            let mut out = trace.output().clone();
            for (o, &k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *o *= k;
            }
            let (l, mut g) = head.scaled_loss_and_grad(&out, &labels, scale)?;
            for (d, &k) in g.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *d *= k;
            }
            (l, g)
        }
        None => head.scaled_loss_and_grad(trace.output(), &labels, scale)?,
    };
    let (coef, _) = net.backward_coefficients(mix, &x, &trace, &grad, false)?;
    grad = Matrix::zeros(0, 0);
    drop(grad);
    Ok((loss, coef))
}

fn shard_masks(
    cfg: &TrainConfig,
    n_out: usize,
    shards: &[&[u32]],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<Matrix>>> {
    if !cfg.dropout.is_active() {
        return Ok(None);
    }
    let scale = cfg.dropout.keep_scale();
    let to_weight = |keep: bool| if keep { scale } else { 0.0 };
    let masks = if cfg.dropout.per_sample {
        shards
            .iter()
            .map(|s| {
                let mut m = Matrix::zeros(n_out, s.len());
                for c in 0..s.len() {
                    for (j, k) in dropout_mask(n_out, cfg.dropout.p, rng)?.into_iter().enumerate() {
                        m.set(j, c, to_weight(k));
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let keep = dropout_mask(n_out, cfg.dropout.p, rng)?;
        shards
            .iter()
            .map(|s| {
                let mut m = Matrix::zeros(n_out, s.len());
                for (j, &k) in keep.iter().enumerate() {
                    m.row_mut(j).fill(to_weight(k));
                }
                m
            })
            .collect()
    };
    Ok(Some(masks))
}

/// Trains `net` on the dataset's train split.
pub fn train(mut net: LogicNetwork, ds: &BinaryDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let head = cfg.head.build(net.output_width(), ds.num_classes, cfg.tau)?;
    check_compat(&net, ds, &head)?;
    let train_idx = ds.split(Split::Train)?.to_vec();
    let has_val = !ds.splits.val.is_empty();
    let continuous = cfg.continuous_inputs && ds.has_continuous();
    let exec = cfg.exec;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, net.num_params());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, LogicNetwork)> = None;
    let mut order = train_idx;
    let mut params = net.flat_logits();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mix = net.mixture();
            let shards: Vec<&[u32]> = batch.chunks(cfg.shard_size).collect();
            let masks = shard_masks(cfg, net.output_width(), &shards, &mut rng)?;
            let scale = 1.0 / batch.len() as f64;
            let results = exec.map_range(shards.len(), |i| {
                let mask = masks.as_ref().map(|m| &m[i]);
                shard_step(&net, &mix, ds, &head, shards[i], continuous, scale, mask)
            });
            let mut loss = 0.0;
            let mut coef = CoefficientGrads::zeros_like(&net);
            for r in results {
                let (l, c) = r?;
                loss += l;
                coef.add_assign(&c);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss,
                    hint: "lower the learning rate or raise the temperature",
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let grads = net.flat_logit_grads(&coef, exec);
            adam.step(&mut params, &grads, cfg.lr)?;
            net.set_flat_logits(&params)?;
        }
        epoch_loss /= order.len() as f64;

        let evaluate_now = has_val && (epoch % cfg.eval_cadence == 0 || epoch == cfg.epochs);
        let (val_relaxed, val_discrete) = if evaluate_now {
            let val = &ds.splits.val;
            let relaxed = relaxed_accuracy(&net, ds, val, &head, cfg.continuous_validation, exec)?;
            let discrete = circuit_accuracy(&harden(&net), &head, ds, val, exec)?;
            (Some(relaxed), Some(discrete))
        } else {
            (None, None)
        };
        if let Some(acc) = val_discrete {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, net.clone()));
            }
        }
        log::debug!(
            "epoch {epoch}: loss {epoch_loss:.5} val relaxed {val_relaxed:?} discrete {val_discrete:?}"
        );
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_acc_relaxed: val_relaxed,
            val_acc_discrete: val_discrete,
        });
    }

    let (test_discrete, test_relaxed) = if ds.splits.test.is_empty() {
        (None, None)
    } else {
        let test = &ds.splits.test;
        (
            Some(circuit_accuracy(&harden(&net), &head, ds, test, exec)?),
            Some(relaxed_accuracy(&net, ds, test, &head, false, exec)?),
        )
    };
    let (best_epoch, best_val, best_network) = match best {
        Some((e, a, n)) => (Some(e), Some(a), n),
        None => (None, None, net.clone()),
    };
    let record = RunRecord {
        config_hash: cfg.hash(),
        network_seed: net.seed(),
        epochs: records,
        best_epoch,
        best_val_acc_discrete: best_val,
        test_acc_discrete: test_discrete,
        test_acc_relaxed: test_relaxed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainResult {
        network: net,
        best_network,
        head,
        record,
    })
}

/// Relaxed-mode accuracy (percent): relaxed forward pass, head's soft decision.
pub fn relaxed_accuracy(
    net: &LogicNetwork,
    ds: &BinaryDataset,
    indices: &[u32],
    head: &Head,
    continuous: bool,
    exec: Exec,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    check_compat(net, ds, head)?;
    let mix = net.mixture();
    let chunks: Vec<&[u32]> = indices.chunks(256).collect();
    let correct = exec.map(&chunks, |chunk| -> Result<usize> {
        let x = ds.features(chunk, continuous);
        let trace = net.forward_with(&mix, &x)?;
        let out = trace.output();
        let mut hits = 0;
        for (s, &i) in chunk.iter().enumerate() {
            let pred = match head {
                Head::GroupSum(h) | Head::BinaryLogit(h) => {
                    // logits are monotone in the segment sums
                    let mut sums = vec![0.0; h.classes()];
                    for j in 0..h.outputs() {
                        sums[h.class_of(j)] += out.get(j, s);
                    }
                    argmax(&sums)
                }
                Head::Codebook { .. } => head.predict_relaxed(&out.column(s))?,
            };
            hits += (pred == ds.labels[i as usize] as usize) as usize;
        }
        Ok(hits)
    });
    let mut total = 0;
    for c in correct {
        total += c?;
    }
    Ok(100.0 * total as f64 / indices.len() as f64)
}

/// Accuracy (percent) on a split. Discrete mode hardens the network and
/// evaluates binarized inputs; relaxed mode runs the relaxed forward pass on
/// the binarized inputs.
pub fn evaluate(
    net: &LogicNetwork,
    ds: &BinaryDataset,
    split: Split,
    mode: EvalMode,
    head: &Head,
    exec: Exec,
) -> Result<f64> {
    let idx = ds.split(split)?;
    check_compat(net, ds, head)?;
    match mode {
        EvalMode::Discrete => circuit_accuracy(&harden(net), head, ds, idx, exec),
        EvalMode::Relaxed => relaxed_accuracy(net, ds, idx, head, false, exec),
    }
}

/// Picks a random seed from an RNG; used to derive per-run seeds in sweeps.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.random()
}
