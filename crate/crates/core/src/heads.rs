//! Output-layer strategies: Group-Sum with temperature, Group-Sum dropout,
//! random-codebook decoding (optionally after a group reduction), and the
//! per-neuron binary cross-entropy target scheme.
//!
//! Batch functions take feature-major matrices (one row per output neuron,
//! one column per sample) and a `scale` that multiplies both the summed
//! per-sample loss and its gradient. Pass `1 / batch_size` for a batch mean;
//! training shards pass `1 / full_batch_size` so shard results add up.

use std::collections::HashSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Clamp bound for the binary cross-entropy losses.
pub const BCE_EPS: f64 = 1e-7;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-sum-exp computed stably.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::InvalidLabel { label, classes })
    }
}

fn bce(x: f64, target: f64) -> (f64, f64) {
    let xc = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(target * xc.ln() + (1.0 - target) * (1.0 - xc).ln());
    let grad = if x > BCE_EPS && x < 1.0 - BCE_EPS {
        -target / xc + (1.0 - target) / (1.0 - xc)
    } else {
        0.0
    };
    (loss, grad)
}

/// Group-Sum head: `n` outputs split into `k` contiguous equal segments,
/// summed, and divided by `tau` before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSumHead {
    n: usize,
    k: usize,
    tau: f64,
}

impl GroupSumHead {
    pub fn new(n: usize, k: usize, tau: f64) -> Result<Self> {
        if k < 1 || n < 1 {
            return Err(Error::config("Group-Sum needs at least one output and one class"));
        }
        if !n.is_multiple_of(k) {
            return Err(Error::config(format!(
                "{k} classes do not divide {n} output neurons"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { n, k, tau })
    }

    pub fn outputs(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn group_size(&self) -> usize {
        self.n / self.k
    }

    pub fn segment(&self, class: usize) -> Range<usize> {
        let g = self.group_size();
        class * g..(class + 1) * g
    }

    #[inline]
    pub fn class_of(&self, neuron: usize) -> usize {
        neuron / self.group_size()
    }

    pub fn logits(&self, out: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("head input", self.n, out.len())?;
        Ok(out
            .chunks_exact(self.group_size())
            .map(|seg| seg.iter().sum::<f64>() / self.tau)
            .collect())
    }

    pub fn probabilities(&self, out: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(out)?))
    }

    /// Cross-entropy of one sample and its gradient with respect to `out`.
    pub fn loss_and_grad(&self, out: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        check_label(label, self.k)?;
        let logits = self.logits(out)?;
        let loss = log_sum_exp(&logits) - logits[label];
        let p = softmax(&logits);
        let mut grad = vec![0.0; self.n];
        for c in 0..self.k {
            let d = (p[c] - if c == label { 1.0 } else { 0.0 }) / self.tau;
            grad[self.segment(c)].fill(d);
        }
        Ok((loss, grad))
    }

    /// Mean cross-entropy over a batch and its gradient.
    pub fn batch_loss_and_grad(&self, out: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
        let scale = 1.0 / labels.len().max(1) as f64;
        self.scaled_loss_and_grad(out, labels, scale)
    }

    pub fn scaled_loss_and_grad(&self, out: &Matrix, labels: &[u32], scale: f64) -> Result<(f64, Matrix)> {
        Error::check_dim("head input rows", self.n, out.rows())?;
        Error::check_dim("labels", out.cols(), labels.len())?;
        let b = out.cols();
        let g = self.group_size();
        let mut sums = vec![0.0; self.k * b];
        for j in 0..self.n {
            let c = j / g;
            for (s, &v) in out.row(j).iter().enumerate() {
                sums[s * self.k + c] += v;
            }
        }
        let mut total = 0.0;
        let mut dlogit = vec![0.0; self.k * b];
        for (s, &label) in labels.iter().enumerate() {
            let label = label as usize;
            check_label(label, self.k)?;
            let logits: Vec<f64> = sums[s * self.k..(s + 1) * self.k]
                .iter()
                .map(|v| v / self.tau)
                .collect();
            total += log_sum_exp(&logits) - logits[label];
            let p = softmax(&logits);
            for c in 0..self.k {
                let onehot = if c == label { 1.0 } else { 0.0 };
                dlogit[s * self.k + c] = scale * (p[c] - onehot) / self.tau;
            }
        }
        let mut grad = Matrix::zeros(self.n, b);
        for j in 0..self.n {
            let c = j / g;
            for (s, d) in grad.row_mut(j).iter_mut().enumerate() {
                *d = dlogit[s * self.k + c];
            }
        }
        Ok((total * scale, grad))
    }

    /// Per-neuron binary cross-entropy: target 1 inside the label's segment,
    /// 0 elsewhere, averaged over all `n` neurons.
    pub fn binary_logit_loss(&self, out: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        check_label(label, self.k)?;
        Error::check_dim("head input", self.n, out.len())?;
        let seg = self.segment(label);
        let inv_n = 1.0 / self.n as f64;
        let mut loss = 0.0;
        let grad = out
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let t = if seg.contains(&j) { 1.0 } else { 0.0 };
                let (l, g) = bce(x, t);
                loss += l;
                g * inv_n
            })
            .collect();
        Ok((loss * inv_n, grad))
    }

    pub fn scaled_binary_logit_loss(&self, out: &Matrix, labels: &[u32], scale: f64) -> Result<(f64, Matrix)> {
        Error::check_dim("head input rows", self.n, out.rows())?;
        Error::check_dim("labels", out.cols(), labels.len())?;
        for &l in labels {
            check_label(l as usize, self.k)?;
        }
        let inv_n = 1.0 / self.n as f64;
        let mut grad = Matrix::zeros(self.n, out.cols());
        let mut total = 0.0;
        for j in 0..self.n {
            let c = self.class_of(j);
            let row = out.row(j);
            for (s, (d, &x)) in grad.row_mut(j).iter_mut().zip(row).enumerate() {
                let t = if labels[s] as usize == c { 1.0 } else { 0.0 };
                let (l, g) = bce(x, t);
                total += l;
                *d = g * inv_n * scale;
            }
        }
        Ok((total * inv_n * scale, grad))
    }
}

/// Whether a call happens during training (dropout active) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p: f64,
    /// Multiply survivors by `1 / (1 - p)`.
    #[serde(default)]
    pub rescale: bool,
    /// Draw a fresh mask per sample instead of one per batch.
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p: 0.0,
            rescale: false,
            per_sample: false,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.p) {
            Ok(())
        } else {
            Err(Error::config(format!("dropout probability must be in [0, 1), got {}", self.p)))
        }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0
    }

    pub fn keep_scale(&self) -> f64 {
        if self.rescale {
            1.0 / (1.0 - self.p)
        } else {
            1.0
        }
    }
}

/// Keep-mask over `n` output neurons; each is dropped with probability `p`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if p == 0.0 {
        return Ok(vec![true; n]);
    }
    Ok((0..n).map(|_| rng.random::<f64>() >= p).collect())
}

/// Zeroes each output independently with probability `p` in training mode;
/// identity in evaluation mode.
pub fn apply_groupsum_dropout<R: Rng + ?Sized>(
    out: &[f64],
    cfg: &DropoutConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if mode == Mode::Eval || !cfg.is_active() {
        return Ok(out.to_vec());
    }
    let mask = dropout_mask(out.len(), cfg.p, rng)?;
    let scale = cfg.keep_scale();
    Ok(out
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v * scale } else { 0.0 })
        .collect())
}

/// Random binary class codes decoded by minimum Hamming distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    o: usize,
    /// Packed code rows, bit `j` of a row at word `j / 64`, position `j % 64`.
    codes: Vec<Vec<u64>>,
    /// Output-layer width when the outputs are first reduced to `o` values by
    /// averaging `n / o` contiguous neurons.
    group_input: Option<usize>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn pack(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; words_for(bits.len())];
    for (j, &b) in bits.iter().enumerate() {
        if b {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    words
}

impl Codebook {
    /// `k` distinct uniformly random codes of length `o`, duplicates redrawn.
    pub fn generate(k: usize, o: usize, seed: u64) -> Result<Self> {
        if k < 1 || o < 1 {
            return Err(Error::config("codebook needs at least one class and one bit"));
        }
        if o < 64 && (1u64 << o) < k as u64 {
            return Err(Error::config(format!(
                "{o}-bit codes cannot distinguish {k} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(k);
        let mut codes = Vec::with_capacity(k);
        let tail = o % 64;
        while codes.len() < k {
            let mut row: Vec<u64> = (0..words_for(o)).map(|_| rng.random()).collect();
            if tail != 0 {
                *row.last_mut().expect("o >= 1") &= (1u64 << tail) - 1;
            }
            if seen.insert(row.clone()) {
                codes.push(row);
            }
        }
        Ok(Self {
            o,
            codes,
            group_input: None,
        })
    }

    pub fn from_codes(codes: &[Vec<bool>]) -> Result<Self> {
        let o = codes.first().map_or(0, Vec::len);
        if o == 0 {
            return Err(Error::config("codebook needs at least one non-empty code"));
        }
        let mut seen = HashSet::new();
        let mut packed = Vec::with_capacity(codes.len());
        for c in codes {
            Error::check_dim("code length", o, c.len())?;
            let p = pack(c);
            if !seen.insert(p.clone()) {
                return Err(Error::config("codebook codes must be distinct"));
            }
            packed.push(p);
        }
        Ok(Self {
            o,
            codes: packed,
            group_input: None,
        })
    }

    pub(crate) fn from_packed(o: usize, codes: Vec<Vec<u64>>) -> Result<Self> {
        if o == 0 || codes.is_empty() {
            return Err(Error::config("codebook needs at least one class and one bit"));
        }
        let unique: HashSet<&Vec<u64>> = codes.iter().collect();
        if unique.len() != codes.len() {
            return Err(Error::config("codebook codes must be distinct"));
        }
        if codes.iter().any(|c| c.len() != words_for(o)) {
            return Err(Error::config("codebook row width mismatch"));
        }
        Ok(Self {
            o,
            codes,
            group_input: None,
        })
    }

    /// Reduce an `n`-neuron output layer to `o` values by segment averaging before decoding.
    pub fn with_group_reduction(mut self, n: usize) -> Result<Self> {
        if !n.is_multiple_of(self.o) {
            return Err(Error::config(format!(
                "code length {} does not divide {n} output neurons",
                self.o
            )));
        }
        self.group_input = Some(n);
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.codes.len()
    }

    pub fn code_len(&self) -> usize {
        self.o
    }

    pub fn group_input(&self) -> Option<usize> {
        self.group_input
    }

    /// Width of the network output this codebook consumes.
    pub fn input_width(&self) -> usize {
        self.group_input.unwrap_or(self.o)
    }

    pub fn segment_size(&self) -> usize {
        self.input_width() / self.o
    }

    pub fn code_bit(&self, class: usize, j: usize) -> bool {
        (self.codes[class][j / 64] >> (j % 64)) & 1 == 1
    }

    pub fn code(&self, class: usize) -> Vec<bool> {
        (0..self.o).map(|j| self.code_bit(class, j)).collect()
    }

    pub fn packed_code(&self, class: usize) -> &[u64] {
        &self.codes[class]
    }

    /// Class whose code is nearest in Hamming distance; lowest index on ties.
    pub fn predict(&self, bits: &[bool]) -> Result<usize> {
        Error::check_dim("code length", self.o, bits.len())?;
        Ok(self.predict_packed(&pack(bits)))
    }

    pub fn predict_packed(&self, words: &[u64]) -> usize {
        let mut best = (u32::MAX, 0);
        for (c, code) in self.codes.iter().enumerate() {
            let d: u32 = code.iter().zip(words).map(|(a, b)| (a ^ b).count_ones()).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    /// Relaxed decision: nearest code in L1 distance over the reduced outputs.
    pub fn predict_relaxed(&self, out: &[f64]) -> Result<usize> {
        let r = self.reduce(out)?;
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.classes() {
            let d: f64 = r
                .iter()
                .enumerate()
                .map(|(j, &v)| if self.code_bit(c, j) { 1.0 - v } else { v })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        Ok(best.1)
    }

    fn reduce(&self, out: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("codebook input", self.input_width(), out.len())?;
        let g = self.segment_size();
        Ok(out
            .chunks_exact(g)
            .map(|seg| seg.iter().sum::<f64>() / g as f64)
            .collect())
    }

    /// Per-bit binary cross-entropy between the (reduced, clamped) relaxed
    /// outputs and the class code, averaged over bits and divided by `tau`.
    pub fn train_loss(&self, out: &[f64], class: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
        check_label(class, self.classes())?;
        let r = self.reduce(out)?;
        let g = self.segment_size();
        let norm = 1.0 / (self.o as f64 * tau);
        let mut loss = 0.0;
        let mut grad = vec![0.0; out.len()];
        for (j, &v) in r.iter().enumerate() {
            let t = if self.code_bit(class, j) { 1.0 } else { 0.0 };
            let (l, d) = bce(v, t);
            loss += l;
            grad[j * g..(j + 1) * g].fill(d * norm / g as f64);
        }
        Ok((loss * norm, grad))
    }

    pub fn scaled_train_loss(&self, out: &Matrix, labels: &[u32], tau: f64, scale: f64) -> Result<(f64, Matrix)> {
        Error::check_dim("labels", out.cols(), labels.len())?;
        Error::check_dim("codebook input rows", self.input_width(), out.rows())?;
        let mut grad = Matrix::zeros(out.rows(), out.cols());
        let mut total = 0.0;
        for (s, &label) in labels.iter().enumerate() {
            let (l, g) = self.train_loss(&out.column(s), label as usize, tau)?;
            total += l;
            for (j, v) in g.into_iter().enumerate() {
                grad.set(j, s, v * scale);
            }
        }
        Ok((total * scale, grad))
    }
}

/// Complete output-layer strategy used for training and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    GroupSum(GroupSumHead),
    /// Group-Sum partition trained with per-neuron binary targets.
    BinaryLogit(GroupSumHead),
    Codebook { codebook: Codebook, tau: f64 },
}

impl Head {
    pub fn classes(&self) -> usize {
        match self {
            Head::GroupSum(h) | Head::BinaryLogit(h) => h.classes(),
            Head::Codebook { codebook, .. } => codebook.classes(),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Head::GroupSum(h) | Head::BinaryLogit(h) => h.outputs(),
            Head::Codebook { codebook, .. } => codebook.input_width(),
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Head::GroupSum(h) | Head::BinaryLogit(h) => h.tau(),
            Head::Codebook { tau, .. } => *tau,
        }
    }

    pub fn scaled_loss_and_grad(&self, out: &Matrix, labels: &[u32], scale: f64) -> Result<(f64, Matrix)> {
        match self {
            Head::GroupSum(h) => h.scaled_loss_and_grad(out, labels, scale),
            Head::BinaryLogit(h) => h.scaled_binary_logit_loss(out, labels, scale),
            Head::Codebook { codebook, tau } => codebook.scaled_train_loss(out, labels, *tau, scale),
        }
    }

    /// Relaxed-mode class decision for one sample's outputs.
    pub fn predict_relaxed(&self, out: &[f64]) -> Result<usize> {
        match self {
            Head::GroupSum(h) | Head::BinaryLogit(h) => Ok(argmax(&h.logits(out)?)),
            Head::Codebook { codebook, .. } => codebook.predict_relaxed(out),
        }
    }

    /// Discrete-mode class decision from binary outputs: segment popcount
    /// argmax for Group-Sum, segment-majority then Hamming decode for codebooks.
    pub fn predict_discrete(&self, bits: &[bool]) -> Result<usize> {
        Error::check_dim("head input", self.input_width(), bits.len())?;
        let seg = self.segments();
        let mut counts = vec![0u32; seg.count];
        for (j, &b) in bits.iter().enumerate() {
            counts[j / seg.size] += b as u32;
        }
        Ok(self.decide_counts(&counts, &vec![seg.size as u32; seg.count]))
    }

    /// How discrete outputs are grouped before the decision rule.
    pub fn segments(&self) -> Segments {
        match self {
            Head::GroupSum(h) | Head::BinaryLogit(h) => Segments {
                count: h.classes(),
                size: h.group_size(),
            },
            Head::Codebook { codebook, .. } => Segments {
                count: codebook.code_len(),
                size: codebook.segment_size(),
            },
        }
    }

    /// Decision from per-segment popcounts; `sizes` holds how many live
    /// neurons each segment has (fewer than the full size after pruning).
    pub fn decide_counts(&self, counts: &[u32], sizes: &[u32]) -> usize {
        match self {
            Head::GroupSum(_) | Head::BinaryLogit(_) => {
                let mut best = 0;
                for (c, &v) in counts.iter().enumerate() {
                    if v > counts[best] {
                        best = c;
                    }
                }
                best
            }
            Head::Codebook { codebook, .. } => {
                let bits: Vec<bool> = counts
                    .iter()
                    .zip(sizes)
                    .map(|(&c, &s)| 2 * c > s)
                    .collect();
                codebook.predict_packed(&pack(&bits))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub count: usize,
    pub size: usize,
}
