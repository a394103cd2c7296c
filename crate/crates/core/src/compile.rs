//! Hardened Boolean circuits: argmax gate selection, word-parallel
//! evaluation, output-neuron pruning with dead-gate elimination, and the
//! text netlist format.
//!
//! Netlist grammar (one statement per line, `#` starts a comment):
//!
//! ```text
//! inputs <n>                      input width
//! outputs <n>                     output width of the source network
//! source <hash>                   provenance, optional
//! g<k> = <OP>(<src>, <src>)       <src> is i<n> or g<n>; gates in layer-major order
//! output g<k> [slot <s>]          kept output; slot defaults to its final-layer position
//! pruned g<k> [slot <s>]          final-layer gate excluded from prediction
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gates::GateKind;
use crate::heads::{GroupSumHead, Head};
use crate::network::{argmax_gate, LogicNetwork};

/// Word columns evaluated together by one task in [`eval_packed`].
const BLOCK_WORDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitLayer {
    pub gates: Vec<GateKind>,
    pub in_a: Vec<u32>,
    pub in_b: Vec<u32>,
}

impl CircuitLayer {
    pub fn width(&self) -> usize {
        self.gates.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteCircuit {
    pub input_dim: usize,
    pub layers: Vec<CircuitLayer>,
    /// Per final-layer gate: whether it takes part in prediction.
    pub kept_outputs: Vec<bool>,
    /// Per final-layer gate: its index in the source network's output layer.
    pub output_origin: Vec<u32>,
    /// Output width of the source network (fixes the head's segment layout).
    pub original_outputs: usize,
    pub source: String,
}

impl DiscreteCircuit {
    pub fn num_gates(&self) -> usize {
        self.layers.iter().map(CircuitLayer::width).sum()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, CircuitLayer::width)
    }

    pub fn kept_count(&self) -> usize {
        self.kept_outputs.iter().filter(|&&k| k).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.in_a.len() != layer.width() || layer.in_b.len() != layer.width() {
                return Err(Error::config(format!("circuit layer {li} has ragged wiring")));
            }
            if layer.in_a.iter().chain(&layer.in_b).any(|&i| i as usize >= prev) {
                return Err(Error::config(format!("circuit layer {li} references a missing source")));
            }
            prev = layer.width();
        }
        Error::check_dim("kept output mask", self.output_width(), self.kept_outputs.len())?;
        Error::check_dim("output origins", self.output_width(), self.output_origin.len())?;
        if self.output_origin.iter().any(|&o| o as usize >= self.original_outputs) {
            return Err(Error::config("output origin beyond the source output width"));
        }
        Ok(())
    }

    /// Scalar reference evaluation of one sample; returns every final-layer bit.
    pub fn eval_scalar(&self, x: &[bool]) -> Result<Vec<bool>> {
        Error::check_dim("sample length", self.input_dim, x.len())?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = (0..layer.width())
                .map(|j| {
                    layer.gates[j].bool_eval(cur[layer.in_a[j] as usize], cur[layer.in_b[j] as usize])
                })
                .collect();
        }
        Ok(cur)
    }
}

/// Per-neuron argmax gate (lowest id on ties); wiring copied; all outputs kept.
pub fn harden(net: &LogicNetwork) -> DiscreteCircuit {
    let layers = net
        .layers()
        .iter()
        .map(|l| CircuitLayer {
            gates: l.logits().iter().map(argmax_gate).collect(),
            in_a: l.in_a.clone(),
            in_b: l.in_b.clone(),
        })
        .collect();
    let n = net.output_width();
    DiscreteCircuit {
        input_dim: net.input_dim(),
        layers,
        kept_outputs: vec![true; n],
        output_origin: (0..n as u32).collect(),
        original_outputs: n,
        source: crate::checkpoint::fingerprint(net),
    }
}

/// Feature-major bit-sliced batch: lane `l` of feature `f` lives at bit
/// `l % 64` of word `f * words_per_feature + l / 64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    features: usize,
    lanes: usize,
    words_per_feature: usize,
    words: Vec<u64>,
}

impl PackedBatch {
    pub fn zeros(features: usize, lanes: usize) -> Self {
        let wpf = lanes.div_ceil(64);
        Self {
            features,
            lanes,
            words_per_feature: wpf,
            words: vec![0; features * wpf],
        }
    }

    /// Packs sample-major boolean rows.
    pub fn from_samples(samples: &[Vec<bool>]) -> Result<Self> {
        let features = samples.first().map_or(0, Vec::len);
        let mut b = Self::zeros(features, samples.len());
        for (lane, s) in samples.iter().enumerate() {
            Error::check_dim("sample length", features, s.len())?;
            for (f, &bit) in s.iter().enumerate() {
                if bit {
                    b.words[f * b.words_per_feature + lane / 64] |= 1 << (lane % 64);
                }
            }
        }
        Ok(b)
    }

    /// Packs the binary features of the given dataset samples.
    pub fn from_dataset(ds: &BinaryDataset, indices: &[u32]) -> Self {
        let mut b = Self::zeros(ds.dim(), indices.len());
        let wpf = b.words_per_feature;
        for (lane, &i) in indices.iter().enumerate() {
            let bit = 1u64 << (lane % 64);
            for (w, &word) in ds.bits.row_words(i as usize).iter().enumerate() {
                let mut word = word;
                while word != 0 {
                    let f = w * 64 + word.trailing_zeros() as usize;
                    b.words[f * wpf + lane / 64] |= bit;
                    word &= word - 1;
                }
            }
        }
        b
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn words_per_feature(&self) -> usize {
        self.words_per_feature
    }

    pub fn feature_words(&self, f: usize) -> &[u64] {
        &self.words[f * self.words_per_feature..(f + 1) * self.words_per_feature]
    }

    pub fn get(&self, feature: usize, lane: usize) -> bool {
        (self.words[feature * self.words_per_feature + lane / 64] >> (lane % 64)) & 1 == 1
    }

    /// Sample-major unpacking.
    pub fn to_samples(&self) -> Vec<Vec<bool>> {
        (0..self.lanes)
            .map(|l| (0..self.features).map(|f| self.get(f, l)).collect())
            .collect()
    }

    fn tail_mask(&self) -> u64 {
        match self.lanes % 64 {
            0 => !0,
            r => (1u64 << r) - 1,
        }
    }
}

fn eval_block(circ: &DiscreteCircuit, batch: &PackedBatch, w0: usize, w1: usize) -> Vec<u64> {
    let cols = w1 - w0;
    let wpf = batch.words_per_feature;
    let mut prev: Vec<u64> = Vec::with_capacity(batch.features * cols);
    for f in 0..batch.features {
        prev.extend_from_slice(&batch.words[f * wpf + w0..f * wpf + w1]);
    }
    for layer in &circ.layers {
        let mut cur = vec![0u64; layer.width() * cols];
        for (j, out) in cur.chunks_exact_mut(cols).enumerate() {
            let g = layer.gates[j];
            let a = &prev[layer.in_a[j] as usize * cols..][..cols];
            let b = &prev[layer.in_b[j] as usize * cols..][..cols];
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = g.eval_word(x, y);
            }
        }
        prev = cur;
    }
    prev
}

/// Evaluates every gate on 64 lanes per machine word. Returns all
/// final-layer outputs (kept or not); padding lanes are zero.
pub fn eval_packed(circ: &DiscreteCircuit, batch: &PackedBatch, exec: Exec) -> Result<PackedBatch> {
    Error::check_dim("batch features", circ.input_dim, batch.features)?;
    let wpf = batch.words_per_feature;
    let n_blocks = wpf.div_ceil(BLOCK_WORDS);
    let blocks = exec.map_range(n_blocks, |bi| {
        let w0 = bi * BLOCK_WORDS;
        eval_block(circ, batch, w0, (w0 + BLOCK_WORDS).min(wpf))
    });
    let width = circ.output_width();
    let mut out = PackedBatch::zeros(width, batch.lanes);
    for (bi, block) in blocks.iter().enumerate() {
        let w0 = bi * BLOCK_WORDS;
        let cols = (w0 + BLOCK_WORDS).min(wpf) - w0;
        for j in 0..width {
            out.words[j * wpf + w0..j * wpf + w0 + cols].copy_from_slice(&block[j * cols..(j + 1) * cols]);
        }
    }
    if wpf > 0 {
        let mask = out.tail_mask();
        for j in 0..width {
            out.words[j * wpf + wpf - 1] &= mask;
        }
    }
    Ok(out)
}

/// Per-sample class decisions from a circuit's kept outputs.
pub fn predict_packed(circ: &DiscreteCircuit, head: &Head, batch: &PackedBatch, exec: Exec) -> Result<Vec<usize>> {
    Error::check_dim("head input width", head.input_width(), circ.original_outputs)?;
    let outputs = eval_packed(circ, batch, exec)?;
    let seg = head.segments();
    let segment_of: Vec<Option<usize>> = circ
        .kept_outputs
        .iter()
        .zip(&circ.output_origin)
        .map(|(&k, &o)| k.then_some(o as usize / seg.size))
        .collect();
    let mut sizes = vec![0u32; seg.count];
    for s in segment_of.iter().flatten() {
        sizes[*s] += 1;
    }

    let lanes = batch.lanes;
    let wpf = outputs.words_per_feature;
    let preds_per_word = exec.map_range(wpf, |w| {
        let lanes_here = (lanes - w * 64).min(64);
        let mut counts = vec![0u32; 64 * seg.count];
        for (j, s) in segment_of.iter().enumerate() {
            if let Some(s) = *s {
                let mut word = outputs.words[j * wpf + w];
                while word != 0 {
                    let lane = word.trailing_zeros() as usize;
                    counts[lane * seg.count + s] += 1;
                    word &= word - 1;
                }
            }
        }
        (0..lanes_here)
            .map(|l| head.decide_counts(&counts[l * seg.count..(l + 1) * seg.count], &sizes))
            .collect::<Vec<_>>()
    });
    Ok(preds_per_word.concat())
}

/// Discrete accuracy (percent) of a circuit on dataset samples.
pub fn circuit_accuracy(circ: &DiscreteCircuit, head: &Head, ds: &BinaryDataset, indices: &[u32], exec: Exec) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let batch = PackedBatch::from_dataset(ds, indices);
    let preds = predict_packed(circ, head, &batch, exec)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == ds.labels[i as usize] as usize)
        .count();
    Ok(100.0 * correct as f64 / indices.len() as f64)
}

/// Keeps `keep_per_class` uniformly chosen outputs in every class segment
/// and clears the rest. With the same RNG state, smaller keep counts select
/// subsets of larger ones.
pub fn prune_outputs<R: Rng + ?Sized>(
    circ: &DiscreteCircuit,
    keep_per_class: usize,
    head: &GroupSumHead,
    rng: &mut R,
) -> Result<DiscreteCircuit> {
    if keep_per_class == 0 {
        return Err(Error::config("at least one output neuron per class must be kept"));
    }
    if keep_per_class > head.group_size() {
        return Err(Error::config(format!(
            "cannot keep {keep_per_class} of {} neurons per class",
            head.group_size()
        )));
    }
    Error::check_dim("head outputs", head.outputs(), circ.original_outputs)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); head.classes()];
    for (j, &o) in circ.output_origin.iter().enumerate() {
        members[head.class_of(o as usize)].push(j);
    }
    let mut kept = vec![false; circ.output_width()];
    for m in &mut members {
        m.shuffle(rng);
        for &j in m.iter().take(keep_per_class) {
            kept[j] = true;
        }
    }
    Ok(DiscreteCircuit {
        kept_outputs: kept,
        ..circ.clone()
    })
}

/// Removes every gate no kept output depends on and compacts indices. The
/// final layer keeps only kept outputs. Returns the fraction of gates removed.
pub fn reachability_eliminate(circ: &DiscreteCircuit) -> (DiscreteCircuit, f64) {
    let total = circ.num_gates();
    let depth = circ.layers.len();
    let mut live: Vec<Vec<bool>> = circ.layers.iter().map(|l| vec![false; l.width()]).collect();
    if let Some(last) = live.last_mut() {
        last.copy_from_slice(&circ.kept_outputs);
    }
    for li in (1..depth).rev() {
        let (below, above) = live.split_at_mut(li);
        let layer = &circ.layers[li];
        for (j, &alive) in above[0].iter().enumerate() {
            if alive {
                below[li - 1][layer.in_a[j] as usize] = true;
                below[li - 1][layer.in_b[j] as usize] = true;
            }
        }
    }

    let mut layers = Vec::with_capacity(depth);
    let mut remap_prev: Option<Vec<u32>> = None;
    for (li, layer) in circ.layers.iter().enumerate() {
        let mut remap = vec![u32::MAX; layer.width()];
        let mut out = CircuitLayer {
            gates: Vec::new(),
            in_a: Vec::new(),
            in_b: Vec::new(),
        };
        for j in 0..layer.width() {
            if !live[li][j] {
                continue;
            }
            remap[j] = out.gates.len() as u32;
            let map = |i: u32| remap_prev.as_ref().map_or(i, |m| m[i as usize]);
            out.gates.push(layer.gates[j]);
            out.in_a.push(map(layer.in_a[j]));
            out.in_b.push(map(layer.in_b[j]));
        }
        layers.push(out);
        remap_prev = Some(remap);
    }
    let output_origin: Vec<u32> = circ
        .output_origin
        .iter()
        .zip(&circ.kept_outputs)
        .filter_map(|(&o, &k)| k.then_some(o))
        .collect();
    let compact = DiscreteCircuit {
        input_dim: circ.input_dim,
        kept_outputs: vec![true; output_origin.len()],
        output_origin,
        layers,
        original_outputs: circ.original_outputs,
        source: circ.source.clone(),
    };
    let removed = total - compact.num_gates();
    let fraction = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    (compact, fraction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePoint {
    pub kept_per_class: usize,
    pub accuracy: f64,
    pub pruned_fraction: f64,
}

/// Accuracy and network-wide prune fraction for each keep count, using one
/// nested sequence of keep-sets drawn from `seed`.
pub fn pruning_curve(
    circ: &DiscreteCircuit,
    head: &GroupSumHead,
    ds: &BinaryDataset,
    indices: &[u32],
    keeps: &[usize],
    seed: u64,
    exec: Exec,
) -> Result<Vec<PrunePoint>> {
    use rand::SeedableRng;
    let as_head = Head::GroupSum(*head);
    keeps
        .iter()
        .map(|&keep| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pruned = prune_outputs(circ, keep, head, &mut rng)?;
            let (compact, fraction) = reachability_eliminate(&pruned);
            Ok(PrunePoint {
                kept_per_class: keep,
                accuracy: circuit_accuracy(&compact, &as_head, ds, indices, exec)?,
                pruned_fraction: fraction,
            })
        })
        .collect()
}

fn src_name(li: usize, idx: u32, offsets: &[usize]) -> String {
    if li == 0 {
        format!("i{idx}")
    } else {
        format!("g{}", offsets[li - 1] + idx as usize)
    }
}

pub fn netlist_to_string(circ: &DiscreteCircuit) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# logic gate netlist");
    let _ = writeln!(s, "inputs {}", circ.input_dim);
    let _ = writeln!(s, "outputs {}", circ.original_outputs);
    if !circ.source.is_empty() {
        let _ = writeln!(s, "source {}", circ.source);
    }
    let mut offsets = Vec::with_capacity(circ.layers.len());
    let mut acc = 0;
    for l in &circ.layers {
        offsets.push(acc);
        acc += l.width();
    }
    for (li, layer) in circ.layers.iter().enumerate() {
        for j in 0..layer.width() {
            let _ = writeln!(
                s,
                "g{} = {}({}, {})",
                offsets[li] + j,
                layer.gates[j],
                src_name(li, layer.in_a[j], &offsets),
                src_name(li, layer.in_b[j], &offsets),
            );
        }
    }
    let last = offsets.last().copied().unwrap_or(0);
    for (j, (&kept, &origin)) in circ.kept_outputs.iter().zip(&circ.output_origin).enumerate() {
        let kw = if kept { "output" } else { "pruned" };
        if origin as usize == j {
            let _ = writeln!(s, "{kw} g{}", last + j);
        } else {
            let _ = writeln!(s, "{kw} g{} slot {origin}", last + j);
        }
    }
    s
}

pub fn export_netlist(circ: &DiscreteCircuit, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, netlist_to_string(circ))?;
    Ok(())
}

pub fn import_netlist(path: impl AsRef<Path>) -> Result<DiscreteCircuit> {
    parse_netlist(&fs::read_to_string(path)?)
}

enum Src {
    Input(u32),
    Gate(usize),
}

fn parse_src(tok: &str, line: usize) -> Result<Src> {
    let tok = tok.trim();
    let bad = || Error::Parse(format!("line {line}: bad source `{tok}`"));
    if let Some(n) = tok.strip_prefix('i') {
        n.parse().map(Src::Input).map_err(|_| bad())
    } else if let Some(n) = tok.strip_prefix('g') {
        n.parse().map(Src::Gate).map_err(|_| bad())
    } else {
        Err(bad())
    }
}

fn parse_gate_ref(tok: &str, line: usize) -> Result<usize> {
    tok.strip_prefix('g')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Parse(format!("line {line}: expected gate name, got `{tok}`")))
}

pub fn parse_netlist(text: &str) -> Result<DiscreteCircuit> {
    let mut input_dim = None;
    let mut original_outputs = None;
    let mut source = String::new();
    // (gate, a, b) in file order
    let mut gates: Vec<(GateKind, Src, Src)> = Vec::new();
    let mut marks: Vec<(usize, bool, Option<u32>)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or_default();
        match head {
            "inputs" | "outputs" => {
                let v: usize = words
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("line {ln}: `{head}` needs a count")))?;
                if head == "inputs" {
                    input_dim = Some(v);
                } else {
                    original_outputs = Some(v);
                }
            }
            "source" => source = words.collect::<Vec<_>>().join(" "),
            "output" | "pruned" => {
                let g = parse_gate_ref(words.next().unwrap_or_default(), ln)?;
                let slot = match (words.next(), words.next()) {
                    (None, _) => None,
                    (Some("slot"), Some(v)) => Some(
                        v.parse()
                            .map_err(|_| Error::Parse(format!("line {ln}: bad slot `{v}`")))?,
                    ),
                    _ => return Err(Error::Parse(format!("line {ln}: malformed `{head}` line"))),
                };
                marks.push((g, head == "output", slot));
            }
            _ => {
                let (lhs, rhs) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("line {ln}: unrecognised statement")))?;
                let idx = parse_gate_ref(lhs.trim(), ln)?;
                if idx != gates.len() {
                    return Err(Error::Parse(format!(
                        "line {ln}: gate g{idx} out of order (expected g{})",
                        gates.len()
                    )));
                }
                let rhs = rhs.trim();
                let (op, args) = rhs
                    .strip_suffix(')')
                    .and_then(|r| r.split_once('('))
                    .ok_or_else(|| Error::Parse(format!("line {ln}: expected OP(a, b)")))?;
                let gate: GateKind = op.trim().parse()?;
                let (a, b) = args
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("line {ln}: expected two operands")))?;
                gates.push((gate, parse_src(a, ln)?, parse_src(b, ln)?));
            }
        }
    }

    let input_dim = input_dim.ok_or_else(|| Error::Parse("missing `inputs` line".into()))?;
    let mut depth = vec![0usize; gates.len()];
    let mut layer_pos = vec![0usize; gates.len()];
    let mut layers: Vec<CircuitLayer> = Vec::new();
    for (g, (kind, a, b)) in gates.iter().enumerate() {
        let src_depth = |s: &Src| -> Result<(usize, u32)> {
            match *s {
                Src::Input(i) if (i as usize) < input_dim => Ok((0, i)),
                Src::Gate(k) if k < g => Ok((depth[k], layer_pos[k] as u32)),
                _ => Err(Error::Parse(format!("g{g} references an undefined source"))),
            }
        };
        let (da, ia) = src_depth(a)?;
        let (db, ib) = src_depth(b)?;
        if da != db {
            return Err(Error::Parse(format!("g{g} mixes sources from different layers")));
        }
        let d = da + 1;
        if d < layers.len() {
            return Err(Error::Parse(format!("g{g} is not in layer-major order")));
        }
        if d > layers.len() {
            if d != layers.len() + 1 {
                return Err(Error::Parse(format!("g{g} skips a layer")));
            }
            layers.push(CircuitLayer {
                gates: Vec::new(),
                in_a: Vec::new(),
                in_b: Vec::new(),
            });
        }
        let layer = layers.last_mut().expect("pushed above");
        depth[g] = d;
        layer_pos[g] = layer.width();
        layer.gates.push(*kind);
        layer.in_a.push(ia);
        layer.in_b.push(ib);
    }

    let width = layers.last().map_or(0, CircuitLayer::width);
    let first_out = gates.len() - width;
    let mut kept = vec![false; width];
    let mut origin: Vec<u32> = (0..width as u32).collect();
    let mut pos_of = HashMap::new();
    for (g, is_out, slot) in marks {
        if g < first_out || g >= gates.len() {
            return Err(Error::Parse(format!("g{g} is not in the final layer")));
        }
        let j = g - first_out;
        if pos_of.insert(j, ()).is_some() {
            return Err(Error::Parse(format!("g{g} marked twice")));
        }
        kept[j] = is_out;
        if let Some(s) = slot {
            origin[j] = s;
        }
    }
    let circ = DiscreteCircuit {
        input_dim,
        layers,
        kept_outputs: kept,
        output_origin: origin,
        original_outputs: original_outputs.unwrap_or(width),
        source,
    };
    circ.validate()?;
    Ok(circ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_samples(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<Vec<bool>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect()
    }

    #[test]
    fn harden_picks_argmax() {
        let mut net = LogicNetwork::build(4, &[3], 1).unwrap();
        net.set_gate(0, 1, GateKind::Xnor);
        let c = harden(&net);
        assert_eq!(c.layers[0].gates[1], GateKind::Xnor);
        assert_eq!(c, harden(&net));
        assert_eq!(c.kept_count(), 3);
    }

    #[test]
    fn constant_false_and_identity_chains() {
        let layer = |g| CircuitLayer {
            gates: vec![g; 2],
            in_a: vec![0, 1],
            in_b: vec![1, 0],
        };
        let mk = |g| DiscreteCircuit {
            input_dim: 2,
            layers: vec![layer(g), layer(g), layer(g)],
            kept_outputs: vec![true; 2],
            output_origin: vec![0, 1],
            original_outputs: 2,
            source: String::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = random_samples(&mut rng, 2, 100);
        let batch = PackedBatch::from_samples(&xs).unwrap();

        let out = eval_packed(&mk(GateKind::False), &batch, Exec::Sequential).unwrap();
        assert!(out.words.iter().all(|&w| w == 0));

        let out = eval_packed(&mk(GateKind::A), &batch, Exec::Sequential).unwrap();
        assert_eq!(out.feature_words(0), batch.feature_words(0));
        assert_eq!(out.feature_words(1), batch.feature_words(1));

        // padding lanes stay clear even for TRUE
        let out = eval_packed(&mk(GateKind::True), &batch, Exec::Sequential).unwrap();
        assert_eq!(out.feature_words(0)[1].count_ones(), 36);
    }

    #[test]
    fn packed_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = LogicNetwork::build(20, &[30, 30, 12], 2).unwrap();
        let c = harden(&net);
        let xs = random_samples(&mut rng, 20, 200);
        let out = eval_packed(&c, &PackedBatch::from_samples(&xs).unwrap(), Exec::Parallel).unwrap();
        let got = out.to_samples();
        for (x, g) in xs.iter().zip(&got) {
            assert_eq!(&c.eval_scalar(x).unwrap(), g);
        }
        assert_eq!(net.forward_discrete(&xs).unwrap(), got);
    }

    #[test]
    fn prune_and_eliminate_preserve_kept_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = LogicNetwork::build(16, &[40, 40, 40], 4).unwrap();
        let c = harden(&net);
        let head = GroupSumHead::new(40, 4, 1.0).unwrap();
        let pruned = prune_outputs(&c, 3, &head, &mut rng).unwrap();
        assert_eq!(pruned.kept_count(), 12);
        let (small, frac) = reachability_eliminate(&pruned);
        assert!(frac > 0.0 && frac < 1.0);
        small.validate().unwrap();
        let xs = random_samples(&mut rng, 16, 64);
        for x in &xs {
            let full = c.eval_scalar(x).unwrap();
            let reduced = small.eval_scalar(x).unwrap();
            for (j, &o) in small.output_origin.iter().enumerate() {
                assert_eq!(reduced[j], full[o as usize]);
            }
        }
        assert!(prune_outputs(&c, 0, &head, &mut rng).is_err());
        assert!(prune_outputs(&c, 11, &head, &mut rng).is_err());
    }

    #[test]
    fn single_output_fan_in_bound() {
        let net = LogicNetwork::build(64, &[50, 50, 50, 50], 8).unwrap();
        let mut c = harden(&net);
        c.kept_outputs = vec![false; 50];
        c.kept_outputs[7] = true;
        let (small, _) = reachability_eliminate(&c);
        for (li, layer) in small.layers.iter().enumerate() {
            // layer li of L is at most 2^(L-1-li) gates wide
            assert!(layer.width() <= 1 << (small.layers.len() - 1 - li));
        }
        assert!(small.num_gates() < 1 << 4);
    }

    #[test]
    fn nested_keep_sets() {
        let net = LogicNetwork::build(16, &[20, 20], 3).unwrap();
        let c = harden(&net);
        let head = GroupSumHead::new(20, 2, 1.0).unwrap();
        let mut last_frac = -1.0;
        let mut prev_kept: Option<Vec<bool>> = None;
        for keep in (1..=10).rev() {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let p = prune_outputs(&c, keep, &head, &mut rng).unwrap();
            if let Some(prev) = &prev_kept {
                assert!(p.kept_outputs.iter().zip(prev).all(|(&now, &before)| !now || before));
            }
            let (_, frac) = reachability_eliminate(&p);
            assert!(frac >= last_frac);
            last_frac = frac;
            prev_kept = Some(p.kept_outputs);
        }
    }

    #[test]
    fn netlist_single_and() {
        let c = DiscreteCircuit {
            input_dim: 2,
            layers: vec![CircuitLayer {
                gates: vec![GateKind::And],
                in_a: vec![0],
                in_b: vec![1],
            }],
            kept_outputs: vec![true],
            output_origin: vec![0],
            original_outputs: 1,
            source: String::new(),
        };
        let text = netlist_to_string(&c);
        assert!(text.contains("g0 = AND(i0, i1)\n"));
        assert!(text.contains("output g0\n"));
        assert_eq!(parse_netlist(&text).unwrap(), c);
    }

    #[test]
    fn netlist_round_trip_after_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = LogicNetwork::build(10, &[12, 12, 8], 6).unwrap();
        let c = harden(&net);
        assert_eq!(parse_netlist(&netlist_to_string(&c)).unwrap(), c);
        let head = GroupSumHead::new(8, 2, 1.0).unwrap();
        let pruned = prune_outputs(&c, 2, &head, &mut rng).unwrap();
        assert_eq!(parse_netlist(&netlist_to_string(&pruned)).unwrap(), pruned);
        let (small, _) = reachability_eliminate(&pruned);
        assert_eq!(parse_netlist(&netlist_to_string(&small)).unwrap(), small);
    }

    #[test]
    fn netlist_rejects_garbage() {
        assert!(parse_netlist("g0 = AND(i0, i1)").is_err()); // no inputs line
        assert!(parse_netlist("inputs 2\ng0 = MUX(i0, i1)").is_err());
        assert!(parse_netlist("inputs 2\ng0 = AND(i0, i5)").is_err());
        assert!(parse_netlist("inputs 2\ng1 = AND(i0, i1)").is_err());
        assert!(parse_netlist("inputs 2\ng0 = AND(i0, i1)\ng1 = OR(g0, i1)").is_err());
        assert!(parse_netlist("inputs 2\ng0 = AND(i0, i1)\noutput g3").is_err());
    }

    #[test]
    fn group_sum_prediction_from_packed_outputs() {
        let net = LogicNetwork::build(12, &[24, 12], 2).unwrap();
        let c = harden(&net);
        let head = Head::GroupSum(GroupSumHead::new(12, 3, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = random_samples(&mut rng, 12, 130);
        let preds = predict_packed(&c, &head, &PackedBatch::from_samples(&xs).unwrap(), Exec::Sequential).unwrap();
        for (x, &p) in xs.iter().zip(&preds) {
            assert_eq!(head.predict_discrete(&c.eval_scalar(x).unwrap()).unwrap(), p);
        }
    }
}
