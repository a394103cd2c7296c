//! Randomly wired layers of two-input neurons, each a softmax mixture over
//! the sixteen relaxed gates.
//!
//! A neuron's relaxed output is `sum_i softmax(w)_i * f_i(a, b)`. Because every
//! `f_i` is multilinear, the mixture collapses to four coefficients
//! `c + c_a a + c_b b + c_ab ab`; the forward and backward kernels work on those
//! coefficients and the logit gradient is recovered through the softmax
//! Jacobian afterwards.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gates::{GateKind, NUM_GATES};
use crate::matrix::Matrix;

/// Logit value used for the non-selected gates of a one-hot neuron. Its
/// exponential underflows to exactly zero in `f64`.
const ONE_HOT_OFF: f32 = -1.0e4;

pub type Logits = [f32; NUM_GATES];

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) in_a: Vec<u32>,
    pub(crate) in_b: Vec<u32>,
    pub(crate) logits: Vec<Logits>,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.logits.len()
    }

    pub fn inputs(&self, neuron: usize) -> (usize, usize) {
        (self.in_a[neuron] as usize, self.in_b[neuron] as usize)
    }

    pub fn logits(&self) -> &[Logits] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Logits] {
        &mut self.logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicNetwork {
    pub(crate) input_dim: usize,
    pub(crate) seed: u64,
    pub(crate) layers: Vec<Layer>,
}

/// Per-neuron mixture coefficients `[c, c_a, c_b, c_ab]`, one vector per layer.
#[derive(Debug, Clone)]
pub struct Mixture {
    layers: Vec<Vec<[f64; 4]>>,
}

/// Every layer's relaxed output for one batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub layers: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.layers.last().expect("network has at least one layer")
    }
}

/// Gradients of a scalar loss with respect to `[c, c_a, c_b, c_ab]` of every
/// neuron. Summing these across batch shards and converting once is cheaper
/// than reducing sixteen logit gradients per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientGrads {
    pub layers: Vec<Vec<[f64; 4]>>,
}

impl CoefficientGrads {
    pub fn zeros_like(net: &LogicNetwork) -> Self {
        Self {
            layers: net.layers.iter().map(|l| vec![[0.0; 4]; l.width()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &CoefficientGrads) {
        for (la, lb) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in la.iter_mut().zip(lb) {
                for k in 0..4 {
                    a[k] += b[k];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `d loss / d w` for every neuron's sixteen logits.
    pub logits: Vec<Vec<[f64; NUM_GATES]>>,
    /// `d loss / d x`, feature-major like the input batch.
    pub input: Matrix,
}

pub fn softmax16(logits: &Logits) -> [f64; NUM_GATES] {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut p = [0.0; NUM_GATES];
    let mut sum = 0.0;
    for (pi, &w) in p.iter_mut().zip(logits) {
        *pi = (w as f64 - max).exp();
        sum += *pi;
    }
    for pi in &mut p {
        *pi /= sum;
    }
    p
}

/// Highest-logit gate; the lowest id wins ties.
pub fn argmax_gate(logits: &Logits) -> GateKind {
    let mut best = 0;
    for i in 1..NUM_GATES {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    GateKind::ALL[best]
}

pub fn one_hot_logits(gate: GateKind) -> Logits {
    let mut w = [ONE_HOT_OFF; NUM_GATES];
    w[gate as usize] = 0.0;
    w
}

fn gate_coefficient_table() -> [[f64; 4]; NUM_GATES] {
    let mut t = [[0.0; 4]; NUM_GATES];
    for g in GateKind::ALL {
        t[g as usize] = g.coefficients();
    }
    t
}

fn mixture_coefficients(p: &[f64; NUM_GATES], table: &[[f64; 4]; NUM_GATES]) -> [f64; 4] {
    let mut c = [0.0; 4];
    for (pi, row) in p.iter().zip(table) {
        for k in 0..4 {
            c[k] += pi * row[k];
        }
    }
    c
}

/// Chain rule from coefficient gradients back to the sixteen logits.
pub fn logit_grad(logits: &Logits, coef_grad: &[f64; 4]) -> [f64; NUM_GATES] {
    let table = gate_coefficient_table();
    let p = softmax16(logits);
    let mut dp = [0.0; NUM_GATES];
    for (d, row) in dp.iter_mut().zip(&table) {
        *d = row[0] * coef_grad[0] + row[1] * coef_grad[1] + row[2] * coef_grad[2] + row[3] * coef_grad[3];
    }
    let mean: f64 = p.iter().zip(&dp).map(|(pi, di)| pi * di).sum();
    let mut out = [0.0; NUM_GATES];
    for i in 0..NUM_GATES {
        out[i] = p[i] * (dp[i] - mean);
    }
    out
}

impl LogicNetwork {
    /// Builds a network with uniformly random wiring and `N(0, 1)` logits.
    ///
    /// Each neuron draws both inputs uniformly from the previous layer; if they
    /// coincide `in_b` is redrawn once.
    pub fn build(input_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if input_dim < 2 {
            return Err(Error::config(format!(
                "input dimension must be at least 2, got {input_dim}"
            )));
        }
        if widths.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("layer {i} has width 0")));
        }
        if let Some(&w) = widths.iter().find(|&&w| w > u32::MAX as usize) {
            return Err(Error::config(format!("layer width {w} exceeds u32 range")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = input_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for &width in widths {
            let mut in_a = Vec::with_capacity(width);
            let mut in_b = Vec::with_capacity(width);
            for _ in 0..width {
                let a = rng.random_range(0..prev);
                let mut b = rng.random_range(0..prev);
                if a == b {
                    b = rng.random_range(0..prev);
                }
                in_a.push(a as u32);
                in_b.push(b as u32);
            }
            let logits = (0..width)
                .map(|_| {
                    let mut w = [0.0f32; NUM_GATES];
                    for v in &mut w {
                        *v = rng.sample::<f64, _>(StandardNormal) as f32;
                    }
                    w
                })
                .collect();
            layers.push(Layer {
                in_a,
                in_b,
                logits,
            });
            prev = width;
        }
        Ok(Self {
            input_dim,
            seed,
            layers,
        })
    }

    /// Assembles a network from explicit parts, validating the wiring.
    pub fn from_parts(input_dim: usize, seed: u64, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_dim,
            seed,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::config("input dimension must be at least 2"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let mut prev = self.input_dim;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = layer.width();
            if w == 0 || layer.in_a.len() != w || layer.in_b.len() != w {
                return Err(Error::config(format!("layer {li} has inconsistent width")));
            }
            if let Some(&bad) = layer
                .in_a
                .iter()
                .chain(&layer.in_b)
                .find(|&&i| i as usize >= prev)
            {
                return Err(Error::config(format!(
                    "layer {li} references input {bad} but previous width is {prev}"
                )));
            }
            prev = w;
        }
        Ok(())
    }

    pub fn new_layer(in_a: Vec<u32>, in_b: Vec<u32>, logits: Vec<Logits>) -> Layer {
        Layer {
            in_a,
            in_b,
            logits,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::width).collect()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::width)
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Layer::width).sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_neurons() * NUM_GATES
    }

    pub fn set_gate(&mut self, layer: usize, neuron: usize, gate: GateKind) {
        self.layers[layer].logits[neuron] = one_hot_logits(gate);
    }

    /// Replaces every neuron's logits with a one-hot vector on its current argmax.
    pub fn make_one_hot(&mut self) {
        for layer in &mut self.layers {
            for w in &mut layer.logits {
                *w = one_hot_logits(argmax_gate(w));
            }
        }
    }

    pub fn mixture(&self) -> Mixture {
        let table = gate_coefficient_table();
        Mixture {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.logits
                        .iter()
                        .map(|w| mixture_coefficients(&softmax16(w), &table))
                        .collect()
                })
                .collect(),
        }
    }

    /// Relaxed forward pass. `x` is feature-major (`input_dim` rows, one column per sample).
    pub fn forward_relaxed(&self, x: &Matrix) -> Result<Trace> {
        self.forward_with(&self.mixture(), x)
    }

    pub fn forward_with(&self, mix: &Mixture, x: &Matrix) -> Result<Trace> {
        Error::check_dim("input rows", self.input_dim, x.rows())?;
        let cols = x.cols();
        let mut outs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = if li == 0 { x } else { &outs[li - 1] };
            let mut out = Matrix::zeros(layer.width(), cols);
            let coef = &mix.layers[li];
            for j in 0..layer.width() {
                let [c, ca, cb, cab] = coef[j];
                let a = prev.row(layer.in_a[j] as usize);
                let b = prev.row(layer.in_b[j] as usize);
                for ((o, &av), &bv) in out.row_mut(j).iter_mut().zip(a).zip(b) {
                    *o = c + ca * av + cb * bv + cab * av * bv;
                }
            }
            outs.push(out);
        }
        Ok(Trace { layers: outs })
    }

    /// Backward pass to coefficient gradients; also returns `d loss / d x`
    /// when `want_input_grad` is set.
    pub fn backward_coefficients(
        &self,
        mix: &Mixture,
        x: &Matrix,
        trace: &Trace,
        grad_out: &Matrix,
        want_input_grad: bool,
    ) -> Result<(CoefficientGrads, Option<Matrix>)> {
        Error::check_dim("input rows", self.input_dim, x.rows())?;
        Error::check_dim("trace layers", self.layers.len(), trace.layers.len())?;
        Error::check_dim("grad_out rows", self.output_width(), grad_out.rows())?;
        Error::check_dim("grad_out cols", x.cols(), grad_out.cols())?;

        let cols = x.cols();
        let mut grads = CoefficientGrads::zeros_like(self);
        let mut g = grad_out.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let prev = if li == 0 { x } else { &trace.layers[li - 1] };
            let need_prev = li > 0 || want_input_grad;
            let mut g_prev = if need_prev {
                Matrix::zeros(prev.rows(), cols)
            } else {
                Matrix::zeros(0, 0)
            };
            for j in 0..layer.width() {
                let (ia, ib) = (layer.in_a[j] as usize, layer.in_b[j] as usize);
                let a = prev.row(ia);
                let b = prev.row(ib);
                let gj = g.row(j);
                let (mut s0, mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0, 0.0);
                for ((&gv, &av), &bv) in gj.iter().zip(a).zip(b) {
                    s0 += gv;
                    sa += gv * av;
                    sb += gv * bv;
                    sab += gv * av * bv;
                }
                grads.layers[li][j] = [s0, sa, sb, sab];

                if need_prev {
                    let [_, ca, cb, cab] = mix.layers[li][j];
                    for ((d, &gv), &bv) in g_prev.row_mut(ia).iter_mut().zip(gj).zip(b) {
                        *d += gv * (ca + cab * bv);
                    }
                    for ((d, &gv), &av) in g_prev.row_mut(ib).iter_mut().zip(gj).zip(a) {
                        *d += gv * (cb + cab * av);
                    }
                }
            }
            g = g_prev;
        }
        Ok((grads, want_input_grad.then_some(g)))
    }

    /// Exact gradients of the loss whose output gradient is `grad_out`.
    pub fn backward(&self, x: &Matrix, trace: &Trace, grad_out: &Matrix) -> Result<Gradients> {
        let mix = self.mixture();
        let (coef, input) = self.backward_coefficients(&mix, x, trace, grad_out, true)?;
        Ok(Gradients {
            logits: self.coefficient_to_logit_grads(&coef),
            input: input.expect("input gradient requested"),
        })
    }

    pub fn coefficient_to_logit_grads(&self, coef: &CoefficientGrads) -> Vec<Vec<[f64; NUM_GATES]>> {
        self.layers
            .iter()
            .zip(&coef.layers)
            .map(|(l, gl)| l.logits.iter().zip(gl).map(|(w, g)| logit_grad(w, g)).collect())
            .collect()
    }

    /// Same as [`Self::coefficient_to_logit_grads`] but flattened in parameter order.
    pub fn flat_logit_grads(&self, coef: &CoefficientGrads, exec: Exec) -> Vec<f32> {
        let per_layer: Vec<Vec<f32>> = exec.map_range(self.layers.len(), |li| {
            let l = &self.layers[li];
            let mut out = Vec::with_capacity(l.width() * NUM_GATES);
            for (w, g) in l.logits.iter().zip(&coef.layers[li]) {
                out.extend(logit_grad(w, g).iter().map(|&v| v as f32));
            }
            out
        });
        per_layer.concat()
    }

    /// Reference discrete forward pass: every neuron applies its argmax gate.
    /// `x` holds one boolean vector per sample; returns the final layer per sample.
    pub fn forward_discrete(&self, x: &[Vec<bool>]) -> Result<Vec<Vec<bool>>> {
        let gates: Vec<Vec<GateKind>> = self
            .layers
            .iter()
            .map(|l| l.logits.iter().map(argmax_gate).collect())
            .collect();
        x.iter()
            .map(|sample| {
                Error::check_dim("sample length", self.input_dim, sample.len())?;
                let mut cur = sample.clone();
                for (layer, gl) in self.layers.iter().zip(&gates) {
                    cur = (0..layer.width())
                        .map(|j| {
                            gl[j].bool_eval(cur[layer.in_a[j] as usize], cur[layer.in_b[j] as usize])
                        })
                        .collect();
                }
                Ok(cur)
            })
            .collect()
    }

    /// Distinct input features each final-layer neuron can depend on.
    pub fn receptive_fields(&self) -> Vec<usize> {
        let mut fields: Vec<BTreeSet<u32>> = (0..self.input_dim as u32)
            .map(|i| BTreeSet::from([i]))
            .collect();
        for layer in &self.layers {
            fields = (0..layer.width())
                .map(|j| {
                    let mut s = fields[layer.in_a[j] as usize].clone();
                    s.extend(fields[layer.in_b[j] as usize].iter().copied());
                    s
                })
                .collect();
        }
        fields.iter().map(BTreeSet::len).collect()
    }

    /// Flat view of all logits in parameter order (layer-major, neuron-major).
    pub fn flat_logits(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.logits.iter().flat_map(|w| w.iter().copied()))
            .collect()
    }

    pub fn set_flat_logits(&mut self, flat: &[f32]) -> Result<()> {
        Error::check_dim("parameter count", self.num_params(), flat.len())?;
        let mut it = flat.chunks_exact(NUM_GATES);
        for layer in &mut self.layers {
            for w in &mut layer.logits {
                w.copy_from_slice(it.next().expect("length checked"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_binary(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<Vec<bool>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect()
    }

    fn to_matrix(samples: &[Vec<bool>]) -> Matrix {
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.iter().map(|&b| b as u8 as f64).collect())
            .collect();
        Matrix::from_samples(&rows)
    }

    #[test]
    fn build_rejects_bad_shapes() {
        assert!(LogicNetwork::build(1, &[4], 0).is_err());
        assert!(LogicNetwork::build(8, &[4, 0], 0).is_err());
        assert!(LogicNetwork::build(8, &[], 0).is_err());
    }

    #[test]
    fn two_input_single_neuron_wiring() {
        let net = LogicNetwork::build(2, &[1], 0).unwrap();
        let (a, b) = net.layers[0].inputs(0);
        assert!(a < 2 && b < 2);
    }

    #[test]
    fn build_is_deterministic() {
        let a = LogicNetwork::build(32, &[16, 8], 42).unwrap();
        let b = LogicNetwork::build(32, &[16, 8], 42).unwrap();
        let c = LogicNetwork::build(32, &[16, 8], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn softmax_is_a_distribution() {
        let net = LogicNetwork::build(16, &[64], 5).unwrap();
        for w in net.layers[0].logits() {
            let p = softmax16(w);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pass_through_neuron() {
        let mut net = LogicNetwork::from_parts(
            2,
            0,
            vec![LogicNetwork::new_layer(vec![0], vec![1], vec![[0.0; 16]])],
        )
        .unwrap();
        net.set_gate(0, 0, GateKind::A);
        let x = Matrix::from_samples(&[vec![0.7, 0.2]]);
        let trace = net.forward_relaxed(&x).unwrap();
        assert_eq!(trace.output().get(0, 0), 0.7);

        let grads = net.backward(&x, &trace, &Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        assert_eq!(grads.input.column(0), vec![1.0, 0.0]);
    }

    #[test]
    fn uniform_mixture_at_one_one() {
        let net = LogicNetwork::from_parts(
            2,
            0,
            vec![LogicNetwork::new_layer(vec![0], vec![1], vec![[0.0; 16]])],
        )
        .unwrap();
        let x = Matrix::from_samples(&[vec![1.0, 1.0]]);
        let out = net.forward_relaxed(&x).unwrap().output().get(0, 0);
        // eight of the sixteen gates output 1 at (1, 1)
        let oracle = GateKind::ALL.iter().filter(|g| g.bool_eval(true, true)).count() as f64 / 16.0;
        assert!((out - oracle).abs() < 1e-15);
        assert!((out - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relaxed_mixture_matches_direct_gate_sum() {
        let net = LogicNetwork::build(6, &[5], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
        let x = Matrix::from_samples(&samples);
        let out = net.forward_relaxed(&x).unwrap();
        for (s, sample) in samples.iter().enumerate() {
            for j in 0..5 {
                let (ia, ib) = net.layers[0].inputs(j);
                let p = softmax16(&net.layers[0].logits[j]);
                let direct: f64 = GateKind::ALL
                    .iter()
                    .map(|g| p[*g as usize] * g.real_eval(sample[ia], sample[ib]))
                    .sum();
                assert!((out.output().get(j, s) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tie_picks_lowest_gate() {
        assert_eq!(argmax_gate(&[0.0; 16]), GateKind::False);
        let net = LogicNetwork::from_parts(
            2,
            0,
            vec![LogicNetwork::new_layer(vec![0], vec![1], vec![[0.0; 16]])],
        )
        .unwrap();
        assert_eq!(net.forward_discrete(&[vec![true, true]]).unwrap(), vec![vec![false]]);
    }

    #[test]
    fn one_hot_relaxed_equals_discrete() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut net = LogicNetwork::build(12, &[20, 20, 10], 3).unwrap();
        net.make_one_hot();
        let xs = random_binary(&mut rng, 12, 40);
        let relaxed = net.forward_relaxed(&to_matrix(&xs)).unwrap();
        let discrete = net.forward_discrete(&xs).unwrap();
        for (s, d) in discrete.iter().enumerate() {
            for (j, &bit) in d.iter().enumerate() {
                assert_eq!(relaxed.output().get(j, s), bit as u8 as f64);
            }
        }
    }

    #[test]
    fn activations_stay_in_unit_interval() {
        let net = LogicNetwork::build(10, &[32, 32, 32], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..16).map(|_| (0..10).map(|_| rng.random()).collect()).collect();
        let trace = net.forward_relaxed(&Matrix::from_samples(&samples)).unwrap();
        for m in &trace.layers {
            assert!(m.as_slice().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = LogicNetwork::build(8, &[6, 4], 1).unwrap();
        let x = Matrix::from_samples(&[vec![0.5; 8], vec![0.2; 8]]);
        let trace = net.forward_relaxed(&x).unwrap();
        let g = net.backward(&x, &trace, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.logits.iter().flatten().flatten().all(|&v| v == 0.0));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = LogicNetwork::build(8, &[4], 1).unwrap();
        assert!(net.forward_relaxed(&Matrix::zeros(7, 3)).is_err());
        assert!(net.forward_discrete(&[vec![true; 7]]).is_err());
        let x = Matrix::zeros(8, 3);
        let trace = net.forward_relaxed(&x).unwrap();
        assert!(net.backward(&x, &trace, &Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn receptive_field_bounded_by_depth() {
        let net = LogicNetwork::build(784, &[64, 64, 64], 4).unwrap();
        assert!(net.receptive_fields().iter().all(|&r| (1..=8).contains(&r)));
    }

    #[test]
    fn flat_logits_round_trip() {
        let mut net = LogicNetwork::build(8, &[4, 3], 1).unwrap();
        let mut flat = net.flat_logits();
        flat[5] = 9.0;
        net.set_flat_logits(&flat).unwrap();
        assert_eq!(net.layers[0].logits[0][5], 9.0);
        assert!(net.set_flat_logits(&flat[1..]).is_err());
    }
}
