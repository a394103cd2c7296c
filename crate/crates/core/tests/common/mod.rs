//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dlgn::compile::DiscreteCircuit;
use dlgn::matrix::Matrix;
use dlgn::network::LogicNetwork;
use rand::Rng;

/// Truth-table columns for inputs (a, b) = 00, 01, 10, 11, one row per gate id.
pub const TRUTH: [[u8; 4]; 16] = [
    [0, 0, 0, 0],
    [0, 0, 0, 1],
    [0, 0, 1, 0],
    [0, 0, 1, 1],
    [0, 1, 0, 0],
    [0, 1, 0, 1],
    [0, 1, 1, 0],
    [0, 1, 1, 1],
    [1, 0, 0, 0],
    [1, 0, 0, 1],
    [1, 0, 1, 0],
    [1, 0, 1, 1],
    [1, 1, 0, 0],
    [1, 1, 0, 1],
    [1, 1, 1, 0],
    [1, 1, 1, 1],
];

pub fn table_gate(id: usize, a: bool, b: bool) -> bool {
    TRUTH[id][2 * a as usize + b as usize] == 1
}

/// Opcode names indexed by gate id.
pub const NAMES: [&str; 16] = [
    "FALSE", "AND", "ANIMP", "A", "BNIMP", "B", "XOR", "OR", "NOR", "XNOR", "NOTB", "BIMP", "NOTA", "AIMP", "NAND", "TRUE",
];

/// Gate-by-gate evaluation of a circuit from the truth table; every final-layer gate.
pub fn scalar_circuit(circ: &DiscreteCircuit, x: &[bool]) -> Vec<bool> {
    let mut cur = x.to_vec();
    for l in &circ.layers {
        cur = (0..l.width())
            .map(|j| table_gate(l.gates[j].id() as usize, cur[l.in_a[j] as usize], cur[l.in_b[j] as usize]))
            .collect();
    }
    cur
}

/// Minimal netlist interpreter written against the text format only.
/// Returns the values of the `output` gates in file order.
pub fn interpret_netlist(text: &str, x: &[bool]) -> Vec<bool> {
    let mut vals: Vec<bool> = Vec::new();
    let mut outs = Vec::new();
    let read = |vals: &[bool], tok: &str| -> bool {
        let tok = tok.trim();
        let n: usize = tok[1..].parse().unwrap();
        if tok.starts_with('i') { x[n] } else { vals[n] }
    };
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("output ") {
            let g: usize = rest.split_whitespace().next().unwrap()[1..].parse().unwrap();
            outs.push(vals[g]);
        } else if let Some((_, rhs)) = line.split_once(" = ") {
            let (op, args) = rhs.trim_end_matches(')').split_once('(').unwrap();
            let (a, b) = args.split_once(',').unwrap();
            let id = NAMES.iter().position(|n| *n == op).unwrap();
            let v = table_gate(id, read(&vals, a), read(&vals, b));
            vals.push(v);
        }
    }
    outs
}

pub fn random_bits<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random()).collect()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `sum(r * out)` of the relaxed forward pass.
pub fn projected_output(net: &LogicNetwork, x: &Matrix, r: &Matrix) -> f64 {
    let out = net.forward_relaxed(x).unwrap();
    out.output().as_slice().iter().zip(r.as_slice()).map(|(o, w)| o * w).sum()
}

/// Central difference of `projected_output` in one logit. The divisor is the
/// step actually realised in single precision.
pub fn logit_fd(net: &LogicNetwork, x: &Matrix, r: &Matrix, layer: usize, neuron: usize, gate: usize, h: f32) -> f64 {
    let mut plus = net.clone();
    let mut minus = net.clone();
    let w = net.layers()[layer].logits()[neuron][gate];
    let (wp, wm) = (w + h, w - h);
    plus.layers_mut()[layer].logits_mut()[neuron][gate] = wp;
    minus.layers_mut()[layer].logits_mut()[neuron][gate] = wm;
    (projected_output(&plus, x, r) - projected_output(&minus, x, r)) / (wp as f64 - wm as f64)
}

/// Central difference of `projected_output` in one input value.
pub fn input_fd(net: &LogicNetwork, x: &Matrix, r: &Matrix, row: usize, col: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    let mut minus = x.clone();
    plus.set(row, col, x.get(row, col) + h);
    minus.set(row, col, x.get(row, col) - h);
    (projected_output(net, &plus, r) - projected_output(net, &minus, r)) / (2.0 * h)
}

/// Central difference of a scalar function of a vector in coordinate `i`.
pub fn vec_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data)
}
