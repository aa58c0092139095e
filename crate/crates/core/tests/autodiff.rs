// SPDX-License-Identifier: MIT OR Apache-2.0

use domainfit::autodiff::{jvp, Graph, NodeId};
use domainfit::rng::RngStream;
use domainfit::{Result, Tensor};
use proptest::prelude::*;

const ROWS: usize = 4;
const COLS: usize = 6;

/// Every registered primitive, each applied to the differentiated input, then
/// one composite block. The block's inner ReLU sees arbitrary pre-activations,
/// so it is left out of the finite-difference check.
const PROGRAMS: &[&str] = &[
    "matmul_left",
    "matmul_right",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_cols",
    "scale",
    "relu",
    "softmax",
    "softmax_causal",
    "layer_norm",
    "layer_norm_gain",
    "embedding",
    "mean_rows",
    "slice_cols",
    "concat_cols",
    "repeat_each",
    "cross_entropy",
    "block",
];

struct Consts {
    w: Tensor,
    a: Tensor,
    c: Tensor,
    gain: Tensor,
    bias: Tensor,
    w2: Tensor,
}

impl Consts {
    fn new(seed: u64) -> Self {
        let mut rng = RngStream::new(seed ^ 0x5eed);
        Self {
            w: rng.uniform(&[COLS, 5], -1.0, 1.0),
            a: rng.uniform(&[3, ROWS], -1.0, 1.0),
            c: rng.uniform(&[ROWS, COLS], -1.0, 1.0),
            gain: rng.uniform(&[COLS], 0.5, 1.5),
            bias: rng.uniform(&[COLS], -0.5, 0.5),
            w2: rng.uniform(&[5, COLS], -1.0, 1.0),
        }
    }
}

fn program(name: &str, k: &Consts, g: &mut Graph, x: NodeId) -> Result<NodeId> {
    match name {
        "matmul_left" => {
            let w = g.constant(k.w.clone());
            g.matmul(x, w)
        }
        "matmul_right" => {
            let a = g.constant(k.a.clone());
            g.matmul(a, x)
        }
        "transpose" => g.transpose(x),
        "add" => {
            let c = g.constant(k.c.clone());
            g.add(x, c)
        }
        "sub" => {
            let c = g.constant(k.c.clone());
            g.sub(c, x)
        }
        "mul" => g.mul(x, x),
        "add_row" => {
            let m = g.mean_rows(x)?;
            g.add_row(x, m)
        }
        "mul_cols" => {
            let m = g.mean_rows(x)?;
            g.mul_cols(x, m)
        }
        "scale" => g.scale(x, -1.7),
        "relu" => g.relu(x),
        "softmax" => g.softmax(x, false),
        "softmax_causal" => g.softmax(x, true),
        "layer_norm" => {
            let (gn, b) = (g.constant(k.gain.clone()), g.constant(k.bias.clone()));
            g.layer_norm(x, gn, b)
        }
        "layer_norm_gain" => {
            let m = g.mean_rows(x)?;
            let b = g.constant(k.bias.clone());
            let c = g.constant(k.c.clone());
            let y = g.add(x, c)?;
            g.layer_norm(y, m, b)
        }
        "embedding" => g.embedding(x, &[3, 0, 0, 2, 1]),
        "mean_rows" => g.mean_rows(x),
        "slice_cols" => g.slice_cols(x, 1, 3),
        "concat_cols" => {
            let s = g.scale(x, 2.0)?;
            g.concat_cols(&[x, s])
        }
        "repeat_each" => {
            let m = g.mean_rows(x)?;
            g.repeat_each(m, 3)
        }
        "cross_entropy" => g.cross_entropy(x, &[Some(1), None, Some(5), Some(0)]),
        "block" => {
            let (gn, b) = (g.constant(k.gain.clone()), g.constant(k.bias.clone()));
            let (w, w2) = (g.constant(k.w.clone()), g.constant(k.w2.clone()));
            let h = g.layer_norm(x, gn, b)?;
            let h = g.matmul(h, w)?;
            let h = g.relu(h)?;
            let h = g.matmul(h, w2)?;
            let h = g.add(h, x)?;
            let ht = g.transpose(h)?;
            let s = g.matmul(h, ht)?;
            let p = g.softmax(s, true)?;
            g.matmul(p, x)
        }
        other => unreachable!("{other}"),
    }
}

fn eval(name: &str, k: &Consts, x: &Tensor, v: &Tensor) -> Tensor {
    jvp(|g, id| program(name, k, g, id), x, v).unwrap().tangent
}

fn primal(name: &str, k: &Consts, x: &Tensor) -> Tensor {
    let z = Tensor::zeros(x.shape());
    jvp(|g, id| program(name, k, g, id), x, &z).unwrap().primal
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    num.sqrt() / den.sqrt().max(1e-6)
}

/// Input in [-2, 2] kept away from the ReLU kink.
fn input(seed: u64) -> Tensor {
    RngStream::new(seed)
        .uniform(&[ROWS, COLS], -2.0, 2.0)
        .map(|v| if v.abs() < 0.05 { 0.05f32.copysign(v) } else { v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jvp_is_linear_in_the_direction(
        p in 0..PROGRAMS.len(),
        seed in any::<u64>(),
        alpha in -3.0f32..3.0,
        beta in -3.0f32..3.0,
    ) {
        let name = PROGRAMS[p];
        let k = Consts::new(seed);
        let x = input(seed);
        let mut rng = RngStream::new(seed.wrapping_add(1));
        let v1 = rng.uniform(&[ROWS, COLS], -1.0, 1.0);
        let v2 = rng.uniform(&[ROWS, COLS], -1.0, 1.0);
        let mut mix = v1.scale(alpha);
        mix.axpy(beta, &v2).unwrap();
        let (j1, j2) = (eval(name, &k, &x, &v1), eval(name, &k, &x, &v2));
        let lhs = eval(name, &k, &x, &mix);
        let mut rhs = j1.scale(alpha);
        rhs.axpy(beta, &j2).unwrap();
        // relative to the size of the two terms, not of their sum
        let scale = (alpha.abs() * j1.norm() + beta.abs() * j2.norm()) as f64;
        let e = rel_err(&lhs, &rhs) * rhs.norm().max(1e-6) as f64 / scale.max(1e-6);
        prop_assert!(e < 1e-5, "{name}: relative error {e}");
    }

    /// Full Jacobian, one input coordinate at a time.
    #[test]
    fn jvp_matches_central_differences(p in 0..PROGRAMS.len() - 1, seed in any::<u64>()) {
        let name = PROGRAMS[p];
        let k = Consts::new(seed);
        let x = input(seed);
        // f32 forward passes: a smaller step drowns in rounding
        let h = 1e-2f32;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..x.len() {
            let v = Tensor::from_fn(x.shape(), |j| (i == j) as u8 as f32);
            let mut xp = x.clone();
            xp.axpy(h, &v).unwrap();
            let mut xm = x.clone();
            xm.axpy(-h, &v).unwrap();
            let fd = primal(name, &k, &xp).sub(&primal(name, &k, &xm)).unwrap().scale(0.5 / h);
            let col = eval(name, &k, &x, &v);
            num += col.sub(&fd).unwrap().data().iter().map(|d| (*d as f64).powi(2)).sum::<f64>();
            den += fd.data().iter().map(|d| (*d as f64).powi(2)).sum::<f64>();
        }
        let e = num.sqrt() / den.sqrt().max(1e-6);
        prop_assert!(e < 1e-3, "{name}: relative error {e}");
    }

    /// `<r, J v> == <J^T r, v>`: the reverse sweep is the adjoint of the
    /// forward sweep.
    #[test]
    fn backward_is_adjoint_of_jvp(p in 0..PROGRAMS.len(), seed in any::<u64>()) {
        let name = PROGRAMS[p];
        let k = Consts::new(seed);
        let x = input(seed);
        let mut rng = RngStream::new(seed.wrapping_add(3));
        let v = rng.uniform(&[ROWS, COLS], -1.0, 1.0);

        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = program(name, &k, &mut g, xi).unwrap();
        let shape = g.value(out).shape().to_vec();
        let jv = g.tangent_of(&[(xi, &v)], out).unwrap();
        let r = rng.uniform(&shape, -1.0, 1.0);
        let loss = if shape.iter().product::<usize>() == 1 {
            g.scale(out, r.data()[0]).unwrap()
        } else {
            let out2 = if shape.len() == 1 {
                let t = g.repeat_each(out, 1).unwrap();
                let m = g.constant(Tensor::ones(&[1, shape[0]]));
                let rr = g.constant(Tensor::new(vec![1, shape[0]], r.data().to_vec()).unwrap());
                let row = g.mul_cols(m, t).unwrap();
                g.mul(row, rr).unwrap()
            } else {
                let rr = g.constant(r.clone());
                g.mul(out, rr).unwrap()
            };
            let (m, n) = (g.value(out2).rows(), g.value(out2).cols());
            let ones_n = g.constant(Tensor::ones(&[n, 1]));
            let col = g.matmul(out2, ones_n).unwrap();
            let row = g.transpose(col).unwrap();
            let ones_m = g.constant(Tensor::ones(&[m, 1]));
            g.matmul(row, ones_m).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        let lhs: f64 = r.data().iter().zip(jv.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = grads.get(xi).unwrap().data().iter().zip(v.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()), "{name}: {lhs} vs {rhs}");
    }

    #[test]
    fn forward_is_deterministic(p in 0..PROGRAMS.len(), seed in any::<u64>()) {
        let name = PROGRAMS[p];
        let k = Consts::new(seed);
        let x = input(seed);
        let v = RngStream::new(seed).uniform(&[ROWS, COLS], -1.0, 1.0);
        let a = jvp(|g, id| program(name, &k, g, id), &x, &v).unwrap();
        let b = jvp(|g, id| program(name, &k, g, id), &x, &v).unwrap();
        prop_assert_eq!(a.primal.to_le_bytes(), b.primal.to_le_bytes());
        prop_assert_eq!(a.tangent.to_le_bytes(), b.tangent.to_le_bytes());
    }
}
