#![allow(dead_code)]

use mtscs::{GtsOperator, MtsGeometry, MtsOperator, Tensor, WindowRule};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Reflection without edge repeat, written out from the definition:
/// ... 2 1 | 0 1 2 ... n-1 | n-2 ...
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i as isize;
    let n = n as isize;
    loop {
        if i < n {
            return i as usize;
        }
        i = 2 * (n - 1) - i;
        if i < 0 {
            i = -i;
        }
    }
}

/// Dense `m x n` matrix of an MTS operator, assembled entry by entry from
/// the factor matrices: for an output pixel in patch `(pi, pj)` of scale
/// `sc`, every input pixel of the same (padded) input patch contributes
/// `sum_t A1[a, a'] A2[b, b'] A3[co, ci]`, folded back through reflection.
pub fn dense_oracle(op: &MtsOperator) -> Vec<Vec<f64>> {
    let g = op.geometry();
    let [h, w, c] = g.input();
    let [oh, ow, oc] = g.output();
    let n = h * w * c;
    let mut m = vec![vec![0.0; n]; oh * ow * oc];
    for (sc, s) in g.scales().iter().enumerate() {
        let gts = &op.scales()[sc];
        let win = s.window;
        let [wh, ww] = s.out_window;
        for i in 0..oh {
            for j in 0..ow {
                let (pi, pj, a, b) = (i / wh, j / ww, i % wh, j % ww);
                for co in 0..oc {
                    let row = (i * ow + j) * oc + co;
                    for a2 in 0..win {
                        for b2 in 0..win {
                            let src_i = reflect(pi * win + a2, h);
                            let src_j = reflect(pj * win + b2, w);
                            for ci in 0..c {
                                let mut k = 0.0;
                                for t in 0..gts.term_count() {
                                    k += gts.factor(t, 0).get(a, a2)
                                        * gts.factor(t, 1).get(b, b2)
                                        * gts.factor(t, 2).get(co, ci);
                                }
                                m[row][(src_i * w + src_j) * c + ci] += k;
                            }
                        }
                    }
                }
            }
        }
    }
    m
}

pub fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn matvec_t(m: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for (r, &yi) in m.iter().zip(y) {
        out.iter_mut().zip(r).for_each(|(o, a)| *o += a * yi);
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Random MTS operator including non-tiling windows, both window rules and
/// channel changes, with at most `max_dim` input elements.
pub fn random_mts(rng: &mut impl Rng, max_dim: usize) -> MtsOperator {
    loop {
        let h = rng.random_range(1..=20usize);
        let w = rng.random_range(1..=20usize);
        let c = rng.random_range(1..=3usize);
        if h * w * c > max_dim {
            continue;
        }
        let sc = rng.random_range(1..=3usize);
        let mut windows: Vec<usize> = (0..sc).map(|_| rng.random_range(1..=h.max(w) + 2)).collect();
        windows.sort_unstable();
        windows.dedup();
        let terms = rng.random_range(1..=3);
        let c_out = rng.random_range(1..=3);
        let geometry = match rng.random_range(0..3) {
            0 => MtsGeometry::shape_preserving([h, w, c], &windows, c_out),
            1 => MtsGeometry::compressed([h, w, c], &windows, c_out, rng.random_range(0.05..=1.0), WindowRule::PerMode),
            _ => MtsGeometry::compressed([h, w, c], &windows, c_out, rng.random_range(0.05..=1.0), WindowRule::Literal),
        }
        .unwrap();
        return MtsOperator::init(geometry, terms, rng.random(), 1.0).unwrap();
    }
}

pub fn random_gts(rng: &mut impl Rng) -> GtsOperator {
    let j = rng.random_range(1..=4);
    let ins: Vec<usize> = (0..j).map(|_| rng.random_range(1..=6)).collect();
    let outs: Vec<usize> = (0..j).map(|_| rng.random_range(1..=6)).collect();
    GtsOperator::init(&ins, &outs, rng.random_range(1..=4), rng.random(), 1.0).unwrap()
}
