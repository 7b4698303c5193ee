//! Randomised consistency checks runnable from a release binary: adjoint
//! identities, tensor path against the materialised matrix, and analytic
//! gradients against finite differences.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mts::{GtsOperator, MtsGeometry, MtsOperator, WindowRule};
use crate::network::{ActivationKind, CsModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{finite_difference_grad, loss_and_grad, perturb_params, relative_error, Dataset};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// A random MTS operator with at most `max_dim` input elements.
pub fn random_mts(rng: &mut impl Rng, max_dim: usize) -> Result<MtsOperator> {
    loop {
        let h = rng.random_range(1..=12usize);
        let w = rng.random_range(1..=12usize);
        let c = rng.random_range(1..=3usize);
        if h * w * c > max_dim {
            continue;
        }
        let mut windows: Vec<usize> = (1..=h.max(w)).filter(|_| rng.random_bool(0.3)).collect();
        if windows.is_empty() {
            windows.push(rng.random_range(1..=h.max(w)));
        }
        windows.truncate(3);
        let terms = rng.random_range(1..=3);
        let geometry = if rng.random_bool(0.5) {
            let cr = rng.random_range(0.05..=1.0);
            let rule = if rng.random_bool(0.5) { WindowRule::PerMode } else { WindowRule::Literal };
            MtsGeometry::compressed([h, w, c], &windows, rng.random_range(1..=3), cr, rule)?
        } else {
            MtsGeometry::shape_preserving([h, w, c], &windows, rng.random_range(1..=3))?
        };
        return MtsOperator::init(geometry, terms, rng.next_u64(), 1.0);
    }
}

fn scaled_gap(lhs: f64, rhs: f64, scale: f64) -> f64 {
    (lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE)
}

/// `|<Ax, y> - <x, A^T y>|` relative to `|x| |Ax| + |y| |A^T y|`, worst over trials.
pub fn adjoint_check(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..trials {
        let (ax, aty, x, y) = if i % 2 == 0 {
            let j = rng.random_range(1..=4);
            let ins: Vec<usize> = (0..j).map(|_| rng.random_range(1..=5)).collect();
            let outs: Vec<usize> = (0..j).map(|_| rng.random_range(1..=5)).collect();
            let op: GtsOperator = GtsOperator::init(&ins, &outs, rng.random_range(1..=3), rng.next_u64(), 1.0)?;
            let x = random_tensor(&mut rng, &ins);
            let y = random_tensor(&mut rng, &outs);
            (op.forward(&x)?, op.adjoint(&y)?, x, y)
        } else {
            let op = random_mts(&mut rng, 1024)?;
            let x = random_tensor(&mut rng, &op.input_shape());
            let y = random_tensor(&mut rng, &op.output_shape());
            (op.forward(&x)?, op.adjoint(&y)?, x, y)
        };
        let scale = x.frobenius_norm() * ax.frobenius_norm() + y.frobenius_norm() * aty.frobenius_norm();
        worst = worst.max(scaled_gap(ax.dot(&y)?, x.dot(&aty)?, scale));
    }
    Ok(worst)
}

/// Relative error between the tensor path and the materialised matrix, for
/// both forward and adjoint, worst over `configs` random operators.
pub fn materialization_check(seed: u64, configs: usize, max_dim: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let op = random_mts(&mut rng, max_dim)?;
        let p = op.materialize()?;
        let x = random_tensor(&mut rng, &op.input_shape());
        let y = random_tensor(&mut rng, &op.output_shape());
        let fwd = op.forward(&x)?;
        let dense_fwd = p.matvec(x.data())?;
        let adj = op.adjoint(&y)?;
        let dense_adj = p.transpose().matvec(y.data())?;
        worst = worst
            .max(relative_error(fwd.data(), &dense_fwd))
            .max(relative_error(adj.data(), &dense_adj));
    }
    Ok(worst)
}

/// The tiny model used by the gradient checks: 8x8x3 images, two encoder
/// scales with two terms and a single refinement block.
pub fn tiny_model_config(activation: ActivationKind, block_activation: ActivationKind) -> ModelConfig {
    ModelConfig {
        image_size: [8, 8],
        channels: 3,
        cr: 0.5,
        encoder_windows: vec![4, 8],
        refine_windows: vec![4, 8],
        t_encoder: 2,
        t_refine: 2,
        nb: 1,
        hidden_channels: 3,
        activation,
        block_activation,
        window_rule: WindowRule::PerMode,
    }
}

/// Worst per-parameter relative error of analytic against central
/// finite-difference gradients (step 1e-4) on the tiny model.
pub fn gradient_check(seed: u64, activation: ActivationKind, block_activation: ActivationKind) -> Result<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: CsModel = CsModel::init(&tiny_model_config(activation, block_activation), rng.next_u64())?;
    perturb_params(&mut model, 0.1, rng.next_u64());
    let img = Dataset::synthetic(1, [8, 8], 3, rng.next_u64()).images.remove(0);
    let (_, grad) = loss_and_grad(&model, &img, &img, 0.1)?;
    let fd = finite_difference_grad(&model, &img, &img, 0.1, 1e-4)?;
    Ok(grad
        .params()
        .iter()
        .zip(&fd)
        .map(|((name, g), f)| (name.clone(), relative_error(g, f)))
        .fold((String::new(), 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc }))
}

fn check(name: &str, value: Result<f64>, tol: f64) -> CheckResult {
    match value {
        Ok(v) => CheckResult {
            name: name.into(),
            passed: v <= tol,
            detail: format!("worst {v:.3e} (tol {tol:.0e})"),
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![
        check("adjoint identity (GTS and MTS)", adjoint_check(seed, 200), 1e-12),
        check("materialized matrix vs tensor path", materialization_check(seed ^ 1, 25, 1024), 1e-10),
    ];
    for kind in ActivationKind::ALL {
        let label = format!("finite-difference gradients ({})", kind.name());
        let res = gradient_check(seed ^ 2, kind, kind);
        out.push(match res {
            Ok((param, e)) => {
                let mut r = check(&label, Ok(e), 1e-5);
                r.detail.push_str(&format!(" at {param}"));
                r
            }
            Err(e) => check(&label, Err(e), 1e-5),
        });
    }
    out
}
