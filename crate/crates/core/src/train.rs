//! Training: loss and exact gradients, Adam with cosine warm restarts,
//! datasets with seeded random crops, the training loop and evaluation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MtsError, Result};
use crate::metrics::{psnr, ssim};
use crate::network::{CsModel, ModelConfig, Reconstruction};
use crate::tensor::{Real, Tensor};

/// Mean squared error over all elements.
pub fn mse_loss<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let d = x.sub(target)?;
    Ok(d.dot(&d)? / T::lit(d.len() as f64))
}

/// `MSE(reconstruction) + proxy_weight * MSE(proxy)`.
pub fn loss<T: Real>(out: &Reconstruction<T>, target: &Tensor<T>, proxy_weight: f64) -> Result<T> {
    let mut l = mse_loss(&out.reconstruction, target)?;
    if proxy_weight != 0.0 {
        l += T::lit(proxy_weight) * mse_loss(&out.proxy, target)?;
    }
    Ok(l)
}

fn mse_grad<T: Real>(x: &Tensor<T>, target: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    Ok(x.sub(target)?.scale(T::lit(2.0 * weight / x.len() as f64)))
}

/// Loss of `model` on `image` and the gradient for every parameter, stored
/// in a model-shaped container.
pub fn loss_and_grad<T: Real>(
    model: &CsModel<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    proxy_weight: f64,
) -> Result<(T, CsModel<T>)> {
    let trace = model.forward_traced(image)?;
    let l = loss(&trace.output, target, proxy_weight)?;
    let d_rec = mse_grad(&trace.output.reconstruction, target, 1.0)?;
    let d_proxy = if proxy_weight != 0.0 {
        Some(mse_grad(&trace.output.proxy, target, proxy_weight)?)
    } else {
        None
    };
    let mut grad = model.zeros_like();
    model.backward(&trace, &d_rec, d_proxy.as_ref(), &mut grad)?;
    Ok((l, grad))
}

/// Mean loss and gradient over a batch. Per-image work runs in parallel;
/// the reduction is sequential so results do not depend on scheduling.
pub fn batch_loss_and_grad<T: Real>(
    model: &CsModel<T>,
    images: &[Tensor<T>],
    proxy_weight: f64,
) -> Result<(T, CsModel<T>)> {
    if images.is_empty() {
        return Err(MtsError::EmptyDataset);
    }
    let parts = images
        .par_iter()
        .map(|img| loss_and_grad(model, img, img, proxy_weight))
        .collect::<Result<Vec<_>>>()?;
    let inv = T::lit(1.0 / images.len() as f64);
    let mut total = model.zeros_like();
    let mut l = T::zero();
    for (li, g) in &parts {
        l += *li;
        axpy_params(&mut total, inv, g);
    }
    Ok((l * inv, total))
}

/// `dst += alpha * src` over every parameter.
pub fn axpy_params<T: Real>(dst: &mut CsModel<T>, alpha: T, src: &CsModel<T>) {
    for (d, (_, s)) in dst.params_mut().into_iter().zip(src.params()) {
        d.iter_mut().zip(s).for_each(|(a, &b)| *a += alpha * b);
    }
}

/// Central finite-difference gradient of the batch loss, one entry per
/// parameter slice in [`CsModel::params`] order.
pub fn finite_difference_grad<T: Real>(
    model: &CsModel<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    proxy_weight: f64,
    h: f64,
) -> Result<Vec<Vec<T>>> {
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.params_mut()[k][i];
            probe.params_mut()[k][i] = orig + T::lit(h);
            let up = loss(&probe.forward(image)?, target, proxy_weight)?;
            probe.params_mut()[k][i] = orig - T::lit(h);
            let down = loss(&probe.forward(image)?, target, proxy_weight)?;
            probe.params_mut()[k][i] = orig;
            g.push((up - down) / T::lit(2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    let f = |v: T| v.to_f64().unwrap();
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (f(x) - f(y)).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| f(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f(x).powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Adds Gaussian noise to every parameter. Used to move a freshly
/// initialised model (whose zero layers hide most gradients) to a generic
/// point before gradient checks.
pub fn perturb_params<T: Real>(model: &mut CsModel<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v += T::lit(normal.sample(&mut rng)));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Cosine annealing with warm restarts. Cycle `i` lasts
/// `round(cycle_steps * cycle_mult^i)` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle_steps: usize,
    pub cycle_mult: f64,
}

impl CosineRestarts {
    pub fn new(base_lr: f64, cycle_steps: usize, cycle_mult: f64) -> Result<Self> {
        if cycle_steps == 0 || !(cycle_mult >= 1.0) || !(base_lr > 0.0) {
            return Err(MtsError::config(
                "schedule needs lr > 0, cycle_steps >= 1 and cycle_mult >= 1",
            ));
        }
        Ok(Self {
            base_lr,
            min_lr: 0.0,
            cycle_steps,
            cycle_mult,
        })
    }

    /// `(cycle index, position in cycle, cycle length)` at `step` (0-based).
    pub fn position(&self, step: u64) -> (usize, usize, usize) {
        let mut rest = step;
        let mut len = self.cycle_steps as f64;
        let mut cycle = 0;
        loop {
            let n = (len.round() as u64).max(1);
            if rest < n {
                return (cycle, rest as usize, n as usize);
            }
            rest -= n;
            len *= self.cycle_mult;
            cycle += 1;
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (_, pos, len) = self.position(step);
        let frac = pos as f64 / len as f64;
        self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (PI * frac).cos()) / 2.0
    }
}

/// Optimiser bookkeeping. The moment buffers mirror [`CsModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T = f64> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub seed: u64,
    pub cycle: usize,
    pub cycle_pos: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &CsModel<T>, seed: u64) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            seed,
            cycle: 0,
            cycle_pos: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Gradients are
/// checked for finiteness before anything is modified.
pub fn adam_step<T: Real>(
    state: &mut TrainState<T>,
    model: &mut CsModel<T>,
    grad: &CsModel<T>,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let grads = grad.params();
    if grads.len() != state.m.len() {
        return Err(MtsError::shape("optimizer state does not match the model"));
    }
    for ((name, g), m) in grads.iter().zip(&state.m) {
        if g.len() != m.len() {
            return Err(MtsError::shape(format!("optimizer state for `{name}` has the wrong size")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MtsError::NonFinite { param: name.clone() });
        }
    }
    state.step += 1;
    for (k, p) in model.params_mut().into_iter().enumerate() {
        adam_update(p, grads[k].1, &mut state.m[k], &mut state.v[k], state.step, hyper, lr);
    }
    Ok(())
}

/// Adam on raw slices; `step` is the 1-based count including this update.
pub fn adam_update<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hyper: &AdamConfig,
    lr: f64,
) {
    let t = step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::lit(1.0 - hyper.beta1.powi(t));
    let c2 = T::lit(1.0 - hyper.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(hyper.eps));
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Images in `[0, 1]`, `H x W x C`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Random sums of oriented colour gratings plus a soft edge.
    pub fn synthetic(count: usize, size: [usize; 2], channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count).map(|_| synthetic_texture(&mut rng, size, channels)).collect();
        Self {
            names: (0..count).map(|i| format!("synthetic_{i:04}")).collect(),
            images,
        }
    }

    /// Every decodable image in `dir`, sorted by file name. Files that fail
    /// to decode or do not match `channels` are skipped with a warning.
    pub fn from_dir(dir: &Path, channels: usize) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| MtsError::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let loaded: Vec<_> = paths
            .par_iter()
            .map(|p| (p, crate::io::load_image(p, channels)))
            .collect();
        let mut out = Dataset::default();
        for (path, img) in loaded {
            match img {
                Ok(img) => {
                    out.names.push(
                        path.file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    );
                    out.images.push(img);
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if out.is_empty() {
            return Err(MtsError::EmptyDataset);
        }
        Ok(out)
    }
}

fn synthetic_texture(rng: &mut impl Rng, [h, w]: [usize; 2], c: usize) -> Tensor<f64> {
    struct Grating {
        fy: f64,
        fx: f64,
        phase: f64,
        amp: Vec<f64>,
    }
    let gratings: Vec<Grating> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..6.0);
            Grating {
                fy: freq * theta.sin() / h as f64,
                fx: freq * theta.cos() / w as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                amp: (0..c).map(|_| rng.random_range(0.05..0.15)).collect(),
            }
        })
        .collect();
    let edge_theta = rng.random_range(0.0..2.0 * PI);
    let edge_off = rng.random_range(-0.3..0.3);
    let edge_amp: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.35..0.65)).collect();
    Tensor::from_fn(&[h, w, c], |idx| {
        let (y, x, ch) = (idx[0] as f64, idx[1] as f64, idx[2]);
        let mut v = base[ch];
        for g in &gratings {
            v += g.amp[ch] * (2.0 * PI * (g.fy * y + g.fx * x) + g.phase).sin();
        }
        let u = (y / h as f64 - 0.5) * edge_theta.sin() + (x / w as f64 - 0.5) * edge_theta.cos();
        v += edge_amp[ch] * ((u - edge_off) * 12.0).tanh();
        v.clamp(0.0, 1.0)
    })
}

/// Copy of the `height x width` window of `img` starting at `(top, left)`.
pub fn crop_at<T: Real>(img: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MtsError::shape(format!("expected H x W x C image, got {s:?}"))),
    };
    if top + height > h || left + width > w {
        return Err(MtsError::shape(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let mut out = Vec::with_capacity(height * width * c);
    for i in top..top + height {
        let start = (i * w + left) * c;
        out.extend_from_slice(&img.data()[start..start + width * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

pub fn random_crop<T: Real>(img: &Tensor<T>, height: usize, width: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h < height || w < width {
        return Err(MtsError::shape(format!("{h}x{w} image is smaller than the {height}x{width} crop")));
    }
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    crop_at(img, top, left, height, width)
}

pub fn center_crop<T: Real>(img: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h < height || w < width {
        return Err(MtsError::shape(format!("{h}x{w} image is smaller than the {height}x{width} crop")));
    }
    crop_at(img, (h - height) / 2, (w - width) / 2, height, width)
}

/// Hex SHA-256 prefix of the JSON encoding of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    Sha256::digest(&json)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-image quality of a model's reconstructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// PSNR of the adjoint-only proxy, before refinement.
    pub proxy_psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_proxy_psnr: f64,
    pub cr: f64,
    pub config_hash: String,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluates on centre crops of the model's image size.
pub fn evaluate<T: Real>(model: &CsModel<T>, data: &Dataset, peak: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MtsError::EmptyDataset);
    }
    let [h, w, _] = model.image_shape();
    let rows = data
        .images
        .par_iter()
        .map(|img| {
            let target: Tensor<T> = center_crop(img, h, w)?.cast();
            let out = model.forward(&target)?;
            Ok((
                psnr(&out.reconstruction, &target, peak)?,
                ssim(&out.reconstruction, &target, peak)?,
                psnr(&out.proxy, &target, peak)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let psnr: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ssim: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let proxy_psnr: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(EvalReport {
        names: data.names.clone(),
        mean_psnr: mean(&psnr),
        mean_ssim: mean(&ssim),
        mean_proxy_psnr: mean(&proxy_psnr),
        psnr,
        ssim,
        proxy_psnr,
        cr: model.encoder().achieved_cr(),
        config_hash: config_hash(model.config()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_cycle")]
    pub cycle_steps: usize,
    #[serde(default = "one")]
    pub cycle_mult: f64,
    #[serde(default = "default_proxy_weight")]
    pub proxy_weight: f64,
    pub seed: u64,
    /// Steps between evaluations; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "one")]
    pub peak: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_cycle() -> usize {
    10_000
}

fn one() -> f64 {
    1.0
}

fn default_proxy_weight() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch: 2,
            lr: 5e-4,
            cycle_steps: default_cycle(),
            cycle_mult: 1.0,
            proxy_weight: default_proxy_weight(),
            seed: 0,
            eval_every: 0,
            peak: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(MtsError::config("batch must be at least 1"));
        }
        if !(self.proxy_weight >= 0.0) {
            return Err(MtsError::config("proxy_weight must be non-negative"));
        }
        CosineRestarts::new(self.lr, self.cycle_steps, self.cycle_mult)?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_ssim: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub model: CsModel<T>,
    pub state: TrainState<T>,
    pub log: Vec<LogRecord>,
    pub evals: Vec<(u64, EvalReport)>,
}

impl<T> TrainOutcome<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Trailing moving average; entry `i` averages `losses[i+1-window..=i]`
/// (fewer at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            mean(&losses[lo..=i])
        })
        .collect()
}

/// Trains a freshly initialised model. Initialisation, data order and crop
/// positions all derive from `cfg.seed`. `on_record` sees every log line as
/// it is produced.
pub fn train<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = CsModel::init(model_cfg, seeds.next_u64())?;
    let data_seed = seeds.next_u64();
    train_from(model, cfg, data, eval_data, data_seed, on_record)
}

/// Continues training `model` with batches drawn from a data stream seeded
/// by `data_seed`.
pub fn train_from<T: Real>(
    mut model: CsModel<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    data_seed: u64,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MtsError::EmptyDataset);
    }
    let schedule = CosineRestarts::new(cfg.lr, cfg.cycle_steps, cfg.cycle_mult)?;
    let [h, w, _] = model.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut state = TrainState::new(&model, cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            batch.push(random_crop(&data.images[idx], h, w, &mut rng)?.cast::<T>());
        }
        let (cycle, pos, _) = schedule.position(step);
        state.cycle = cycle;
        state.cycle_pos = pos;
        let lr = schedule.lr(step);
        let (l, grad) = batch_loss_and_grad(&model, &batch, cfg.proxy_weight)?;
        adam_step(&mut state, &mut model, &grad, &cfg.adam, lr)?;
        let mut record = LogRecord {
            step: step + 1,
            lr,
            loss: l.to_f64().unwrap(),
            eval_psnr: None,
            eval_ssim: None,
        };
        if let Some(ev) = eval_data {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let report = evaluate(&model, ev, cfg.peak)?;
                record.eval_psnr = Some(report.mean_psnr);
                record.eval_ssim = Some(report.mean_ssim);
                log::info!(
                    "step {}: loss {:.6} psnr {:.3} ssim {:.4}",
                    step + 1,
                    record.loss,
                    report.mean_psnr,
                    report.mean_ssim
                );
                evals.push((step + 1, report));
            }
        }
        on_record(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        model,
        state,
        log,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ActivationKind;

    fn tiny(nb: usize) -> ModelConfig {
        ModelConfig {
            image_size: [8, 8],
            channels: 3,
            cr: 0.5,
            encoder_windows: vec![4, 8],
            refine_windows: vec![4, 8],
            t_encoder: 2,
            t_refine: 1,
            nb,
            hidden_channels: 3,
            activation: ActivationKind::Mhg,
            block_activation: ActivationKind::Mhg,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let x = Tensor::from_fn(&[2, 3, 1], |i| (i[0] + 2 * i[1]) as f64);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert!((mse_loss(&x.map(|v| v + 1.0), &x).unwrap() - 1.0).abs() < 1e-15);
        assert!(mse_loss(&x, &Tensor::zeros(&[3, 2, 1])).is_err());

        let out = Reconstruction {
            measurements: x.clone(),
            proxy: x.map(|v| v + 2.0),
            reconstruction: x.map(|v| v + 1.0),
        };
        assert_eq!(loss(&out, &x, 0.0).unwrap(), mse_loss(&out.reconstruction, &x).unwrap());
        assert!((loss(&out, &x, 0.1).unwrap() - 1.4).abs() < 1e-14);
    }

    #[test]
    fn proxy_weight_zero_leaves_no_proxy_gradient() {
        // NB = 0: the reconstruction is the proxy, so with and without the
        // auxiliary term the gradients differ by exactly (1 + lambda).
        let cfg = tiny(0);
        let model: CsModel = CsModel::init(&cfg, 3).unwrap();
        let img = Dataset::synthetic(1, [8, 8], 3, 1).images.remove(0);
        let (_, g0) = loss_and_grad(&model, &img, &img, 0.0).unwrap();
        let (_, g1) = loss_and_grad(&model, &img, &img, 0.5).unwrap();
        for ((_, a), (_, b)) in g0.params().iter().zip(g1.params()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x * 1.5 - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model: CsModel = CsModel::init(&tiny(1), 11).unwrap();
        perturb_params(&mut model, 0.1, 5);
        let img = Dataset::synthetic(1, [8, 8], 3, 2).images.remove(0);
        let (_, g) = loss_and_grad(&model, &img, &img, 0.1).unwrap();
        let fd = finite_difference_grad(&model, &img, &img, 0.1, 1e-4).unwrap();
        for ((name, a), b) in g.params().iter().zip(&fd) {
            let e = relative_error(a, b);
            assert!(e < 1e-5, "{name}: relative error {e}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut model: CsModel = CsModel::init(&tiny(1), 1).unwrap();
        let before = model.clone();
        let mut state = TrainState::new(&model, 0);
        let zero = model.zeros_like();
        for _ in 0..5 {
            adam_step(&mut state, &mut model, &zero, &AdamConfig::default(), 1e-3).unwrap();
        }
        assert_eq!(model, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn adam_rejects_non_finite_and_names_it() {
        let mut model: CsModel = CsModel::init(&tiny(1), 1).unwrap();
        let mut state = TrainState::new(&model, 0);
        let mut grad = model.zeros_like();
        grad.params_mut()[3][0] = f64::NAN;
        let name = grad.params()[3].0.clone();
        let before = model.clone();
        match adam_step(&mut state, &mut model, &grad, &AdamConfig::default(), 1e-3) {
            Err(MtsError::NonFinite { param }) => assert_eq!(param, name),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert_eq!(model, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        // With g fixed, m_hat = g and v_hat = g^2 exactly in exact arithmetic,
        // so each step moves by lr * |g| / (|g| + eps) against the sign of g.
        let hyper = AdamConfig::default();
        for g in [3.0, -0.02, 250.0] {
            let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
            let mut prev = 0.0;
            for step in 1..=200 {
                adam_update(&mut p, &[g], &mut m, &mut v, step, &hyper, 1e-3);
                let d = p[0] - prev;
                prev = p[0];
                let expect = -1e-3 * g / (g.abs() + hyper.eps);
                assert!((d - expect).abs() < 1e-12, "g={g} step={step}: {d} vs {expect}");
            }
        }
    }

    #[test]
    fn schedule_points() {
        let s = CosineRestarts::new(5e-4, 10_000, 1.0).unwrap();
        assert_eq!(s.lr(0), 5e-4);
        assert_eq!(s.lr(10_000), 5e-4);
        assert!((s.lr(5_000) - 5e-4 * (1.0 + (PI / 2.0).cos()) / 2.0).abs() < 1e-18);
        assert_eq!(s.position(25_000), (2, 5_000, 10_000));
        let g = CosineRestarts::new(1.0, 10, 2.0).unwrap();
        assert_eq!(g.position(9), (0, 9, 10));
        assert_eq!(g.position(10), (1, 0, 20));
        assert_eq!(g.position(30), (2, 0, 40));
        assert!(CosineRestarts::new(1.0, 0, 1.0).is_err());
        assert!(CosineRestarts::new(1.0, 5, 0.5).is_err());
    }

    #[test]
    fn crops() {
        let img = Tensor::from_fn(&[5, 6, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let c = crop_at(&img, 1, 2, 2, 3).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.get(&[0, 0, 1]), 121.0);
        assert_eq!(c.get(&[1, 2, 0]), 240.0);
        assert!(crop_at(&img, 4, 0, 2, 2).is_err());
        assert_eq!(center_crop(&img, 3, 4).unwrap().get(&[0, 0, 0]), 110.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(random_crop(&img, 5, 6, &mut rng).unwrap(), img);
        }
    }

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let a = Dataset::synthetic(3, [16, 12], 3, 9);
        assert_eq!(a.images, Dataset::synthetic(3, [16, 12], 3, 9).images);
        assert_ne!(a.images, Dataset::synthetic(3, [16, 12], 3, 10).images);
        for img in &a.images {
            assert_eq!(img.shape(), &[16, 12, 3]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[4.0, 2.0, 6.0, 0.0], 2), vec![4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = tiny(1);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.nb = 2;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            image_size: [12, 12],
            ..tiny(1)
        };
        let cfg = ModelConfig {
            encoder_windows: vec![4, 12],
            refine_windows: vec![4, 12],
            ..cfg
        };
        let data = Dataset::synthetic(5, [16, 16], 3, 4);
        let tc = TrainConfig {
            steps: 6,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train::<f64>(&cfg, &tc, &data, None, |_| {}).unwrap();
        let b = train::<f64>(&cfg, &tc, &data, None, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.state.step, 6);
        assert!(train::<f64>(&cfg, &tc, &Dataset::default(), None, |_| {}).is_err());
    }
}
