//! Structured linear operators built from sums of mode products.
//!
//! [`GtsOperator`] is the global form: `Y = sum_t S x_1 A_1^(t) ... x_J A_J^(t)`.
//! [`MtsOperator`] applies one GTS operator per window scale to the patch
//! stack of an `H x W x C` image (weights shared across patches), scatters
//! each result back onto the output grid and sums over scales.
//!
//! A window that does not tile the image reflect-pads the input at the
//! bottom and right; the scattered output of every scale is cropped to the
//! common output size. Both steps are linear and appear, with their exact
//! adjoints, in [`MtsOperator::adjoint`] and [`MtsOperator::materialize`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MtsError, Result};
use crate::patching::{
    crop, embed, inverse_embed, reflect_index, reflect_pad, reflect_pad_adjoint, zero_pad,
    PatchConfig,
};
use crate::tensor::{kron_chain, DenseMatrix, Real, Tensor};

/// Largest input dimension [`MtsOperator::materialize`] accepts.
pub const MATERIALIZE_GUARD: usize = 4096;

/// Sum of `T` separable mode-product chains.
#[derive(Clone, Debug, PartialEq)]
pub struct GtsOperator<T = f64> {
    terms: Vec<Vec<DenseMatrix<T>>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl<T: Real> GtsOperator<T> {
    /// Every term must hold one factor per mode with the same shapes as the
    /// first term.
    pub fn new(terms: Vec<Vec<DenseMatrix<T>>>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| MtsError::config("operator needs at least one term"))?;
        if first.is_empty() {
            return Err(MtsError::config("operator needs at least one mode"));
        }
        let input_shape: Vec<_> = first.iter().map(|m| m.cols()).collect();
        let output_shape: Vec<_> = first.iter().map(|m| m.rows()).collect();
        for (t, term) in terms.iter().enumerate() {
            let same = term.len() == first.len()
                && term
                    .iter()
                    .zip(first)
                    .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols());
            if !same {
                return Err(MtsError::config(format!(
                    "term {t} factor shapes differ from term 0"
                )));
            }
        }
        Ok(Self {
            terms,
            input_shape,
            output_shape,
        })
    }

    /// Gaussian factors with standard deviation `1/sqrt(n_j)`; the last
    /// factor of each term is additionally scaled by `gain`.
    pub fn init(
        input_shape: &[usize],
        output_shape: &[usize],
        terms: usize,
        seed: u64,
        gain: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(input_shape, output_shape, terms, &mut rng, gain)
    }

    pub(crate) fn init_with(
        input_shape: &[usize],
        output_shape: &[usize],
        terms: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Result<Self> {
        if input_shape.len() != output_shape.len() || input_shape.is_empty() {
            return Err(MtsError::config("input and output need the same number of modes"));
        }
        if terms == 0 {
            return Err(MtsError::config("operator needs at least one term"));
        }
        let last = input_shape.len() - 1;
        let terms = (0..terms)
            .map(|_| {
                input_shape
                    .iter()
                    .zip(output_shape)
                    .enumerate()
                    .map(|(j, (&n, &m))| {
                        let scale = if j == last { gain } else { 1.0 };
                        gaussian_matrix(rng, m, n, scale / (n as f64).sqrt())
                    })
                    .collect()
            })
            .collect();
        Self::new(terms)
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn mode_count(&self) -> usize {
        self.input_shape.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn terms(&self) -> &[Vec<DenseMatrix<T>>] {
        &self.terms
    }

    pub fn factor(&self, term: usize, mode: usize) -> &DenseMatrix<T> {
        &self.terms[term][mode]
    }

    pub fn factor_mut(&mut self, term: usize, mode: usize) -> &mut DenseMatrix<T> {
        &mut self.terms[term][mode]
    }

    pub fn param_count(&self) -> usize {
        self.terms
            .iter()
            .flatten()
            .map(|m| m.rows() * m.cols())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|term| term.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect())
                .collect(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> GtsOperator<U> {
        GtsOperator {
            terms: self
                .terms
                .iter()
                .map(|term| term.iter().map(cast_matrix).collect())
                .collect(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
        }
    }

    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        expect_shape(s.shape(), &self.input_shape, "GTS input")?;
        let batched = s.clone().reshape(&batched_shape(1, &self.input_shape))?;
        self.forward_batched(&batched)?.reshape(&self.output_shape)
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        expect_shape(y.shape(), &self.output_shape, "GTS adjoint input")?;
        let batched = y.clone().reshape(&batched_shape(1, &self.output_shape))?;
        self.adjoint_batched(&batched)?.reshape(&self.input_shape)
    }

    /// Applies the operator to every slice of a tensor with a leading batch
    /// axis; factor `j` contracts mode `j + 1`.
    pub fn forward_batched(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batched(x, &self.input_shape)?;
        self.apply_batched(x, false)
    }

    pub fn adjoint_batched(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batched(y, &self.output_shape)?;
        self.apply_batched(y, true)
    }

    fn check_batched(&self, x: &Tensor<T>, modes: &[usize]) -> Result<()> {
        if x.ndim() != modes.len() + 1 || &x.shape()[1..] != modes {
            return Err(MtsError::shape(format!(
                "batched operand {:?} does not match modes {modes:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply_batched(&self, x: &Tensor<T>, transposed: bool) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for term in &self.terms {
            let mut z = x.clone();
            for (j, f) in term.iter().enumerate() {
                z = if transposed {
                    z.mode_product_transposed(f, j + 1)?
                } else {
                    z.mode_product(f, j + 1)?
                };
            }
            match acc.as_mut() {
                None => acc = Some(z),
                Some(a) => a.add_assign(&z)?,
            }
        }
        Ok(acc.expect("at least one term"))
    }

    /// Accumulates into `grad` the factor gradients of `<dy, op(x)>`, where
    /// `op` is the batched forward map, or the batched adjoint when
    /// `transposed` is set.
    pub fn accumulate_grad(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        transposed: bool,
        grad: &mut GtsOperator<T>,
    ) -> Result<()> {
        let (xin, xout) = if transposed {
            (&self.output_shape, &self.input_shape)
        } else {
            (&self.input_shape, &self.output_shape)
        };
        self.check_batched(x, xin)?;
        self.check_batched(dy, xout)?;
        if x.shape()[0] != dy.shape()[0] {
            return Err(MtsError::shape("batch sizes differ"));
        }
        let modes = self.mode_count();
        for (term, gterm) in self.terms.iter().zip(grad.terms.iter_mut()) {
            let factors: Vec<DenseMatrix<T>> = if transposed {
                term.iter().map(DenseMatrix::transpose).collect()
            } else {
                term.clone()
            };
            // partial products except mode k, sharing the prefix x_1..x_{k-1}
            let mut prefix = x.clone();
            for k in 0..modes {
                let mut z = prefix.clone();
                for (j, f) in factors.iter().enumerate().skip(k + 1) {
                    z = z.mode_product(f, j + 1)?;
                }
                let g = if transposed {
                    Tensor::mode_gram(&z, dy, k + 1)?
                } else {
                    Tensor::mode_gram(dy, &z, k + 1)?
                };
                accumulate_matrix(&mut gterm[k], &g);
                if k + 1 < modes {
                    prefix = prefix.mode_product(&factors[k], k + 1)?;
                }
            }
        }
        Ok(())
    }

    /// `sum_t A_1^(t) kron ... kron A_J^(t)`.
    pub fn materialize(&self) -> DenseMatrix<T> {
        let mut acc = kron_chain(&self.terms[0]);
        for term in &self.terms[1..] {
            accumulate_matrix(&mut acc, &kron_chain(term));
        }
        acc
    }
}

fn batched_shape(b: usize, modes: &[usize]) -> Vec<usize> {
    std::iter::once(b).chain(modes.iter().copied()).collect()
}

fn expect_shape(found: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if found != expected {
        return Err(MtsError::shape(format!(
            "{what}: expected {expected:?}, found {found:?}"
        )));
    }
    Ok(())
}

fn accumulate_matrix<T: Real>(acc: &mut DenseMatrix<T>, g: &DenseMatrix<T>) {
    debug_assert_eq!((acc.rows(), acc.cols()), (g.rows(), g.cols()));
    acc.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, &b)| *a += b);
}

pub(crate) fn cast_matrix<T: Real, U: Real>(m: &DenseMatrix<T>) -> DenseMatrix<U> {
    DenseMatrix::new(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| U::lit(v.to_f64().unwrap())).collect(),
    )
    .expect("same shape")
}

pub(crate) fn gaussian_matrix<T: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> DenseMatrix<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DenseMatrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(rng)))
}

/// Random `n x n` orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<T: Real>(n: usize, seed: u64) -> DenseMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g: DenseMatrix<f64> = gaussian_matrix(&mut rng, n, n, 1.0);
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
        let mut ok = true;
        for j in 0..n {
            // twice is enough for double precision
            for _ in 0..2 {
                for k in 0..j {
                    let (done, rest) = cols.split_at_mut(j);
                    let proj: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                    rest[0].iter_mut().zip(&done[k]).for_each(|(v, q)| *v -= proj * q);
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return DenseMatrix::from_fn(n, n, |i, j| T::lit(cols[j][i]));
        }
    }
}

/// How compressed output windows are derived from a compression ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowRule {
    /// Each spatial mode of the measurement grid is `round(n * sqrt(cr))`,
    /// so the element ratio matches `cr` up to rounding.
    #[default]
    PerMode,
    /// The literal `w_hat = round(sqrt(w * cr))` per scale; the measurement
    /// grid is the smallest scale output.
    Literal,
}

/// Window and output-window sizes of one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleGeometry {
    pub window: usize,
    pub out_window: [usize; 2],
    /// Window grid rows and columns (after padding the input up to a multiple).
    pub grid: [usize; 2],
}

impl ScaleGeometry {
    pub fn padded_input(&self) -> [usize; 2] {
        [self.grid[0] * self.window, self.grid[1] * self.window]
    }

    pub fn padded_output(&self) -> [usize; 2] {
        [
            self.grid[0] * self.out_window[0],
            self.grid[1] * self.out_window[1],
        ]
    }

    pub fn patch_count(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

/// Shape bookkeeping for an [`MtsOperator`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtsGeometry {
    input: [usize; 3],
    output: [usize; 3],
    scales: Vec<ScaleGeometry>,
}

fn validate_windows(windows: &[usize]) -> Result<()> {
    if windows.is_empty() {
        return Err(MtsError::config("at least one window scale is required"));
    }
    if windows[0] == 0 || windows.windows(2).any(|p| p[0] >= p[1]) {
        return Err(MtsError::config(format!(
            "windows must be positive and strictly increasing, got {windows:?}"
        )));
    }
    Ok(())
}

fn validate_dims(dims: &[usize; 3], what: &str) -> Result<()> {
    if dims.contains(&0) {
        return Err(MtsError::config(format!("{what} dimensions must be positive")));
    }
    Ok(())
}

impl MtsGeometry {
    /// Geometry with an explicit output shape; each scale's output window is
    /// the smallest size whose grid covers the output.
    pub fn with_output(input: [usize; 3], windows: &[usize], output: [usize; 3]) -> Result<Self> {
        validate_windows(windows)?;
        validate_dims(&input, "input")?;
        validate_dims(&output, "output")?;
        let scales = windows
            .iter()
            .map(|&w| {
                let grid = [input[0].div_ceil(w), input[1].div_ceil(w)];
                ScaleGeometry {
                    window: w,
                    out_window: [output[0].div_ceil(grid[0]), output[1].div_ceil(grid[1])],
                    grid,
                }
            })
            .collect();
        Ok(Self {
            input,
            output,
            scales,
        })
    }

    /// Output spatial size equals the input's; channels may change.
    pub fn shape_preserving(input: [usize; 3], windows: &[usize], channels_out: usize) -> Result<Self> {
        Self::with_output(input, windows, [input[0], input[1], channels_out])
    }

    /// Geometry of a compressive map at ratio `cr` in `(0, 1]`.
    pub fn compressed(
        input: [usize; 3],
        windows: &[usize],
        channels_out: usize,
        cr: f64,
        rule: WindowRule,
    ) -> Result<Self> {
        validate_windows(windows)?;
        validate_dims(&input, "input")?;
        if !(cr > 0.0 && cr <= 1.0) {
            return Err(MtsError::config(format!("compression ratio {cr} outside (0, 1]")));
        }
        match rule {
            WindowRule::PerMode => {
                let side = |n: usize| ((n as f64 * cr.sqrt()).round() as usize).clamp(1, n);
                Self::with_output(input, windows, [side(input[0]), side(input[1]), channels_out])
            }
            WindowRule::Literal => {
                let mut out = [usize::MAX, usize::MAX];
                let scales: Vec<_> = windows
                    .iter()
                    .map(|&w| {
                        let wh = ((w as f64 * cr).sqrt().round() as usize).max(1);
                        let grid = [input[0].div_ceil(w), input[1].div_ceil(w)];
                        out[0] = out[0].min(grid[0] * wh);
                        out[1] = out[1].min(grid[1] * wh);
                        ScaleGeometry {
                            window: w,
                            out_window: [wh, wh],
                            grid,
                        }
                    })
                    .collect();
                Ok(Self {
                    input,
                    output: [out[0], out[1], channels_out],
                    scales,
                })
            }
        }
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn output(&self) -> [usize; 3] {
        self.output
    }

    pub fn scales(&self) -> &[ScaleGeometry] {
        &self.scales
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn measurement_count(&self) -> usize {
        self.output.iter().product()
    }

    pub fn achieved_cr(&self) -> f64 {
        self.measurement_count() as f64 / self.input_len() as f64
    }

    /// Per-scale patch modes `(in, out)` for the scale's GTS operator.
    pub fn scale_modes(&self, sc: usize) -> ([usize; 3], [usize; 3]) {
        let s = &self.scales[sc];
        (
            [s.window, s.window, self.input[2]],
            [s.out_window[0], s.out_window[1], self.output[2]],
        )
    }

    fn padded_in_cfg(&self, sc: usize) -> PatchConfig {
        let s = &self.scales[sc];
        let [h, w] = s.padded_input();
        PatchConfig::square(s.window, h, w, self.input[2]).expect("consistent geometry")
    }

    fn padded_out_cfg(&self, sc: usize) -> PatchConfig {
        let s = &self.scales[sc];
        let [h, w] = s.padded_output();
        PatchConfig::new(s.out_window[0], s.out_window[1], h, w, self.output[2])
            .expect("consistent geometry")
    }
}

/// Multiscale patch-wise sum of GTS operators.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsOperator<T = f64> {
    geometry: MtsGeometry,
    scales: Vec<GtsOperator<T>>,
}

impl<T: Real> MtsOperator<T> {
    pub fn new(geometry: MtsGeometry, scales: Vec<GtsOperator<T>>) -> Result<Self> {
        if scales.len() != geometry.scales.len() {
            return Err(MtsError::config(format!(
                "{} scale operators for {} windows",
                scales.len(),
                geometry.scales.len()
            )));
        }
        for (sc, gts) in scales.iter().enumerate() {
            let (inp, out) = geometry.scale_modes(sc);
            if gts.input_shape() != inp || gts.output_shape() != out {
                return Err(MtsError::config(format!(
                    "scale {sc}: operator maps {:?} -> {:?}, geometry needs {inp:?} -> {out:?}",
                    gts.input_shape(),
                    gts.output_shape()
                )));
            }
        }
        Ok(Self { geometry, scales })
    }

    /// Builds every factor with `f(scale, term, mode, rows, cols)`.
    pub fn from_fn(
        geometry: MtsGeometry,
        terms: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> DenseMatrix<T>,
    ) -> Result<Self> {
        if terms == 0 {
            return Err(MtsError::config("operator needs at least one term"));
        }
        let scales = (0..geometry.scales.len())
            .map(|sc| {
                let (inp, out) = geometry.scale_modes(sc);
                let ts = (0..terms)
                    .map(|t| (0..3).map(|j| f(sc, t, j, out[j], inp[j])).collect())
                    .collect();
                GtsOperator::new(ts)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(geometry, scales)
    }

    /// Gaussian initialization, deterministic in `seed`.
    pub fn init(geometry: MtsGeometry, terms: usize, seed: u64, gain: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales = (0..geometry.scales.len())
            .map(|sc| {
                let (inp, out) = geometry.scale_modes(sc);
                GtsOperator::init_with(&inp, &out, terms, &mut rng, gain)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(geometry, scales)
    }

    pub fn geometry(&self) -> &MtsGeometry {
        &self.geometry
    }

    pub fn scales(&self) -> &[GtsOperator<T>] {
        &self.scales
    }

    pub fn scale_mut(&mut self, sc: usize) -> &mut GtsOperator<T> {
        &mut self.scales[sc]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.geometry.input
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.geometry.output
    }

    pub fn term_count(&self) -> usize {
        self.scales[0].term_count()
    }

    pub fn measurement_count(&self) -> usize {
        self.geometry.measurement_count()
    }

    pub fn achieved_cr(&self) -> f64 {
        self.geometry.achieved_cr()
    }

    pub fn param_count(&self) -> usize {
        self.scales.iter().map(GtsOperator::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            geometry: self.geometry.clone(),
            scales: self.scales.iter().map(GtsOperator::zeros_like).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> MtsOperator<U> {
        MtsOperator {
            geometry: self.geometry.clone(),
            scales: self.scales.iter().map(GtsOperator::cast).collect(),
        }
    }

    /// Factor slices tagged `s{scale}.t{term}.m{mode}`, in storage order.
    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (sc, gts) in self.scales.iter().enumerate() {
            for (t, term) in gts.terms.iter().enumerate() {
                for (j, m) in term.iter().enumerate() {
                    out.push((format!("s{sc}.t{t}.m{j}"), m.data()));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.scales
            .iter_mut()
            .flat_map(|g| g.terms.iter_mut().flatten())
            .map(DenseMatrix::data_mut)
            .collect()
    }

    fn expect_input(&self, x: &Tensor<T>) -> Result<()> {
        expect_shape(x.shape(), &self.geometry.input, "MTS input")
    }

    fn expect_output(&self, y: &Tensor<T>) -> Result<()> {
        expect_shape(y.shape(), &self.geometry.output, "MTS measurement")
    }

    fn input_patches(&self, sc: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w] = self.geometry.scales[sc].padded_input();
        embed(&reflect_pad(x, h, w)?, &self.geometry.padded_in_cfg(sc))
    }

    fn output_patches(&self, sc: usize, y: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w] = self.geometry.scales[sc].padded_output();
        embed(&zero_pad(y, h, w)?, &self.geometry.padded_out_cfg(sc))
    }

    fn scatter_output(&self, sc: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, _] = self.geometry.output;
        crop(&inverse_embed(q, &self.geometry.padded_out_cfg(sc))?, h, w)
    }

    fn scatter_input(&self, sc: usize, p: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, _] = self.geometry.input;
        reflect_pad_adjoint(&inverse_embed(p, &self.geometry.padded_in_cfg(sc))?, h, w)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_input(x)?;
        let mut acc: Option<Tensor<T>> = None;
        for (sc, gts) in self.scales.iter().enumerate() {
            let q = gts.forward_batched(&self.input_patches(sc, x)?)?;
            let y = self.scatter_output(sc, &q)?;
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => a.add_assign(&y)?,
            }
        }
        Ok(acc.expect("at least one scale"))
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_output(y)?;
        let mut acc: Option<Tensor<T>> = None;
        for (sc, gts) in self.scales.iter().enumerate() {
            let p = gts.adjoint_batched(&self.output_patches(sc, y)?)?;
            let x = self.scatter_input(sc, &p)?;
            match acc.as_mut() {
                None => acc = Some(x),
                Some(a) => a.add_assign(&x)?,
            }
        }
        Ok(acc.expect("at least one scale"))
    }

    /// Backward pass of `y = forward(x)`: returns `dx` and adds the factor
    /// gradients to `grad`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        self.accumulate_grad(x, dy, grad)?;
        self.adjoint(dy)
    }

    /// Factor gradients of `<dy, forward(x)>`, added to `grad`.
    pub fn accumulate_grad(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<()> {
        self.expect_input(x)?;
        self.expect_output(dy)?;
        for (sc, gts) in self.scales.iter().enumerate() {
            let p = self.input_patches(sc, x)?;
            let dq = self.output_patches(sc, dy)?;
            gts.accumulate_grad(&p, &dq, false, &mut grad.scales[sc])?;
        }
        Ok(())
    }

    /// Backward pass of `x = adjoint(y)`: returns `dy` and adds the factor
    /// gradients to `grad`.
    pub fn backward_adjoint(&self, y: &Tensor<T>, dx: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        self.expect_output(y)?;
        self.expect_input(dx)?;
        for (sc, gts) in self.scales.iter().enumerate() {
            let q = self.output_patches(sc, y)?;
            let dp = self.input_patches(sc, dx)?;
            gts.accumulate_grad(&q, &dp, true, &mut grad.scales[sc])?;
        }
        self.forward(dx)
    }

    /// Dense `m x N` matrix of the operator, assembled scale by scale as
    /// `crop * unembed * (I_B kron sum_t A_1 kron A_2 kron A_3) * embed * pad`.
    /// The embedding, padding and crop stages are index maps, so each block
    /// entry is scattered straight to its row and column.
    pub fn materialize(&self) -> Result<DenseMatrix<T>> {
        let n = self.geometry.input_len();
        if n > MATERIALIZE_GUARD {
            return Err(MtsError::SizeGuard {
                dim: n,
                guard: MATERIALIZE_GUARD,
            });
        }
        let [ih, iw, ic] = self.geometry.input;
        let [oh, ow, oc] = self.geometry.output;
        let mut p = DenseMatrix::zeros(self.geometry.measurement_count(), n);
        for (sc, gts) in self.scales.iter().enumerate() {
            let block = gts.materialize();
            let in_cfg = self.geometry.padded_in_cfg(sc);
            let out_cfg = self.geometry.padded_out_cfg(sc);
            let in_map = in_cfg.patch_major_index();
            let out_map = out_cfg.patch_major_index();
            // padded input offset -> source column
            let col_of: Vec<usize> = (0..in_map.len())
                .map(|off| {
                    let c = off % ic;
                    let j = (off / ic) % in_cfg.in_width;
                    let i = off / (ic * in_cfg.in_width);
                    (reflect_index(i, ih) * iw + reflect_index(j, iw)) * ic + c
                })
                .collect();
            // padded output offset -> row, or None when cropped away
            let row_of: Vec<Option<usize>> = (0..out_map.len())
                .map(|off| {
                    let c = off % oc;
                    let j = (off / oc) % out_cfg.in_width;
                    let i = off / (oc * out_cfg.in_width);
                    (i < oh && j < ow).then(|| (i * ow + j) * oc + c)
                })
                .collect();
            let (bin, bout) = (block.cols(), block.rows());
            for b in 0..in_cfg.patch_count() {
                for ko in 0..bout {
                    let Some(row) = row_of[out_map[b * bout + ko]] else {
                        continue;
                    };
                    for ki in 0..bin {
                        let col = col_of[in_map[b * bin + ki]];
                        let v = p.get(row, col) + block.get(ko, ki);
                        p.set(row, col, v);
                    }
                }
            }
        }
        Ok(p)
    }
}
