//! The sensing/reconstruction network.
//!
//! ```text
//! image -> encoder (MTS, compressive) -> measurements
//!       -> activation -> encoder adjoint -> proxy
//!       -> NB residual MTS blocks -> reconstruction
//! ```
//!
//! Each block is four shape-preserving MTS layers with an activation after
//! the first three, wrapped in a residual connection. The last layer of
//! every block starts at zero, so an untrained refinement stage is the
//! identity.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtsError, Result};
use crate::mts::{MtsGeometry, MtsOperator, WindowRule};
use crate::tensor::{Real, Tensor};

/// Layers per refinement block.
pub const BLOCK_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// Learnable gated unit `x * sigmoid(a_c * x + b_c)` with per-channel
    /// `a` (init 1) and `b` (init 0).
    Mhg,
    Identity,
    Relu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Mhg, ActivationKind::Identity, ActivationKind::Relu];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Mhg => "mhg",
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ActivationKind::Mhg => 0,
            ActivationKind::Identity => 1,
            ActivationKind::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = MtsError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MtsError::config(format!("unknown activation `{s}`")))
    }
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Elementwise activation over the channel (last) mode of an image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T = f64> {
    kind: ActivationKind,
    slope: Vec<T>,
    shift: Vec<T>,
}

impl<T: Real> Activation<T> {
    pub fn new(kind: ActivationKind, channels: usize) -> Self {
        let (slope, shift) = match kind {
            ActivationKind::Mhg => (vec![T::one(); channels], vec![T::zero(); channels]),
            _ => (Vec::new(), Vec::new()),
        };
        Self { kind, slope, shift }
    }

    /// Gated unit with explicit parameters.
    pub fn mhg(slope: Vec<T>, shift: Vec<T>) -> Result<Self> {
        if slope.len() != shift.len() || slope.is_empty() {
            return Err(MtsError::shape("slope and shift must be non-empty and equally long"));
        }
        Ok(Self {
            kind: ActivationKind::Mhg,
            slope,
            shift,
        })
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn slope(&self) -> &[T] {
        &self.slope
    }

    pub fn shift(&self) -> &[T] {
        &self.shift
    }

    pub fn param_count(&self) -> usize {
        self.slope.len() + self.shift.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            slope: vec![T::zero(); self.slope.len()],
            shift: vec![T::zero(); self.shift.len()],
        }
    }

    pub fn cast<U: Real>(&self) -> Activation<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.to_f64().unwrap())).collect();
        Activation {
            kind: self.kind,
            slope: conv(&self.slope),
            shift: conv(&self.shift),
        }
    }

    pub fn params(&self) -> Vec<(String, &[T])> {
        if self.kind == ActivationKind::Mhg {
            vec![("slope".into(), &self.slope[..]), ("shift".into(), &self.shift[..])]
        } else {
            Vec::new()
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        if self.kind == ActivationKind::Mhg {
            vec![&mut self.slope[..], &mut self.shift[..]]
        } else {
            Vec::new()
        }
    }

    #[inline]
    pub fn value(&self, x: T, channel: usize) -> T {
        match self.kind {
            ActivationKind::Identity => x,
            ActivationKind::Relu => x.max(T::zero()),
            ActivationKind::Mhg => x * sigmoid(self.slope[channel] * x + self.shift[channel]),
        }
    }

    /// Derivative with respect to the input.
    #[inline]
    pub fn derivative(&self, x: T, channel: usize) -> T {
        match self.kind {
            ActivationKind::Identity => T::one(),
            ActivationKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Mhg => {
                let a = self.slope[channel];
                let s = sigmoid(a * x + self.shift[channel]);
                s + x * s * (T::one() - s) * a
            }
        }
    }

    fn check_channels(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().expect("non-empty shape");
        if self.kind == ActivationKind::Mhg && c != self.slope.len() {
            return Err(MtsError::shape(format!(
                "activation has {} channels, tensor has {c}",
                self.slope.len()
            )));
        }
        Ok(c)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check_channels(x)?;
        let mut out = x.clone();
        if self.kind != ActivationKind::Identity {
            for px in out.data_mut().chunks_exact_mut(c) {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = self.value(*v, ch);
                }
            }
        }
        Ok(out)
    }

    /// Returns `dx` for upstream gradient `dy` at input `x`, adding the
    /// parameter gradients to `grad`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let c = self.check_channels(x)?;
        if x.shape() != dy.shape() {
            return Err(MtsError::shape("activation gradient shape mismatch"));
        }
        let mut dx = dy.clone();
        match self.kind {
            ActivationKind::Identity => {}
            ActivationKind::Relu => {
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            ActivationKind::Mhg => {
                for (dpx, xpx) in dx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
                    for ch in 0..c {
                        let (xv, g) = (xpx[ch], dpx[ch]);
                        let a = self.slope[ch];
                        let s = sigmoid(a * xv + self.shift[ch]);
                        let ds = s * (T::one() - s);
                        grad.slope[ch] += g * xv * ds * xv;
                        grad.shift[ch] += g * xv * ds;
                        dpx[ch] = g * (s + xv * ds * a);
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Refinement unit: residual stack of four MTS layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsBlock<T = f64> {
    layers: Vec<MtsOperator<T>>,
    activations: Vec<Activation<T>>,
}

/// Intermediate values of one block, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    layer_inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
}

impl<T: Real> MtsBlock<T> {
    pub fn new(layers: Vec<MtsOperator<T>>, activations: Vec<Activation<T>>) -> Result<Self> {
        if layers.len() != BLOCK_LAYERS || activations.len() != BLOCK_LAYERS - 1 {
            return Err(MtsError::config(format!(
                "a block holds {BLOCK_LAYERS} layers and {} activations",
                BLOCK_LAYERS - 1
            )));
        }
        let image = layers[0].input_shape();
        if layers[BLOCK_LAYERS - 1].output_shape() != image {
            return Err(MtsError::config("block must preserve its input shape"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_shape() != pair[1].input_shape() {
                return Err(MtsError::config("block layers do not chain"));
            }
        }
        Ok(Self { layers, activations })
    }

    /// Layers scaled so each keeps unit output variance at init; the last
    /// layer is zero.
    pub fn init(
        image: [usize; 3],
        windows: &[usize],
        terms: usize,
        hidden: usize,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 1.0 / ((windows.len() * terms) as f64).sqrt();
        let widths = [image[2], hidden, hidden, hidden, image[2]];
        let mut layers = Vec::with_capacity(BLOCK_LAYERS);
        for l in 0..BLOCK_LAYERS {
            let geometry =
                MtsGeometry::shape_preserving([image[0], image[1], widths[l]], windows, widths[l + 1])?;
            let layer_gain = if l + 1 == BLOCK_LAYERS { 0.0 } else { gain };
            layers.push(MtsOperator::init(geometry, terms, rng.next_u64(), layer_gain)?);
        }
        let activations = (0..BLOCK_LAYERS - 1)
            .map(|_| Activation::new(activation, hidden))
            .collect();
        Self::new(layers, activations)
    }

    pub fn layers(&self) -> &[MtsOperator<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut MtsOperator<T> {
        &mut self.layers[i]
    }

    pub fn activations(&self) -> &[Activation<T>] {
        &self.activations
    }

    pub fn shape(&self) -> [usize; 3] {
        self.layers[0].input_shape()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MtsOperator::param_count).sum::<usize>()
            + self.activations.iter().map(Activation::param_count).sum::<usize>()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(MtsOperator::zeros_like).collect(),
            activations: self.activations.iter().map(Activation::zeros_like).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> MtsBlock<U> {
        MtsBlock {
            layers: self.layers.iter().map(MtsOperator::cast).collect(),
            activations: self.activations.iter().map(Activation::cast).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params().into_iter().map(|(n, p)| (format!("l{l}.{n}"), p)));
            if let Some(act) = self.activations.get(l) {
                out.extend(act.params().into_iter().map(|(n, p)| (format!("a{l}.{n}"), p)));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        let mut acts = self.activations.iter_mut();
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
            if let Some(act) = acts.next() {
                out.extend(act.params_mut());
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockTrace<T>)> {
        let mut layer_inputs = Vec::with_capacity(BLOCK_LAYERS);
        let mut pre_activations = Vec::with_capacity(BLOCK_LAYERS - 1);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            layer_inputs.push(h);
            h = match self.activations.get(l) {
                Some(act) => {
                    let a = act.forward(&z)?;
                    pre_activations.push(z);
                    a
                }
                None => z,
            };
        }
        h.add_assign(x)?;
        Ok((
            h,
            BlockTrace {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(&self, trace: &BlockTrace<T>, dout: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let mut d = dout.clone();
        for l in (0..BLOCK_LAYERS).rev() {
            if l < BLOCK_LAYERS - 1 {
                d = self.activations[l].backward(&trace.pre_activations[l], &d, &mut grad.activations[l])?;
            }
            d = self.layers[l].backward(&trace.layer_inputs[l], &d, &mut grad.layers[l])?;
        }
        d.add_assign(dout)?;
        Ok(d)
    }
}

/// Architecture hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image height and width the operators are built for.
    pub image_size: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub cr: f64,
    pub encoder_windows: Vec<usize>,
    pub refine_windows: Vec<usize>,
    pub t_encoder: usize,
    pub t_refine: usize,
    pub nb: usize,
    #[serde(default = "default_channels")]
    pub hidden_channels: usize,
    pub activation: ActivationKind,
    #[serde(default = "default_block_activation")]
    pub block_activation: ActivationKind,
    #[serde(default)]
    pub window_rule: WindowRule,
}

fn default_channels() -> usize {
    3
}

fn default_block_activation() -> ActivationKind {
    ActivationKind::Mhg
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: [256, 256],
            channels: 3,
            cr: 0.1,
            encoder_windows: vec![20, 40, 80, 160],
            refine_windows: vec![8, 16, 32, 64],
            t_encoder: 12,
            t_refine: 3,
            nb: 3,
            hidden_channels: 3,
            activation: ActivationKind::Mhg,
            block_activation: ActivationKind::Mhg,
            window_rule: WindowRule::PerMode,
        }
    }
}

impl ModelConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size[0], self.image_size[1], self.channels]
    }

    pub fn encoder_geometry(&self) -> Result<MtsGeometry> {
        MtsGeometry::compressed(
            self.image_shape(),
            &self.encoder_windows,
            self.channels,
            self.cr,
            self.window_rule,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size.contains(&0) || self.channels == 0 || self.hidden_channels == 0 {
            return Err(MtsError::config("image size and channel counts must be positive"));
        }
        if self.t_encoder == 0 || self.t_refine == 0 {
            return Err(MtsError::config("term counts must be at least 1"));
        }
        self.encoder_geometry()?;
        if self.nb > 0 {
            MtsGeometry::shape_preserving(self.image_shape(), &self.refine_windows, self.channels)?;
        }
        Ok(())
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<T> {
    pub measurements: Tensor<T>,
    pub proxy: Tensor<T>,
    pub reconstruction: Tensor<T>,
}

/// Intermediate values of a model forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    image: Tensor<T>,
    measurements: Tensor<T>,
    activated: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    pub output: Reconstruction<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsModel<T = f64> {
    config: ModelConfig,
    encoder: MtsOperator<T>,
    adjoint_activation: Activation<T>,
    blocks: Vec<MtsBlock<T>>,
}

/// Parameter totals per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub adjoint_activation: usize,
    pub blocks: Vec<usize>,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.encoder + self.adjoint_activation + self.blocks.iter().sum::<usize>()
    }
}

impl<T: Real> CsModel<T> {
    pub fn new(
        config: ModelConfig,
        encoder: MtsOperator<T>,
        adjoint_activation: Activation<T>,
        blocks: Vec<MtsBlock<T>>,
    ) -> Result<Self> {
        let shape = config.image_shape();
        if encoder.input_shape() != shape {
            return Err(MtsError::config("encoder input does not match the image shape"));
        }
        if blocks.iter().any(|b| b.shape() != shape) {
            return Err(MtsError::config("refinement block shape does not match the image shape"));
        }
        if blocks.len() != config.nb {
            return Err(MtsError::config(format!(
                "config asks for {} blocks, got {}",
                config.nb,
                blocks.len()
            )));
        }
        Ok(Self {
            config,
            encoder,
            adjoint_activation,
            blocks,
        })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = config.encoder_geometry()?;
        // unit-variance measurements for unit-variance images
        let gain = 1.0 / ((geometry.scales().len() * config.t_encoder) as f64).sqrt();
        let encoder = MtsOperator::init(geometry, config.t_encoder, rng.next_u64(), gain)?;
        let adjoint_activation = Activation::new(config.activation, config.channels);
        let blocks = (0..config.nb)
            .map(|_| {
                MtsBlock::init(
                    config.image_shape(),
                    &config.refine_windows,
                    config.t_refine,
                    config.hidden_channels,
                    config.block_activation,
                    rng.next_u64(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(config.clone(), encoder, adjoint_activation, blocks)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &MtsOperator<T> {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut MtsOperator<T> {
        &mut self.encoder
    }

    pub fn adjoint_activation(&self) -> &Activation<T> {
        &self.adjoint_activation
    }

    pub fn blocks(&self) -> &[MtsBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [MtsBlock<T>] {
        &mut self.blocks
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.config.image_shape()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            encoder: self.encoder.param_count(),
            adjoint_activation: self.adjoint_activation.param_count(),
            blocks: self.blocks.iter().map(MtsBlock::param_count).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_breakdown().total()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            adjoint_activation: self.adjoint_activation.zeros_like(),
            blocks: self.blocks.iter().map(MtsBlock::zeros_like).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> CsModel<U> {
        CsModel {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            adjoint_activation: self.adjoint_activation.cast(),
            blocks: self.blocks.iter().map(MtsBlock::cast).collect(),
        }
    }

    /// Every learnable slice with a dotted name, in a fixed order shared
    /// with [`CsModel::params_mut`].
    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = self
            .encoder
            .params()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        out.extend(
            self.adjoint_activation
                .params()
                .into_iter()
                .map(|(n, p)| (format!("adjoint_activation.{n}"), p)),
        );
        for (b, block) in self.blocks.iter().enumerate() {
            out.extend(block.params().into_iter().map(|(n, p)| (format!("block{b}.{n}"), p)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.encoder.params_mut();
        out.extend(self.adjoint_activation.params_mut());
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        out
    }

    pub fn sense(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward(image)
    }

    pub fn proxy_reconstruct(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.adjoint(&self.adjoint_activation.forward(measurements)?)
    }

    pub fn refine(&self, proxy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = proxy.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// Proxy and refined reconstruction from measurements.
    pub fn decode(&self, measurements: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let proxy = self.proxy_reconstruct(measurements)?;
        let reconstruction = self.refine(&proxy)?;
        Ok((proxy, reconstruction))
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Reconstruction<T>> {
        let measurements = self.sense(image)?;
        let (proxy, reconstruction) = self.decode(&measurements)?;
        Ok(Reconstruction {
            measurements,
            proxy,
            reconstruction,
        })
    }

    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let measurements = self.sense(image)?;
        let activated = self.adjoint_activation.forward(&measurements)?;
        let proxy = self.encoder.adjoint(&activated)?;
        let mut h = proxy.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward_traced(&h)?;
            blocks.push(trace);
            h = out;
        }
        Ok(ForwardTrace {
            image: image.clone(),
            measurements: measurements.clone(),
            activated,
            blocks,
            output: Reconstruction {
                measurements,
                proxy,
                reconstruction: h,
            },
        })
    }

    /// Accumulates parameter gradients given the upstream gradients of the
    /// reconstruction and (optionally) of the proxy.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        d_reconstruction: &Tensor<T>,
        d_proxy: Option<&Tensor<T>>,
        grad: &mut Self,
    ) -> Result<()> {
        let mut d = d_reconstruction.clone();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            d = block.backward(&trace.blocks[b], &d, &mut grad.blocks[b])?;
        }
        if let Some(dp) = d_proxy {
            d.add_assign(dp)?;
        }
        let d_activated = self
            .encoder
            .backward_adjoint(&trace.activated, &d, &mut grad.encoder)?;
        let d_measurements =
            self.adjoint_activation
                .backward(&trace.measurements, &d_activated, &mut grad.adjoint_activation)?;
        self.encoder
            .accumulate_grad(&trace.image, &d_measurements, &mut grad.encoder)
    }
}
