//! Files: run configuration, checkpoints, measurement and tensor files, PNG
//! images. Every writer goes through [`atomic_write`].
//!
//! All binary formats are little-endian. Integers are `u32` unless noted,
//! floats are `f32` or `f64` as given by the width byte.
//!
//! Checkpoint (`MTSCSCKP`, version 1):
//!
//! ```text
//! magic[8] version u8:width u32:json_len json(ModelConfig)
//! u32:nb u32:layers_per_block
//! operator(encoder) activation(adjoint)
//! nb x { 4 x operator, 3 x activation }
//!
//! operator   = u32:scales u32:terms
//!              scales*terms*3 x { u32:scale u32:term u32:mode u32:rows u32:cols rows*cols floats }
//! activation = u8:kind u32:channels [channels floats slope, channels floats shift if kind = mhg]
//! ```
//!
//! Measurement file (`MTSCSMEA`, version 1):
//!
//! ```text
//! magic[8] version f64:cr 3 x u32:input_shape
//! u32:scales scales x { u32:window u32:out_h u32:out_w u32:grid_h u32:grid_w }
//! 3 x u32:shape u8:width payload
//! ```
//!
//! Tensor file (`MTSCSTEN`, version 1): `magic[8] version u8:width u32:ndim ndim x u32 payload`.

use std::path::{Path, PathBuf};

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{MtsError, Result};
use crate::mts::{GtsOperator, MtsGeometry, MtsOperator, ScaleGeometry};
use crate::network::{Activation, ActivationKind, CsModel, MtsBlock, ModelConfig, BLOCK_LAYERS};
use crate::tensor::{DenseMatrix, Real, Tensor};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTSCSCKP";
pub const MEASUREMENT_MAGIC: &[u8; 8] = b"MTSCSMEA";
pub const TENSOR_MAGIC: &[u8; 8] = b"MTSCSTEN";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MEASUREMENT_VERSION: u32 = 1;
pub const TENSOR_VERSION: u32 = 1;
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Relative dataset directories are resolved against this variable when set.
pub const DATA_ROOT_ENV: &str = "MTSCS_DATA_ROOT";

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MtsError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| MtsError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| MtsError::io(path, e))?;
    tmp.persist(path).map_err(|e| MtsError::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| MtsError::io(path, e))
}

/// Decodes an image to `[0, 1]` floats with `channels` (1 or 3) channels.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|source| MtsError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        c => return Err(MtsError::config(format!("images must have 1 or 3 channels, not {c}"))),
    };
    Tensor::new(vec![h, w, channels], data)
}

/// Clamps to `[0, 1]`, quantises to 8 bits and writes a PNG.
pub fn save_png<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MtsError::shape(format!("expected H x W x C image, got {s:?}"))),
    };
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(MtsError::shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|source| MtsError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    atomic_write(path, &out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Every image file in a directory.
    Dir { path: PathBuf },
    /// Generated textures.
    Synthetic {
        count: usize,
        size: [usize; 2],
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self, channels: usize) -> Result<crate::train::Dataset> {
        match self {
            DataSource::Dir { path } => crate::train::Dataset::from_dir(&resolve_data_path(path), channels),
            DataSource::Synthetic { count, size, seed } => {
                if *count == 0 {
                    return Err(MtsError::EmptyDataset);
                }
                Ok(crate::train::Dataset::synthetic(*count, *size, channels, *seed))
            }
        }
    }
}

fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

/// Everything a training run needs, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MtsError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MtsError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MtsError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(MtsError::Version {
                what: "config schema",
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        let m = &self.model;
        for (name, w) in [("encoder_windows", &m.encoder_windows), ("refine_windows", &m.refine_windows)] {
            if w.is_empty() || w[0] == 0 || w.windows(2).any(|p| p[0] >= p[1]) {
                return Err(MtsError::config(format!("{name} must be positive and strictly increasing")));
            }
        }
        m.validate()?;
        self.train.validate()
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Writer { buf: magic.to_vec() };
        w.u32(version as usize);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn floats<T: Real>(&mut self, v: &[T]) {
        v.iter().for_each(|&x| x.write_le(&mut self.buf));
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, bytes: &'a [u8], magic: &[u8; 8], what: &'static str, version: u32) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(8)? != magic {
            return Err(MtsError::format(path, format!("not a {what} file (bad magic)")));
        }
        let found = r.u32()?;
        if found != version as usize {
            return Err(MtsError::Version {
                what,
                found: found as u32,
                expected: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MtsError::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn width(&mut self) -> Result<usize> {
        match self.u8()? {
            w @ (4 | 8) => Ok(w as usize),
            w => Err(MtsError::format(self.path, format!("unsupported float width {w}"))),
        }
    }

    /// `n` floats stored at `width` bytes, converted to `T`.
    fn floats<T: Real>(&mut self, width: usize, n: usize) -> Result<Vec<T>> {
        let len = n
            .checked_mul(width)
            .ok_or_else(|| MtsError::format(self.path, "payload size overflows"))?;
        let raw = self.take(len)?;
        Ok(match width {
            4 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            _ => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        })
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(MtsError::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn write_operator<T: Real>(w: &mut Writer, op: &MtsOperator<T>) {
    w.u32(op.scales().len());
    w.u32(op.term_count());
    for (sc, g) in op.scales().iter().enumerate() {
        for (t, term) in g.terms().iter().enumerate() {
            for (j, m) in term.iter().enumerate() {
                for v in [sc, t, j, m.rows(), m.cols()] {
                    w.u32(v);
                }
                w.floats(m.data());
            }
        }
    }
}

fn read_operator<T: Real>(r: &mut Reader, width: usize, expect: &MtsOperator<f64>) -> Result<MtsOperator<T>> {
    let (scales, terms) = (r.u32()?, r.u32()?);
    if scales != expect.scales().len() || terms != expect.term_count() {
        return Err(MtsError::format(
            r.path,
            format!("operator has {scales} scales x {terms} terms, config implies {} x {}",
                expect.scales().len(), expect.term_count()),
        ));
    }
    let mut gts = Vec::with_capacity(scales);
    for (sc, g) in expect.scales().iter().enumerate() {
        let mut term_list = Vec::with_capacity(terms);
        for t in 0..terms {
            let mut factors = Vec::with_capacity(g.mode_count());
            for j in 0..g.mode_count() {
                let m = g.factor(t, j);
                let tag = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                if tag != [sc, t, j, m.rows(), m.cols()] {
                    return Err(MtsError::format(
                        r.path,
                        format!("factor tag {tag:?} where (scale {sc}, term {t}, mode {j}, {}x{}) was expected",
                            m.rows(), m.cols()),
                    ));
                }
                factors.push(DenseMatrix::new(m.rows(), m.cols(), r.floats(width, m.rows() * m.cols())?)?);
            }
            term_list.push(factors);
        }
        gts.push(GtsOperator::new(term_list)?);
    }
    MtsOperator::new(expect.geometry().clone(), gts)
}

fn write_activation<T: Real>(w: &mut Writer, a: &Activation<T>) {
    w.u8(a.kind().code());
    w.u32(a.slope().len());
    if a.kind() == ActivationKind::Mhg {
        w.floats(a.slope());
        w.floats(a.shift());
    }
}

fn read_activation<T: Real>(r: &mut Reader, width: usize, expect: &Activation<f64>) -> Result<Activation<T>> {
    let code = r.u8()?;
    let kind = ActivationKind::from_code(code)
        .ok_or_else(|| MtsError::format(r.path, format!("unknown activation code {code}")))?;
    let channels = r.u32()?;
    if kind != expect.kind() || channels != expect.slope().len() {
        return Err(MtsError::format(
            r.path,
            format!("activation {} over {channels} channels disagrees with the config", kind.name()),
        ));
    }
    if kind == ActivationKind::Mhg {
        let slope = r.floats(width, channels)?;
        let shift = r.floats(width, channels)?;
        Activation::mhg(slope, shift)
    } else {
        Ok(Activation::new(kind, channels))
    }
}

pub fn encode_checkpoint<T: Real>(model: &CsModel<T>) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.u8(T::BYTES as u8);
    let json = serde_json::to_vec(model.config()).expect("model config serializes");
    w.u32(json.len());
    w.buf.extend_from_slice(&json);
    w.u32(model.blocks().len());
    w.u32(BLOCK_LAYERS);
    write_operator(&mut w, model.encoder());
    write_activation(&mut w, model.adjoint_activation());
    for block in model.blocks() {
        block.layers().iter().for_each(|l| write_operator(&mut w, l));
        block.activations().iter().for_each(|a| write_activation(&mut w, a));
    }
    w.buf
}

/// Parses a checkpoint stored at either float width into `T`.
pub fn decode_checkpoint<T: Real>(path: &Path, bytes: &[u8]) -> Result<CsModel<T>> {
    let mut r = Reader::open(path, bytes, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
    let width = r.width()?;
    let json_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| MtsError::format(path, format!("config echo: {e}")))?;
    let (nb, layers) = (r.u32()?, r.u32()?);
    if nb != config.nb || layers != BLOCK_LAYERS {
        return Err(MtsError::format(
            path,
            format!("{nb} blocks of {layers} layers stored, config implies {} of {BLOCK_LAYERS}", config.nb),
        ));
    }
    // Shapes come from a model built from the echoed config.
    let skeleton: CsModel<f64> = CsModel::init(&config, 0)
        .map_err(|e| MtsError::format(path, format!("config echo: {e}")))?;
    let encoder = read_operator(&mut r, width, skeleton.encoder())?;
    let adjoint_activation = read_activation(&mut r, width, skeleton.adjoint_activation())?;
    let mut blocks = Vec::with_capacity(nb);
    for sk in skeleton.blocks() {
        let layers = sk
            .layers()
            .iter()
            .map(|l| read_operator(&mut r, width, l))
            .collect::<Result<Vec<_>>>()?;
        let acts = sk
            .activations()
            .iter()
            .map(|a| read_activation(&mut r, width, a))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(MtsBlock::new(layers, acts)?);
    }
    r.finish()?;
    CsModel::new(config, encoder, adjoint_activation, blocks)
}

pub fn write_checkpoint<T: Real>(path: &Path, model: &CsModel<T>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<CsModel<T>> {
    decode_checkpoint(path, &read_file(path)?)
}

/// Measurements of one image together with the geometry that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFile<T = f64> {
    pub cr: f64,
    pub input: [usize; 3],
    pub scales: Vec<ScaleGeometry>,
    pub data: Tensor<T>,
}

impl<T: Real> MeasurementFile<T> {
    pub fn new(geometry: &MtsGeometry, data: Tensor<T>) -> Result<Self> {
        if data.shape() != geometry.output() {
            return Err(MtsError::shape(format!(
                "measurements {:?} do not match operator output {:?}",
                data.shape(),
                geometry.output()
            )));
        }
        Ok(Self {
            cr: geometry.achieved_cr(),
            input: geometry.input(),
            scales: geometry.scales().to_vec(),
            data,
        })
    }

    /// Errors unless these measurements came from an operator with `geometry`.
    pub fn check_geometry(&self, geometry: &MtsGeometry) -> Result<()> {
        if self.input != geometry.input()
            || self.scales != geometry.scales()
            || self.data.shape() != geometry.output()
        {
            return Err(MtsError::shape(
                "measurement geometry does not match the checkpoint's encoder",
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(MEASUREMENT_MAGIC, MEASUREMENT_VERSION);
        w.f64(self.cr);
        self.input.iter().for_each(|&d| w.u32(d));
        w.u32(self.scales.len());
        for s in &self.scales {
            for v in [s.window, s.out_window[0], s.out_window[1], s.grid[0], s.grid[1]] {
                w.u32(v);
            }
        }
        self.data.shape().iter().for_each(|&d| w.u32(d));
        w.u8(T::BYTES as u8);
        w.floats(self.data.data());
        w.buf
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(path, bytes, MEASUREMENT_MAGIC, "measurement", MEASUREMENT_VERSION)?;
        let cr = r.f64()?;
        let input = [r.u32()?, r.u32()?, r.u32()?];
        let n = r.u32()?;
        let mut scales = Vec::new();
        for _ in 0..n {
            let v = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            scales.push(ScaleGeometry {
                window: v[0],
                out_window: [v[1], v[2]],
                grid: [v[3], v[4]],
            });
        }
        let shape = vec![r.u32()?, r.u32()?, r.u32()?];
        let width = r.width()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| MtsError::format(path, "shape overflows"))?;
        let payload = r.floats(width, count)?;
        r.finish()?;
        Ok(Self {
            cr,
            input,
            scales,
            data: Tensor::new(shape, payload)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(path, &read_file(path)?)
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut w = Writer::new(TENSOR_MAGIC, TENSOR_VERSION);
    w.u8(T::BYTES as u8);
    w.u32(t.ndim());
    t.shape().iter().for_each(|&d| w.u32(d));
    w.floats(t.data());
    w.buf
}

pub fn decode_tensor<T: Real>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::open(path, bytes, TENSOR_MAGIC, "tensor", TENSOR_VERSION)?;
    let width = r.width()?;
    let ndim = r.u32()?;
    let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| MtsError::format(path, "shape overflows"))?;
    let data = r.floats(width, count)?;
    r.finish()?;
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    atomic_write(path, &encode_tensor(t))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::perturb_params;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: [8, 8],
            cr: 0.5,
            encoder_windows: vec![4, 8],
            refine_windows: vec![4, 8],
            t_encoder: 2,
            t_refine: 1,
            nb: 2,
            ..ModelConfig::default()
        }
    }

    const EXAMPLE: &str = r#"
schema_version = 1
precision = "f64"

[model]
image_size = [32, 32]
cr = 0.3
encoder_windows = [4, 8, 16, 32]
refine_windows = [4, 8, 16]
t_encoder = 4
t_refine = 2
nb = 1
activation = "mhg"

[train]
steps = 10
batch = 2
lr = 0.0005
seed = 7

[data.train]
kind = "synthetic"
count = 4
size = [32, 32]
seed = 1

[data.eval]
kind = "dir"
path = "images/eval"

[output]
checkpoint = "out/model.ckpt"
log = "out/train.jsonl"
"#;

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.model.encoder_windows, vec![4, 8, 16, 32]);
        assert_eq!(cfg.train.proxy_weight, 0.1);
        assert_eq!(cfg.train.cycle_steps, 10_000);
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn config_rejects_bad_input() {
        let unknown = EXAMPLE.replace("nb = 1", "nb = 1\nblocks = 2");
        assert!(matches!(RunConfig::from_toml(&unknown), Err(MtsError::Config(_))));
        let unknown_data = EXAMPLE.replace("seed = 1", "seed = 1\ncolour = true");
        assert!(RunConfig::from_toml(&unknown_data).is_err());
        let version = EXAMPLE.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(RunConfig::from_toml(&version), Err(MtsError::Version { .. })));
        let order = EXAMPLE.replace("[4, 8, 16, 32]", "[4, 16, 8, 32]");
        assert!(RunConfig::from_toml(&order).is_err());
        let cr = EXAMPLE.replace("cr = 0.3", "cr = 1.5");
        assert!(RunConfig::from_toml(&cr).is_err());
        let terms = EXAMPLE.replace("t_refine = 2", "t_refine = 0");
        assert!(RunConfig::from_toml(&terms).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model: CsModel = CsModel::init(&tiny(), 4).unwrap();
        perturb_params(&mut model, 0.1, 2);
        let bytes = encode_checkpoint(&model);
        let back: CsModel = decode_checkpoint(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back), bytes);

        let narrow: CsModel<f32> = model.cast();
        let wide: CsModel = decode_checkpoint(Path::new("mem"), &encode_checkpoint(&narrow)).unwrap();
        assert_eq!(wide, narrow.cast());
    }

    #[test]
    fn checkpoint_errors() {
        let model: CsModel = CsModel::init(&tiny(), 4).unwrap();
        let bytes = encode_checkpoint(&model);
        let p = Path::new("mem");
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f64>(p, &bytes[..cut]), Err(MtsError::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(p, &bad), Err(MtsError::Format { .. })));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(decode_checkpoint::<f64>(p, &ver), Err(MtsError::Version { found: 9, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint::<f64>(p, &long).is_err());
    }

    #[test]
    fn measurement_round_trip_and_errors() {
        let model: CsModel = CsModel::init(&tiny(), 1).unwrap();
        let img = Tensor::from_fn(&[8, 8, 3], |i| (i[0] * 24 + i[1] * 3 + i[2]) as f64 / 191.0);
        let mf = MeasurementFile::new(model.encoder().geometry(), model.sense(&img).unwrap()).unwrap();
        let bytes = mf.encode();
        let p = Path::new("mem");
        let back = MeasurementFile::<f64>::decode(p, &bytes).unwrap();
        assert_eq!(back, mf);
        back.check_geometry(model.encoder().geometry()).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(MeasurementFile::<f64>::decode(p, &bytes[..cut]), Err(MtsError::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[7] = 0;
        assert!(MeasurementFile::<f64>::decode(p, &bad).is_err());

        let other: CsModel = CsModel::init(&ModelConfig { cr: 0.25, ..tiny() }, 1).unwrap();
        assert!(back.check_geometry(other.encoder().geometry()).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] as f64 - 0.5) * (i[1] + i[2]) as f64 / 3.0);
        let back: Tensor = decode_tensor(Path::new("mem"), &encode_tensor(&t)).unwrap();
        assert_eq!(back, t);
        let bytes = encode_tensor(&t);
        assert!(decode_tensor::<f64>(Path::new("mem"), &bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn files_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[5, 7, 3], |i| ((i[0] * 7 + i[1]) * 3 + i[2]) as f64 / 104.0);
        let png = dir.path().join("a.png");
        save_png(&png, &img).unwrap();
        let back = load_image(&png, 3).unwrap();
        assert_eq!(back.shape(), &[5, 7, 3]);
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
        assert_eq!(load_image(&png, 1).unwrap().shape(), &[5, 7, 1]);

        let ckpt = dir.path().join("m.ckpt");
        let model: CsModel = CsModel::init(&tiny(), 2).unwrap();
        write_checkpoint(&ckpt, &model).unwrap();
        assert_eq!(read_checkpoint::<f64>(&ckpt).unwrap(), model);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
        assert!(matches!(
            read_checkpoint::<f64>(&dir.path().join("missing")),
            Err(MtsError::Io { .. })
        ));
    }
}
