//! The RPE regression network: architecture, forward pass, backpropagation
//! and persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Tensor};
use crate::error::{Error, Result};
use crate::image::SliceImage;

pub const DEFAULT_INPUT_SIZE: usize = 128;
pub const DEFAULT_CHANNELS: [usize; 4] = [8, 16, 32, 32];

const MAGIC: &[u8; 4] = b"CBRM";
pub const FORMAT_VERSION: u32 = 1;
const NORMALIZATION: &str = "per_image_standardize";
const MIN_STD: f64 = 1e-12;

/// Layer list plus the expected input grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_size: usize,
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// Stride-2 conv blocks with ReLU, global average pool, one dense unit
    /// and a softplus head.
    pub fn conv_regressor(input_size: usize, channels: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut inputs = 1;
        for &outputs in channels {
            layers.push(Layer::Conv { inputs, outputs });
            layers.push(Layer::Relu);
            inputs = outputs;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense { inputs, outputs: 1 });
        layers.push(Layer::Softplus);
        Self {
            input_size,
            input_channels: 1,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Checks that consecutive layer shapes agree and the output is a scalar.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("network input must be non-empty".into()));
        }
        let mut shape = (self.input_channels, self.input_size, self.input_size);
        for layer in &self.layers {
            let accepts = match *layer {
                Layer::Conv { inputs, .. } => inputs == shape.0,
                Layer::Dense { inputs, .. } => inputs == shape.0 * shape.1 * shape.2,
                _ => true,
            };
            if !accepts {
                return Err(Error::Config(format!(
                    "layer '{layer}' does not accept input of shape {shape:?}"
                )));
            }
            shape = layer.output_shape(shape);
        }
        if shape != (1, 1, 1) {
            return Err(Error::Config(format!("network output shape {shape:?} is not a scalar")));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        let mut s = format!(
            "input {} {} {}\nnormalization {NORMALIZATION}\n",
            self.input_channels, self.input_size, self.input_size
        );
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse_descriptor(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header: Vec<&str> = lines.next().ok_or("empty descriptor")?.split_whitespace().collect();
        let (input_channels, input_size) = match header.as_slice() {
            ["input", c, h, w] if h == w => (
                c.parse().map_err(|_| "bad input channels")?,
                h.parse().map_err(|_| "bad input size")?,
            ),
            _ => return Err("descriptor must start with 'input <c> <n> <n>'".into()),
        };
        match lines.next() {
            Some(l) if l == format!("normalization {NORMALIZATION}") => {}
            other => return Err(format!("unsupported normalization line {other:?}")),
        }
        let layers = lines.map(str::parse).collect::<std::result::Result<Vec<Layer>, _>>()?;
        Ok(Self {
            input_size,
            input_channels,
            layers,
        })
    }
}

/// Parameters and cached activations from one forward pass.
pub struct ForwardPass {
    pub activations: Vec<Tensor>,
}

impl ForwardPass {
    pub fn output(&self) -> f64 {
        self.activations.last().expect("at least the input").data[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorModel {
    architecture: Architecture,
    params: Vec<f64>,
}

impl RegressorModel {
    /// He-uniform weights, zero biases, drawn from a seeded generator.
    /// Parameters are stored at single precision.
    pub fn initialize(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(architecture.param_count());
        for layer in &architecture.layers {
            let limit = (6.0 / layer.fan_in().max(1) as f64).sqrt();
            for _ in 0..layer.weight_count() {
                params.push(rng.gen_range(-limit..limit) as f32 as f64);
            }
            params.extend(std::iter::repeat(0.0).take(layer.param_count() - layer.weight_count()));
        }
        Ok(Self {
            architecture,
            params,
        })
    }

    pub fn default_with_seed(seed: u64) -> Result<Self> {
        Self::initialize(
            Architecture::conv_regressor(DEFAULT_INPUT_SIZE, &DEFAULT_CHANNELS),
            seed,
        )
    }

    pub fn from_parts(architecture: Architecture, params: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.param_count() {
            return Err(Error::Contract(format!(
                "{} weights for an architecture with {} parameters",
                params.len(),
                architecture.param_count()
            )));
        }
        Ok(Self {
            architecture,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn input_size(&self) -> usize {
        self.architecture.input_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the weights and bias of the final dense layer.
    pub fn zero_head(&mut self) {
        let mut offset = 0;
        let mut last = None;
        for layer in &self.architecture.layers {
            if matches!(layer, Layer::Dense { .. }) {
                last = Some((offset, layer.param_count()));
            }
            offset += layer.param_count();
        }
        if let Some((start, len)) = last {
            self.params[start..start + len].fill(0.0);
        }
    }

    /// Resamples to the input grid and standardizes to zero mean and unit
    /// variance.
    pub fn prepare_input(&self, img: &SliceImage) -> Result<Tensor> {
        let n = self.architecture.input_size;
        let resampled;
        let img = if img.size() == n {
            img
        } else {
            resampled = img.resample(n);
            &resampled
        };
        if img.size() != n {
            return Err(Error::Contract(format!(
                "input resampled to {} pixels, network expects {n}",
                img.size()
            )));
        }
        Ok(Tensor::from_vec(1, n, n, standardize(img.pixels())))
    }

    pub fn forward_pass(&self, input: &Tensor) -> ForwardPass {
        let mut activations = Vec::with_capacity(self.architecture.layers.len() + 1);
        activations.push(input.clone());
        let mut offset = 0;
        for layer in &self.architecture.layers {
            let n = layer.param_count();
            let next = layer.forward(&self.params[offset..offset + n], activations.last().unwrap());
            activations.push(next);
            offset += n;
        }
        ForwardPass { activations }
    }

    pub fn forward_tensor(&self, input: &Tensor) -> f64 {
        self.forward_pass(input).output()
    }

    /// Predicted RPE in millimetres.
    pub fn predict(&self, img: &SliceImage) -> Result<f64> {
        Ok(self.forward_tensor(&self.prepare_input(img)?))
    }

    /// Accumulates `d_output · ∂output/∂params` into `grad`. Returns the
    /// gradient with respect to the input when requested.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_output: f64,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Tensor> {
        assert_eq!(grad.len(), self.params.len());
        let layers = &self.architecture.layers;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for l in layers {
            offsets.push(offset);
            offset += l.param_count();
        }
        let mut dy = Tensor::from_vec(1, 1, 1, vec![d_output]);
        for k in (0..layers.len()).rev() {
            let n = layers[k].param_count();
            let range = offsets[k]..offsets[k] + n;
            let need = k > 0 || need_input;
            match layers[k].backward(
                &self.params[range.clone()],
                &pass.activations[k],
                &dy,
                &mut grad[range],
                need,
            ) {
                Some(dx) => dy = dx,
                None => return None,
            }
        }
        Some(dy)
    }

    /// CRC-32 of the little-endian single-precision weights.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.weight_bytes())
    }

    fn weight_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| (*p as f32).to_le_bytes()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    /// Magic, format version, descriptor length and text, weight count,
    /// f32 weights, CRC-32 of the weight bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let descriptor = self.architecture.descriptor();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(descriptor.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let weights = self.weight_bytes();
        out.extend_from_slice(&weights);
        out.extend_from_slice(&crc32fast::hash(&weights).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err("not a regressor model file (bad magic)".into());
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!(
                "model format version {version} is not supported (expected {FORMAT_VERSION})"
            ));
        }
        let len = cursor.u32()? as usize;
        let descriptor = std::str::from_utf8(cursor.take(len)?)
            .map_err(|_| "architecture descriptor is not UTF-8".to_string())?;
        let architecture = Architecture::parse_descriptor(descriptor)?;
        architecture.validate().map_err(|e| e.to_string())?;
        let count = cursor.u32()? as usize;
        if count != architecture.param_count() {
            return Err(format!(
                "file holds {count} weights, architecture needs {}",
                architecture.param_count()
            ));
        }
        let weights = cursor.take(count * 4)?;
        let stored = cursor.u32()?;
        if cursor.pos != bytes.len() {
            return Err("trailing bytes after checksum".into());
        }
        let computed = crc32fast::hash(weights);
        if stored != computed {
            return Err(format!("weight checksum mismatch: stored {stored:08x}, computed {computed:08x}"));
        }
        let params = weights
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            architecture,
            params,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("file truncated at byte {}", self.bytes.len())),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Zero mean, unit variance; constant inputs map to zeros.
pub fn standardize(pixels: &[f64]) -> Vec<f64> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(MIN_STD);
    pixels.iter().map(|p| (p - mean) / std).collect()
}

pub fn save_model(model: &RegressorModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<RegressorModel> {
    RegressorModel::load(path)
}
