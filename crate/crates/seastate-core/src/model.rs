//! Classifier assembly over interchangeable backbones: the architecture spec
//! table, head construction, stage-wise freezing, parameter accounting, and
//! the versioned bundle format trained models are exported in.
//!
//! The four production backbones are consumed as opaque pretrained assets (a
//! registry maps architecture name to a hash-verified weight bundle); their
//! internals are out of scope. A tiny procedurally-initialized surrogate
//! backbone sits behind the same interface so every training/evaluation path
//! is exercisable without multi-gigabyte assets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4};
use sha2::{Digest, Sha256};

use crate::dataset::LabelRange;
use crate::error::{Error, Result};
use crate::img::{hw, Image};
use crate::nn::{
    softmax, AvgPool2d, Conv2d, Dense, Gelu, GlobalAvgPool, Layer, ParamPair, Relu, Tensor,
};
use crate::rng::{derive, tag};

// ---------------------------------------------------------------------------
// Architectures and specs
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet101,
    VitB32,
    MobilenetV2,
    NasnetMobile,
    /// Small always-available backbone behind the same adapter interface.
    TinySurrogate,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Resnet101 => "resnet101",
            Architecture::VitB32 => "vit_b32",
            Architecture::MobilenetV2 => "mobilenet_v2",
            Architecture::NasnetMobile => "nasnet_mobile",
            Architecture::TinySurrogate => "tiny_surrogate",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet101" => Ok(Architecture::Resnet101),
            "vit_b32" => Ok(Architecture::VitB32),
            "mobilenet_v2" => Ok(Architecture::MobilenetV2),
            "nasnet_mobile" => Ok(Architecture::NasnetMobile),
            "tiny_surrogate" => Ok(Architecture::TinySurrogate),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Per-backbone configuration: layer/parameter budgets, batch size, stage-2
/// epoch budget. The four production rows are fixed; the surrogate's row
/// matches its procedural construction exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchitectureSpec {
    pub name: Architecture,
    pub input_size: usize,
    pub total_layers: usize,
    pub unfrozen_layers_stage2: usize,
    pub total_params: u64,
    pub trainable_params_stage2: u64,
    pub batch_size: usize,
    pub stage2_epochs: usize,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.unfrozen_layers_stage2 > self.total_layers {
            return Err(Error::Config(format!(
                "{}: unfrozen layers {} exceed total {}",
                self.name, self.unfrozen_layers_stage2, self.total_layers
            )));
        }
        if self.trainable_params_stage2 > self.total_params {
            return Err(Error::Config(format!(
                "{}: trainable params {} exceed total {}",
                self.name, self.trainable_params_stage2, self.total_params
            )));
        }
        if self.input_size != 224 {
            return Err(Error::Config(format!(
                "{}: input size must be 224, got {}",
                self.name, self.input_size
            )));
        }
        Ok(())
    }
}

/// The four production backbone rows.
pub fn builtin_specs() -> Vec<ArchitectureSpec> {
    vec![
        ArchitectureSpec {
            name: Architecture::Resnet101,
            input_size: 224,
            total_layers: 345,
            unfrozen_layers_stage2: 305,
            total_params: 42_700_000,
            trainable_params_stage2: 24_800_000,
            batch_size: 250,
            stage2_epochs: 230,
        },
        ArchitectureSpec {
            name: Architecture::VitB32,
            input_size: 224,
            total_layers: 19,
            unfrozen_layers_stage2: 14,
            total_params: 87_500_000,
            trainable_params_stage2: 21_300_000,
            batch_size: 200,
            stage2_epochs: 230,
        },
        ArchitectureSpec {
            name: Architecture::MobilenetV2,
            input_size: 224,
            total_layers: 154,
            unfrozen_layers_stage2: 134,
            total_params: 2_700_000,
            trainable_params_stage2: 700_000,
            batch_size: 250,
            stage2_epochs: 430,
        },
        ArchitectureSpec {
            name: Architecture::NasnetMobile,
            input_size: 224,
            total_layers: 769,
            unfrozen_layers_stage2: 649,
            total_params: 4_300_000,
            trainable_params_stage2: 1_600_000,
            batch_size: 250,
            stage2_epochs: 1030,
        },
    ]
}

/// Parameter accounting of the procedural surrogate, 8-class head included:
/// stem pool, gabor conv 3->16 k7 (2368), relu, pool, conv 16->24 k3 (3480),
/// relu, conv 24->32 k3 (6944), relu, global pool, dense 32->8 (264).
pub fn surrogate_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        name: Architecture::TinySurrogate,
        input_size: 224,
        total_layers: 10,
        unfrozen_layers_stage2: 6,
        total_params: 13_056,
        trainable_params_stage2: 10_688,
        batch_size: 32,
        stage2_epochs: 30,
    }
}

pub fn spec_for(arch: Architecture) -> ArchitectureSpec {
    if arch == Architecture::TinySurrogate {
        return surrogate_spec();
    }
    builtin_specs()
        .into_iter()
        .find(|s| s.name == arch)
        .expect("every production architecture has a builtin spec")
}

// ---------------------------------------------------------------------------
// Pretrained assets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssetEntry {
    /// Bundle directory holding backbone.json + weights.bin.
    pub path: PathBuf,
    /// Expected SHA-256 of weights.bin, verified before load.
    pub sha256: String,
}

/// Environment variable naming a pretrained-asset registry file; it overrides
/// any registry path given in configuration.
pub const ASSET_REGISTRY_ENV: &str = "SEASTATE_ASSET_REGISTRY";

/// Registry file: `name\tpath\tsha256` per line, paths relative to the
/// registry file's directory.
#[derive(Debug, Clone, Default)]
pub struct PretrainedAssets {
    entries: BTreeMap<Architecture, AssetEntry>,
}

impl PretrainedAssets {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            entries.insert(
                fields[0].parse()?,
                AssetEntry {
                    path: base.join(fields[1]),
                    sha256: fields[2].to_string(),
                },
            );
        }
        Ok(PretrainedAssets { entries })
    }

    pub fn entry(&self, arch: Architecture) -> Option<&AssetEntry> {
        self.entries.get(&arch)
    }

    pub fn insert(&mut self, arch: Architecture, entry: AssetEntry) {
        self.entries.insert(arch, entry);
    }
}

// ---------------------------------------------------------------------------
// Layer specs (the serializable network description)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Gelu,
    AvgPool {
        k: usize,
    },
    GlobalAvgPool,
    Dense {
        in_f: usize,
        out_f: usize,
    },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_c, out_c, k, .. } => out_c * in_c * k * k + out_c,
            LayerSpec::Dense { in_f, out_f } => in_f * out_f + out_f,
            _ => 0,
        }
    }

    fn build(&self) -> Box<dyn Layer> {
        // Parameterized layers start zeroed; callers always overwrite from a
        // weight stream or an initializer.
        let mut rng = derive(0, &[]);
        match *self {
            LayerSpec::Conv {
                in_c,
                out_c,
                k,
                stride,
                pad,
            } => {
                let mut conv = Conv2d::new(in_c, out_c, k, stride, pad, &mut rng);
                conv.w.fill(0.0);
                Box::new(conv)
            }
            LayerSpec::Relu => Box::new(Relu::new()),
            LayerSpec::Gelu => Box::new(Gelu::new()),
            LayerSpec::AvgPool { k } => Box::new(AvgPool2d::new(k)),
            LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool::new()),
            LayerSpec::Dense { in_f, out_f } => {
                let mut dense = Dense::new(in_f, out_f, &mut rng);
                dense.w.fill(0.0);
                Box::new(dense)
            }
        }
    }
}

/// Per-channel input normalization convention of a backbone, recorded in its
/// asset metadata: model input = (pixel - mean) / scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            scale: [0.5; 3],
        }
    }
}

// ---------------------------------------------------------------------------
// Weight (de)serialization
// ---------------------------------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 4] = b"SSTW";
const WEIGHTS_VERSION: u32 = 1;

fn write_weights(path: &Path, weights: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(16 + weights.len() * 4);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for w in weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_weights(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != WEIGHTS_MAGIC {
        return Err(Error::Asset(format!(
            "{} is not a weight file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(Error::Asset(format!(
            "{}: unsupported weight format version {version}",
            path.display()
        )));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + count * 4 {
        return Err(Error::Asset(format!(
            "{}: truncated weight file ({} values declared)",
            path.display(),
            count
        )));
    }
    Ok(bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// Classifier model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    HeadOnly,
    FineTune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::HeadOnly => "head_only",
            Stage::FineTune => "fine_tune",
        })
    }
}

/// A backbone plus classification head with a per-layer trainability mask.
/// Single-writer: one training loop owns the weights; inference callers
/// serialize through `&mut`.
pub struct ClassifierModel {
    pub spec: ArchitectureSpec,
    pub label_range: LabelRange,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub layer_specs: Vec<LayerSpec>,
    /// layers[..backbone_layers] form the backbone; the rest are the head.
    pub backbone_layers: usize,
    pub trainable: Vec<bool>,
    layers: Vec<Box<dyn Layer>>,
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("spec", &self.spec)
            .field("label_range", &self.label_range)
            .field("num_classes", &self.num_classes)
            .field("layers", &self.layer_specs)
            .field("backbone_layers", &self.backbone_layers)
            .field("trainable", &self.trainable)
            .finish()
    }
}

impl ClassifierModel {
    /// Index of the lowest trainable layer (backward passes stop there).
    fn lowest_trainable(&self) -> Option<usize> {
        self.trainable.iter().position(|&t| t)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn total_param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count() as u64).sum()
    }

    pub fn head_param_count(&self) -> u64 {
        self.layers[self.backbone_layers..]
            .iter()
            .map(|l| l.param_count() as u64)
            .sum()
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.layers
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(l, _)| l.param_count() as u64)
            .sum()
    }

    /// head_only: backbone frozen, head trainable. fine_tune: the top
    /// `spec.unfrozen_layers_stage2` layers of the full stack trainable.
    pub fn configure_stage(&mut self, stage: Stage) {
        let n = self.layers.len();
        self.trainable = match stage {
            Stage::HeadOnly => (0..n).map(|i| i >= self.backbone_layers).collect(),
            Stage::FineTune => {
                let unfrozen = self.spec.unfrozen_layers_stage2.min(n);
                (0..n).map(|i| i >= n - unfrozen).collect()
            }
        };
    }

    /// Trainable counts must sit within 5% of the spec's stage-2 budget;
    /// the testable form of the per-layer unfreeze configuration.
    pub fn check_stage2_budget(&self) -> Result<()> {
        let actual = self.trainable_param_count() as f64;
        let budget = self.spec.trainable_params_stage2 as f64;
        let deviation = (actual - budget).abs() / budget;
        if deviation > 0.05 {
            return Err(Error::Config(format!(
                "{}: trainable parameters {actual} deviate {:.1}% from budget {budget}",
                self.spec.name,
                deviation * 100.0
            )));
        }
        Ok(())
    }

    /// Stack [0,1] RGB images into a normalized batch tensor.
    fn batch_tensor(&self, batch: &[Image]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let size = self.spec.input_size;
        let mut out = Array4::zeros((batch.len(), 3, size, size));
        for (i, img) in batch.iter().enumerate() {
            let (h, w) = hw(img);
            if (h, w) != (size, size) {
                return Err(Error::Geometry(format!(
                    "model expects {size}x{size} inputs, got {w}x{h}"
                )));
            }
            for y in 0..size {
                for x in 0..size {
                    for c in 0..3 {
                        out[[i, c, y, x]] =
                            (img[[y, x, c]] - self.normalization.mean[c]) / self.normalization.scale[c];
                    }
                }
            }
        }
        Ok(Tensor::Map(out))
    }

    /// Forward through every layer, caching for a subsequent backward.
    pub fn forward(&mut self, input: Tensor) -> Result<Tensor> {
        let mut cur = input;
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagate from the logit gradient down to the lowest trainable
    /// layer; frozen layers below it never see a gradient.
    pub fn backward(&mut self, grad_logits: Tensor) -> Result<()> {
        let stop = match self.lowest_trainable() {
            Some(i) => i,
            None => return Ok(()),
        };
        let mut grad = grad_logits;
        for idx in (stop..self.layers.len()).rev() {
            grad = self.layers[idx].backward(&grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }

    /// (value, grad) slices of every trainable layer, in stack order; the
    /// optimizer's working set.
    pub fn trainable_params(&mut self) -> Vec<ParamPair<'_>> {
        self.layers
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .flat_map(|(l, _)| l.params())
            .collect()
    }

    pub fn forward_logits(&mut self, batch: &[Image]) -> Result<Array2<f32>> {
        let input = self.batch_tensor(batch)?;
        let out = self.forward(input)?;
        Ok(out.as_flat()?.clone())
    }

    /// Probability rows (softmax of the class scores), each summing to 1.
    pub fn predict_batch(&mut self, batch: &[Image]) -> Result<ndarray::Array2<f64>> {
        let logits = self.forward_logits(batch)?;
        Ok(softmax(&logits))
    }

    /// argmax slot i maps to Beaufort label `label_range.min + i`.
    pub fn predict_labels(&mut self, batch: &[Image]) -> Result<Vec<crate::dataset::SeaStateLabel>> {
        let probs = self.predict_batch(batch)?;
        let mut labels = Vec::with_capacity(batch.len());
        for row in probs.rows() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("probabilities are finite"))
                .map(|(i, _)| i)
                .expect("non-empty row");
            labels.push(crate::dataset::SeaStateLabel::new(
                i64::from(self.label_range.min) + arg as i64,
                self.label_range,
            )?);
        }
        Ok(labels)
    }

    /// Flat snapshot of every weight in stack order.
    pub fn snapshot_weights(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for slice in layer.param_values() {
                out.extend_from_slice(slice);
            }
        }
        out
    }

    /// Snapshot restricted to backbone layers; the freeze-invariant witness.
    pub fn backbone_weights(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers[..self.backbone_layers] {
            for slice in layer.param_values() {
                out.extend_from_slice(slice);
            }
        }
        out
    }

    pub fn restore_weights(&mut self, weights: &[f32]) -> Result<()> {
        let total: usize = self.layer_specs.iter().map(LayerSpec::param_count).sum();
        if weights.len() != total {
            return Err(Error::Asset(format!(
                "weight count {} does not match model ({total})",
                weights.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for pair in layer.params() {
                pair.value.copy_from_slice(&weights[offset..offset + pair.value.len()]);
                offset += pair.value.len();
            }
        }
        Ok(())
    }

    // -- bundle IO ----------------------------------------------------------

    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = self.snapshot_weights();
        write_weights(&dir.join("weights.bin"), &weights)?;
        let meta = BundleMeta {
            format_version: 1,
            spec: self.spec,
            label_range: self.label_range,
            num_classes: self.num_classes,
            normalization: self.normalization,
            layer_specs: self.layer_specs.clone(),
            backbone_layers: self.backbone_layers,
            trainable: self.trainable.clone(),
            weights_sha256: file_sha256(&dir.join("weights.bin"))?,
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Data(format!("bundle metadata encoding: {e}")))?;
        fs::write(dir.join("model.json"), json).map_err(|e| Error::io(dir, e))
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| Error::Asset(format!(
            "{}: invalid bundle metadata: {e}",
            meta_path.display()
        )))?;
        if meta.format_version != 1 {
            return Err(Error::Asset(format!(
                "unsupported bundle format version {}",
                meta.format_version
            )));
        }
        let weights_path = dir.join("weights.bin");
        let actual_hash = file_sha256(&weights_path)?;
        if actual_hash != meta.weights_sha256 {
            return Err(Error::Asset(format!(
                "{}: weight hash mismatch (expected {}, got {actual_hash})",
                weights_path.display(),
                meta.weights_sha256
            )));
        }
        let weights = read_weights(&weights_path)?;
        let layers: Vec<Box<dyn Layer>> = meta.layer_specs.iter().map(LayerSpec::build).collect();
        let mut model = ClassifierModel {
            spec: meta.spec,
            label_range: meta.label_range,
            num_classes: meta.num_classes,
            normalization: meta.normalization,
            layer_specs: meta.layer_specs,
            backbone_layers: meta.backbone_layers,
            trainable: meta.trainable,
            layers,
        };
        model.restore_weights(&weights)?;
        Ok(model)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BundleMeta {
    format_version: u32,
    spec: ArchitectureSpec,
    label_range: LabelRange,
    num_classes: usize,
    normalization: Normalization,
    layer_specs: Vec<LayerSpec>,
    backbone_layers: usize,
    trainable: Vec<bool>,
    weights_sha256: String,
}

// ---------------------------------------------------------------------------
// Surrogate backbone construction
// ---------------------------------------------------------------------------

/// 7x7 oriented Gabor filter bank: 4 orientations x 4 wavelengths, each
/// zero-mean and L2-normalized. The surrogate's "pretrained" first stage.
fn gabor_bank() -> Vec<f32> {
    let orientations = [0.0f64, 45.0, 90.0, 135.0].map(|d| d.to_radians());
    let wavelengths = [2.0f64, 3.5, 5.5, 9.0];
    let mut weights = Vec::with_capacity(16 * 3 * 49);
    for &lambda in &wavelengths {
        for &theta in &orientations {
            let sigma = 0.56 * lambda;
            let mut filt = [0.0f64; 49];
            for (idx, value) in filt.iter_mut().enumerate() {
                let y = (idx / 7) as f64 - 3.0;
                let x = (idx % 7) as f64 - 3.0;
                let xr = x * theta.cos() + y * theta.sin();
                let yr = -x * theta.sin() + y * theta.cos();
                let envelope = (-(xr * xr + yr * yr) / (2.0 * sigma * sigma)).exp();
                *value = envelope * (2.0 * std::f64::consts::PI * xr / lambda).cos();
            }
            let mean = filt.iter().sum::<f64>() / 49.0;
            for v in &mut filt {
                *v -= mean;
            }
            let norm = filt.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            // identical filter on all three input channels, scaled to unit
            // L2 across the full 3-channel support
            for _channel in 0..3 {
                weights.extend(filt.iter().map(|v| (*v / (norm * 3.0f64.sqrt())) as f32));
            }
        }
    }
    weights
}

/// Mixing conv weights: the first `in_c` output channels smooth-pass their
/// matching input channel (preserving the per-filter energy signature), the
/// remainder are seeded random cross-channel mixtures.
fn mixing_conv_weights(in_c: usize, out_c: usize, seed: u64, scale: f32) -> Vec<f32> {
    use rand::Rng as _;
    let mut rng = derive(seed, &[tag("mixing"), in_c as u64, out_c as u64]);
    let mut w = vec![0.0f32; out_c * in_c * 9];
    for oc in 0..out_c {
        if oc < in_c {
            // pass-through: 3x3 smoothing of channel oc with unit gain
            for k in 0..9 {
                w[(oc * in_c + oc) * 9 + k] = if k == 4 { 0.28 } else { 0.09 };
            }
        } else {
            for ic in 0..in_c {
                for k in 0..9 {
                    w[(oc * in_c + ic) * 9 + k] =
                        rng.gen_range(-1.0f32..1.0) * scale / in_c as f32;
                }
            }
        }
    }
    w
}

/// Build the surrogate backbone with procedurally-constructed "pretrained"
/// weights: stem pool, Gabor bank conv, relu, pool, two mixing convs with
/// relus, global average pool. Output: 32 features.
fn surrogate_backbone(seed: u64) -> (Vec<LayerSpec>, Vec<Box<dyn Layer>>) {
    let specs = vec![
        LayerSpec::AvgPool { k: 2 },
        LayerSpec::Conv {
            in_c: 3,
            out_c: 16,
            k: 7,
            stride: 2,
            pad: 3,
        },
        LayerSpec::Relu,
        LayerSpec::AvgPool { k: 2 },
        LayerSpec::Conv {
            in_c: 16,
            out_c: 24,
            k: 3,
            stride: 2,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            in_c: 24,
            out_c: 32,
            k: 3,
            stride: 2,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
    ];
    let mut layers: Vec<Box<dyn Layer>> = specs.iter().map(LayerSpec::build).collect();
    // fill the three convs with the constructed weights
    let fill = |layer: &mut Box<dyn Layer>, values: Vec<f32>| {
        let mut pairs = layer.params();
        pairs[0].value.copy_from_slice(&values);
        // biases stay zero
    };
    fill(&mut layers[1], gabor_bank());
    fill(&mut layers[4], mixing_conv_weights(16, 24, seed, 0.8));
    fill(&mut layers[6], mixing_conv_weights(24, 32, seed.wrapping_add(1), 0.8));
    (specs, layers)
}

pub const SURROGATE_FEATURE_DIM: usize = 32;

/// Default hidden width of the ViT-style intermediate GELU dense head layer.
pub const DEFAULT_VIT_HIDDEN: usize = 512;

#[derive(Debug, Clone, Copy)]
pub struct HeadConfig {
    pub seed: u64,
    /// Width of the intermediate GELU dense layer (ViT-style heads only).
    pub vit_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            seed: 0,
            vit_hidden: DEFAULT_VIT_HIDDEN,
        }
    }
}

/// Assemble a classifier: load (or construct) the backbone, attach a freshly
/// initialized head (global average pooling + linear dense; ViT-style specs
/// get an intermediate GELU dense layer), default to head-only training.
pub fn build_classifier(
    spec: ArchitectureSpec,
    num_classes: usize,
    assets: &PretrainedAssets,
    head: HeadConfig,
) -> Result<ClassifierModel> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    let (mut layer_specs, mut layers, normalization, feature_dim) = match spec.name {
        Architecture::TinySurrogate => {
            let (specs, layers) = surrogate_backbone(head.seed);
            (specs, layers, Normalization::default(), SURROGATE_FEATURE_DIM)
        }
        arch => {
            let entry = assets.entry(arch).ok_or_else(|| {
                Error::Asset(format!("no pretrained asset registered for {arch}"))
            })?;
            load_backbone_asset(entry)?
        }
    };
    let backbone_layers = layers.len();

    // attach the head
    let mut rng = derive(head.seed, &[tag("head")]);
    let mut push_dense = |specs: &mut Vec<LayerSpec>, layers: &mut Vec<Box<dyn Layer>>, in_f: usize, out_f: usize| {
        specs.push(LayerSpec::Dense { in_f, out_f });
        layers.push(Box::new(Dense::new(in_f, out_f, &mut rng)));
    };
    if spec.name == Architecture::VitB32 {
        push_dense(&mut layer_specs, &mut layers, feature_dim, head.vit_hidden);
        layer_specs.push(LayerSpec::Gelu);
        layers.push(Box::new(Gelu::new()));
        push_dense(&mut layer_specs, &mut layers, head.vit_hidden, num_classes);
    } else {
        push_dense(&mut layer_specs, &mut layers, feature_dim, num_classes);
    }

    let n = layers.len();
    let mut model = ClassifierModel {
        spec,
        label_range: LabelRange::new(1, num_classes as u8)?,
        num_classes,
        normalization,
        layer_specs,
        backbone_layers,
        trainable: vec![false; n],
        layers,
    };
    model.configure_stage(Stage::HeadOnly);
    Ok(model)
}

/// Backbone asset bundle: backbone.json (layer specs, normalization,
/// feature dim) + weights.bin, hash-verified against the registry entry.
#[derive(serde::Serialize, serde::Deserialize)]
struct BackboneMeta {
    format_version: u32,
    layer_specs: Vec<LayerSpec>,
    normalization: Normalization,
    feature_dim: usize,
}

type BackboneParts = (Vec<LayerSpec>, Vec<Box<dyn Layer>>, Normalization, usize);

fn load_backbone_asset(entry: &AssetEntry) -> Result<BackboneParts> {
    let meta_path = entry.path.join("backbone.json");
    let weights_path = entry.path.join("weights.bin");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BackboneMeta = serde_json::from_str(&text).map_err(|e| {
        Error::Asset(format!("{}: invalid backbone metadata: {e}", meta_path.display()))
    })?;
    if meta.format_version != 1 {
        return Err(Error::Asset(format!(
            "unsupported backbone format version {}",
            meta.format_version
        )));
    }
    let actual = file_sha256(&weights_path)?;
    if actual != entry.sha256 {
        return Err(Error::Asset(format!(
            "{}: weight hash mismatch (registry {}, file {actual})",
            weights_path.display(),
            entry.sha256
        )));
    }
    let weights = read_weights(&weights_path)?;
    let expected: usize = meta.layer_specs.iter().map(LayerSpec::param_count).sum();
    if weights.len() != expected {
        return Err(Error::Asset(format!(
            "{}: {} weights for a {expected}-parameter backbone",
            weights_path.display(),
            weights.len()
        )));
    }
    let mut layers: Vec<Box<dyn Layer>> = meta.layer_specs.iter().map(LayerSpec::build).collect();
    let mut offset = 0;
    for layer in &mut layers {
        for pair in layer.params() {
            pair.value.copy_from_slice(&weights[offset..offset + pair.value.len()]);
            offset += pair.value.len();
        }
    }
    Ok((meta.layer_specs, layers, meta.normalization, meta.feature_dim))
}

/// Write a backbone bundle + registry line; how surrogate-format pretrained
/// assets are produced for tests and local experiments.
pub fn export_backbone_asset(
    dir: &Path,
    layer_specs: &[LayerSpec],
    weights: &[f32],
    normalization: Normalization,
    feature_dim: usize,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_weights(&dir.join("weights.bin"), weights)?;
    let meta = BackboneMeta {
        format_version: 1,
        layer_specs: layer_specs.to_vec(),
        normalization,
        feature_dim,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("backbone metadata encoding: {e}")))?;
    fs::write(dir.join("backbone.json"), json).map_err(|e| Error::io(dir, e))?;
    file_sha256(&dir.join("weights.bin"))
}
