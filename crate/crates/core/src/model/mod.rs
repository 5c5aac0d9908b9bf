//! The detector network: a small no-pooling residual backbone embeds the
//! image into a token grid, k compound encoder layers (multi-head
//! self-attention + feature enhancement) mix the tokens, and a U-Net-style
//! decoder with skip connections produces a per-pixel confidence map
//! through a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{Error, Result};
use crate::grid::GrayMap;
use crate::tensor::optim::Parameter;
use crate::tensor::{no_grad, Tensor};

mod backbone;
mod decoder;
mod encoder;

use backbone::Backbone;
use decoder::Decoder;
pub use encoder::EncoderLayer;

/// Architecture hyperparameters. `token_width` (the channel width C1 of the
/// token grid) must equal the last backbone stage's width, since the deepest
/// feature map is flattened directly into tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input extent as [height, width].
    pub input_size: [usize; 2],
    /// Channel width of each backbone stage; every stage halves the
    /// spatial extent, so the token grid is input / 2^stages.
    pub backbone_channels: Vec<usize>,
    /// Total downsampling factor; must equal 2^(number of stages).
    pub total_stride: usize,
    /// Token channel width C1.
    pub token_width: usize,
    /// Attention heads per encoder layer; must divide `token_width`.
    pub heads: usize,
    /// Number of encoder layers.
    pub layers: usize,
    /// Feature-enhancement hidden width C2 = fem_patch².
    pub fem_hidden: usize,
    /// Side length P of the square map each token is reshaped to.
    pub fem_patch: usize,
    /// Kernel size of the shared enhancement convolution (odd).
    pub fem_kernel: usize,
    /// Layer-normalize the enhancement input (off reproduces the reference
    /// layout, which normalizes only the attention path).
    pub fem_prenorm: bool,
    /// Output width of each decoder stage, deepest first; one entry per
    /// backbone stage.
    pub decoder_channels: Vec<usize>,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64×64 input, 64-wide tokens, 4 heads, 4 layers.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            input_size: [64, 64],
            backbone_channels: vec![16, 32, 64],
            total_stride: 8,
            token_width: 64,
            heads: 4,
            layers: 4,
            fem_hidden: 64,
            fem_patch: 8,
            fem_kernel: 3,
            fem_prenorm: false,
            decoder_channels: vec![64, 32, 16],
            ln_eps: 1e-5,
        }
    }

    /// Tiny 16×16 configuration for exhaustive numeric checks.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            input_size: [16, 16],
            backbone_channels: vec![8, 12, 16],
            total_stride: 8,
            token_width: 16,
            heads: 2,
            layers: 2,
            fem_hidden: 16,
            fem_patch: 4,
            fem_kernel: 3,
            fem_prenorm: false,
            decoder_channels: vec![16, 8, 8],
            ln_eps: 1e-5,
        }
    }

    /// Full-scale configuration (224×224 input, 12 heads, 12 layers).
    /// Supported but far too slow for routine testing.
    pub fn full() -> ModelConfig {
        ModelConfig {
            input_size: [224, 224],
            backbone_channels: vec![24, 48, 96],
            total_stride: 8,
            token_width: 96,
            heads: 12,
            layers: 12,
            fem_hidden: 144,
            fem_patch: 12,
            fem_kernel: 3,
            fem_prenorm: false,
            decoder_channels: vec![96, 48, 24],
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let [h, w] = self.input_size;
        let stages = self.backbone_channels.len();
        if stages == 0 {
            return bad("backbone_channels must not be empty".into());
        }
        if self.total_stride != 1 << stages {
            return bad(format!(
                "total_stride {} must equal 2^stages = {} for {} backbone stages",
                self.total_stride,
                1 << stages,
                stages
            ));
        }
        if h == 0 || w == 0 || h % self.total_stride != 0 || w % self.total_stride != 0 {
            return bad(format!(
                "input size {h}×{w} must be divisible by total stride {}",
                self.total_stride
            ));
        }
        if self.token_width != *self.backbone_channels.last().unwrap() {
            return bad(format!(
                "token_width {} must equal the last backbone width {}",
                self.token_width,
                self.backbone_channels.last().unwrap()
            ));
        }
        if self.heads == 0 || self.token_width % self.heads != 0 {
            return bad(format!(
                "token_width {} must be divisible by heads {}",
                self.token_width, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("layers must be ≥ 1".into());
        }
        if self.fem_hidden != self.fem_patch * self.fem_patch {
            return bad(format!(
                "fem_hidden {} must equal fem_patch² = {}",
                self.fem_hidden,
                self.fem_patch * self.fem_patch
            ));
        }
        if self.fem_kernel % 2 == 0 || self.fem_kernel == 0 {
            return bad(format!("fem_kernel {} must be odd", self.fem_kernel));
        }
        if self.decoder_channels.len() != stages {
            return bad(format!(
                "decoder_channels needs one entry per backbone stage ({stages}), got {}",
                self.decoder_channels.len()
            ));
        }
        if self.ln_eps < 0.0 {
            return bad("ln_eps must be non-negative".into());
        }
        Ok(())
    }

    /// Token grid extent (input / stride).
    pub fn grid(&self) -> (usize, usize) {
        (self.input_size[0] / self.total_stride, self.input_size[1] / self.total_stride)
    }

    /// Number of tokens n = grid height × grid width.
    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

// ── shared building blocks ──────────────────────────────────────────

fn sample(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) struct Conv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal initialized conv (std = √(2 / fan-in)), zero bias,
    /// padding k/2 so stride-1 preserves the extent.
    fn he(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = Tensor::from_vec(&[cout, cin, k, k], sample(rng, cout * cin * k * k, std))
            .expect("sampled weights are finite");
        Conv {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding: k / 2,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight.tensor, Some(&self.bias.tensor), self.stride, self.padding)
    }

    fn collect(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

pub(crate) struct Linear {
    pub weight: Parameter, // [in × out]
    pub bias: Parameter,   // [out]
}

impl Linear {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, std: f64) -> Linear {
        let weight = Tensor::from_vec(&[cin, cout], sample(rng, cin * cout, std))
            .expect("sampled weights are finite");
        Linear {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.tensor)?.add_row(&self.bias.tensor)
    }

    fn collect(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

/// Weight std for attention and fully-connected layers.
const LINEAR_STD: f64 = 0.02;

// ── the detector ────────────────────────────────────────────────────

pub struct Detector {
    pub config: ModelConfig,
    backbone: Backbone,
    e_pos: Parameter,
    layers: Vec<EncoderLayer>,
    decoder: Decoder,
}

impl Detector {
    /// Builds a freshly initialized model. Construction order is fixed, so
    /// one seed always yields the same weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Detector> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = config.token_width;
        let n = config.tokens();

        let backbone = Backbone::new(&mut rng, &config.backbone_channels);
        let e_pos = Parameter::new("embed.pos", Tensor::zeros(&[n, c1]));
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut rng, &format!("encoder.{l}"), config))
            .collect();
        let decoder = Decoder::new(&mut rng, config);

        let model = Detector { config: config.clone(), backbone, e_pos, layers, decoder };
        let mut names = HashSet::new();
        for p in model.parameters() {
            if !names.insert(p.name.clone()) {
                return Err(Error::Contract(format!("duplicate parameter name '{}'", p.name)));
            }
        }
        Ok(model)
    }

    /// All trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.backbone.collect(&mut out);
        out.push(self.e_pos.clone());
        for layer in &self.layers {
            layer.collect(&mut out);
        }
        self.decoder.collect(&mut out);
        out
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// Backbone + flatten + positional embedding. Returns the token matrix
    /// [n × C1] and the per-stage skip maps (shallowest first; the last one
    /// is the same resolution as the token grid).
    pub fn embed(&self, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let [h, w] = self.config.input_size;
        if image.shape() != vec![1, 1, h, w] {
            return Err(Error::shape(
                "embed",
                format!("expected input [1, 1, {h}, {w}], got {:?}", image.shape()),
            ));
        }
        let skips = self.backbone.forward(image)?;
        let deep = skips.last().expect("at least one stage");
        let c1 = self.config.token_width;
        let n = self.config.tokens();
        // [1, C1, H', W'] → [C1, n] → [n, C1]
        let tokens = deep.reshape(&[c1, n])?.transpose()?;
        let tokens = tokens.add(&self.e_pos.tensor)?;
        Ok((tokens, skips))
    }

    /// Runs the k encoder layers in sequence.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut e = tokens.clone();
        for layer in &self.layers {
            e = layer.forward(&e)?;
        }
        Ok(e)
    }

    /// Reshape tokens onto the grid and upsample through the skip stack to
    /// a [1×1×H×W] confidence map.
    pub fn decode(&self, tokens: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        self.decoder.forward(tokens, self.config.grid(), skips)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (tokens, skips) = self.embed(image)?;
        let encoded = self.encode(&tokens)?;
        self.decode(&encoded, &skips)
    }

    /// Inference convenience: gradient-free forward on a grayscale map.
    pub fn predict(&self, image: &GrayMap) -> Result<GrayMap> {
        let [h, w] = self.config.input_size;
        if image.h != h || image.w != w {
            return Err(Error::shape(
                "predict",
                format!("model expects {h}×{w} input, image is {}×{}", image.h, image.w),
            ));
        }
        let x = Tensor::from_vec(&[1, 1, h, w], image.data.clone())?;
        let y = no_grad(|| self.forward(&x))?;
        GrayMap::from_vec(h, w, y.to_vec()).map_err(|e| Error::Data(e.to_string()))
    }

    // ── persistence ─────────────────────────────────────────────────

    /// Writes weights plus the architecture record; `extra` merges into the
    /// checkpoint metadata (e.g. training progress).
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert(
            "model".to_string(),
            serde_json::to_value(&self.config).map_err(|e| Error::Data(e.to_string()))?,
        );
        if let serde_json::Value::Object(extra) = extra {
            for (k, v) in extra {
                meta.insert(k, v);
            }
        }
        let entries = self
            .parameters()
            .into_iter()
            .map(|p| Entry { name: p.name.clone(), shape: p.tensor.shape(), data: p.tensor.to_vec() })
            .collect();
        Checkpoint { meta: serde_json::Value::Object(meta), entries }.save(path)
    }

    /// Restores a model from a checkpoint written by [`Detector::save`].
    pub fn load(path: &Path) -> Result<Detector> {
        let ck = Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Data("checkpoint has no model record".to_string()))?,
        )
        .map_err(|e| Error::Data(format!("checkpoint model record: {e}")))?;
        let model = Detector::new(&config, 0)?;
        let params = model.parameters();
        if params.len() != ck.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model needs {}",
                ck.entries.len(),
                params.len()
            )));
        }
        for p in &params {
            let e = ck
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor '{}'", p.name)))?;
            if e.shape != p.tensor.shape() {
                return Err(Error::Data(format!(
                    "tensor '{}' has shape {:?} in the checkpoint, expected {:?}",
                    p.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data(&e.data)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_toy_configs_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert_eq!(ModelConfig::desk().tokens(), 64);
        assert_eq!(ModelConfig::desk().grid(), (8, 8));
        assert_eq!(ModelConfig::full().tokens(), 784);
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut c = ModelConfig::desk();
        c.input_size = [60, 64]; // not divisible by 8
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.heads = 5; // 64 % 5 != 0
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.fem_patch = 7; // 49 != 64
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.layers = 0;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.token_width = 32; // last backbone stage is 64
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::toy();
        let a = Detector::new(&cfg, 7).unwrap();
        let b = Detector::new(&cfg, 7).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec(), "{} differs", pa.name);
        }
        let c = Detector::new(&cfg, 8).unwrap();
        let diff = a
            .parameters()
            .iter()
            .zip(c.parameters().iter())
            .any(|(x, y)| x.tensor.to_vec() != y.tensor.to_vec());
        assert!(diff, "different seeds must give different weights");
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = ModelConfig::toy();
        let model = Detector::new(&cfg, 1).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.3);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 16, 16]);
        for v in y.to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Detector::new(&ModelConfig::toy(), 3).unwrap();
        let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|i| i as f64 / 255.0).collect()).unwrap();
        let a = model.forward(&x).unwrap().to_vec();
        let b = model.forward(&x).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn embed_rejects_wrong_size() {
        let model = Detector::new(&ModelConfig::toy(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(model.embed(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn positional_embedding_is_shared_across_images() {
        let model = Detector::new(&ModelConfig::toy(), 1).unwrap();
        // zero image: tokens = backbone(0) + E_pos; bump E_pos and the
        // change must appear identically for any input
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let (before, _) = model.embed(&x).unwrap();
        let mut bumped = model.e_pos.tensor.to_vec();
        for v in &mut bumped {
            *v += 0.25;
        }
        model.e_pos.tensor.set_data(&bumped).unwrap();
        let (after, _) = model.embed(&x).unwrap();
        for (b, a) in before.to_vec().iter().zip(after.to_vec()) {
            assert!((a - b - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Detector::new(&ModelConfig::toy(), 11).unwrap();
        let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|i| (i % 7) as f64 / 7.0).collect())
            .unwrap();
        let y = model.forward(&x).unwrap().to_vec();
        model.save(&path, serde_json::json!({"note": "test"})).unwrap();

        let back = Detector::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.forward(&x).unwrap().to_vec(), y);
    }
}
