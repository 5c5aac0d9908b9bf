//! Confidence-map decoder. The encoded tokens are laid back onto their
//! H'×W' grid, fused with the deepest skip map, then repeatedly upsampled
//! ×2 and fused with the next-shallower skip until the input resolution is
//! reached; a final conv + sigmoid yields the per-pixel confidence.

use rand_chacha::ChaCha8Rng;

use super::{Conv, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::optim::Parameter;
use crate::tensor::Tensor;

pub(crate) struct Decoder {
    blocks: Vec<Conv>,
    head: Conv,
}

impl Decoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Decoder {
        let skips = &cfg.backbone_channels; // shallowest → deepest
        let dec = &cfg.decoder_channels; // deepest stage first
        let c1 = cfg.token_width;
        let stages = skips.len();

        let mut blocks = Vec::with_capacity(stages);
        // entry block fuses tokens with the deepest skip at grid resolution
        let mut cin = c1 + skips[stages - 1];
        for i in 0..stages {
            blocks.push(Conv::he(rng, &format!("decoder.block{i}"), cin, dec[i], 3, 1));
            if i + 1 < stages {
                // next block sees this output concatenated with the skip
                // one stage shallower
                cin = dec[i] + skips[stages - 2 - i];
            }
        }
        let head = Conv::he(rng, "decoder.head", dec[stages - 1], 1, 3, 1);
        Decoder { blocks, head }
    }

    pub fn forward(&self, tokens: &Tensor, grid: (usize, usize), skips: &[Tensor]) -> Result<Tensor> {
        let (gh, gw) = grid;
        let ts = tokens.shape();
        if ts.len() != 2 || ts[0] != gh * gw {
            return Err(Error::shape(
                "decode",
                format!("token matrix {ts:?} does not cover a {gh}×{gw} grid"),
            ));
        }
        let deepest = skips
            .last()
            .ok_or_else(|| Error::shape("decode", "empty skip stack".to_string()))?;
        let ds = deepest.shape();
        if ds[2] != gh || ds[3] != gw {
            return Err(Error::shape(
                "decode",
                format!("deepest skip is {}×{}, token grid is {gh}×{gw}", ds[2], ds[3]),
            ));
        }

        let c1 = ts[1];
        let f = tokens.transpose()?.reshape(&[1, c1, gh, gw])?;
        let mut x = Tensor::concat(&[&f, deepest], 1)?;
        x = self.blocks[0].apply(&x)?.relu()?;
        for (i, skip) in skips.iter().rev().skip(1).enumerate() {
            x = x.upsample_nearest2()?;
            x = Tensor::concat(&[&x, skip], 1)?;
            x = self.blocks[i + 1].apply(&x)?.relu()?;
        }
        x = x.upsample_nearest2()?;
        self.head.apply(&x)?.sigmoid()
    }

    pub fn collect(&self, out: &mut Vec<Parameter>) {
        for b in &self.blocks {
            b.collect(out);
        }
        self.head.collect(out);
    }
}
