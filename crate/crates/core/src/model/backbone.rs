//! Feature-embedding backbone: a stack of residual stages with no pooling.
//! Each stage halves the spatial extent with a stride-2 conv and refines
//! with a two-conv identity-shortcut block, so a 3-stage backbone turns
//! H×W into H/8×W/8 and the stage outputs double as decoder skips.

use rand_chacha::ChaCha8Rng;

use super::Conv;
use crate::error::Result;
use crate::tensor::optim::Parameter;
use crate::tensor::Tensor;

struct Stage {
    down: Conv,
    conv1: Conv,
    conv2: Conv,
}

pub(crate) struct Backbone {
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, channels: &[usize]) -> Backbone {
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for (i, &ch) in channels.iter().enumerate() {
            let p = format!("backbone.stage{i}");
            stages.push(Stage {
                down: Conv::he(rng, &format!("{p}.down"), cin, ch, 3, 2),
                conv1: Conv::he(rng, &format!("{p}.res.conv1"), ch, ch, 3, 1),
                conv2: Conv::he(rng, &format!("{p}.res.conv2"), ch, ch, 3, 1),
            });
            cin = ch;
        }
        Backbone { stages }
    }

    /// Per-stage outputs, shallowest first. The last map is the compact
    /// feature grid that gets flattened into tokens.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            x = st.down.apply(&x)?.relu()?;
            let y = st.conv2.apply(&st.conv1.apply(&x)?.relu()?)?;
            x = y.add(&x)?.relu()?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn collect(&self, out: &mut Vec<Parameter>) {
        for st in &self.stages {
            st.down.collect(out);
            st.conv1.collect(out);
            st.conv2.collect(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stage_outputs_halve_and_widen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &[4, 8, 16]);
        let x = Tensor::full(&[1, 1, 32, 32], 0.5);
        let outs = bb.forward(&x).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[0].shape(), vec![1, 4, 16, 16]);
        assert_eq!(outs[1].shape(), vec![1, 8, 8, 8]);
        assert_eq!(outs[2].shape(), vec![1, 16, 4, 4]);
    }

    #[test]
    fn residual_block_passes_signal_through_zeroed_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &[2]);
        // zero both refinement convs: stage output must equal relu(down(x))
        for p in [&bb.stages[0].conv1, &bb.stages[0].conv2] {
            p.weight.tensor.set_data(&vec![0.0; p.weight.tensor.numel()]).unwrap();
        }
        let x = Tensor::full(&[1, 1, 4, 4], 1.0);
        let down = bb.stages[0].down.apply(&x).unwrap().relu().unwrap();
        let out = bb.forward(&x).unwrap();
        assert_eq!(out[0].to_vec(), down.to_vec());
    }
}
