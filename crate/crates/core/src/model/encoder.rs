//! Compound encoder layer: multi-head self-attention over the token matrix
//! followed by the feature enhancement module.
//!
//! Attention: the layer-normalized tokens are split column-wise into m
//! heads; each head projects its C1/m-wide slice with its own square
//! Q/K/V matrices and computes softmax(QKᵀ/√(C1/m))·V. Heads are
//! concatenated, passed through an output projection, and added back onto
//! the untouched input (`E_a = MSA(LN(E)) + E`).
//!
//! Enhancement: FC to width C2 = P², reshape each token to a 1×P×P map,
//! one shared small conv over every token map, reshape back, FC to C1,
//! residual add. The conv sees tokens as a batch, so its parameter count is
//! independent of the token count.

use rand_chacha::ChaCha8Rng;

use super::{sample, Linear, ModelConfig, LINEAR_STD};
use crate::error::Result;
use crate::tensor::optim::Parameter;
use crate::tensor::Tensor;

struct Head {
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
}

pub struct Msa {
    ln_gain: Parameter,
    ln_bias: Parameter,
    heads: Vec<Head>,
    proj: Linear,
    head_dim: usize,
    eps: f64,
}

impl Msa {
    fn new(rng: &mut ChaCha8Rng, prefix: &str, c1: usize, m: usize, eps: f64) -> Msa {
        let hd = c1 / m;
        let mat = |rng: &mut ChaCha8Rng, name: String| {
            Parameter::new(
                name,
                Tensor::from_vec(&[hd, hd], sample(rng, hd * hd, LINEAR_STD))
                    .expect("sampled weights are finite"),
            )
        };
        let heads = (0..m)
            .map(|j| Head {
                wq: mat(rng, format!("{prefix}.head{j}.wq")),
                wk: mat(rng, format!("{prefix}.head{j}.wk")),
                wv: mat(rng, format!("{prefix}.head{j}.wv")),
            })
            .collect();
        Msa {
            ln_gain: Parameter::new(format!("{prefix}.ln.gain"), Tensor::ones(&[c1])),
            ln_bias: Parameter::new(format!("{prefix}.ln.bias"), Tensor::zeros(&[c1])),
            heads,
            proj: Linear::new(rng, &format!("{prefix}.proj"), c1, c1, LINEAR_STD),
            head_dim: hd,
            eps,
        }
    }

    /// MSA(LN(e)) + e.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let x = e.layer_norm(&self.ln_gain.tensor, &self.ln_bias.tensor, self.eps)?;
        let hd = self.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut zs = Vec::with_capacity(self.heads.len());
        for (j, h) in self.heads.iter().enumerate() {
            let ej = x.narrow(1, j * hd, hd)?;
            let q = ej.matmul(&h.wq.tensor)?;
            let k = ej.matmul(&h.wk.tensor)?;
            let v = ej.matmul(&h.wv.tensor)?;
            let a = q.matmul(&k.transpose()?)?.scale(scale)?.softmax_rows()?;
            zs.push(a.matmul(&v)?);
        }
        let refs: Vec<&Tensor> = zs.iter().collect();
        let z = Tensor::concat(&refs, 1)?;
        self.proj.apply(&z)?.add(e)
    }

    /// The per-head attention matrices this layer would use for `e`
    /// (recomputed; diagnostic use).
    pub fn attention(&self, e: &Tensor) -> Result<Vec<Tensor>> {
        let x = e.layer_norm(&self.ln_gain.tensor, &self.ln_bias.tensor, self.eps)?;
        let hd = self.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut maps = Vec::with_capacity(self.heads.len());
        for (j, h) in self.heads.iter().enumerate() {
            let ej = x.narrow(1, j * hd, hd)?;
            let q = ej.matmul(&h.wq.tensor)?;
            let k = ej.matmul(&h.wk.tensor)?;
            maps.push(q.matmul(&k.transpose()?)?.scale(scale)?.softmax_rows()?);
        }
        Ok(maps)
    }

    fn collect(&self, out: &mut Vec<Parameter>) {
        out.push(self.ln_gain.clone());
        out.push(self.ln_bias.clone());
        for h in &self.heads {
            out.push(h.wq.clone());
            out.push(h.wk.clone());
            out.push(h.wv.clone());
        }
        self.proj.collect(out);
    }
}

pub struct Fem {
    ln: Option<(Parameter, Parameter)>,
    fc1: Linear,
    conv_weight: Parameter,
    conv_bias: Parameter,
    fc2: Linear,
    patch: usize,
    kernel: usize,
    eps: f64,
}

impl Fem {
    fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Fem {
        let c1 = cfg.token_width;
        let c2 = cfg.fem_hidden;
        let k = cfg.fem_kernel;
        let ln = cfg.fem_prenorm.then(|| {
            (
                Parameter::new(format!("{prefix}.ln.gain"), Tensor::ones(&[c1])),
                Parameter::new(format!("{prefix}.ln.bias"), Tensor::zeros(&[c1])),
            )
        });
        let conv_std = (2.0 / (k * k) as f64).sqrt();
        Fem {
            ln,
            fc1: Linear::new(rng, &format!("{prefix}.fc1"), c1, c2, LINEAR_STD),
            conv_weight: Parameter::new(
                format!("{prefix}.conv.weight"),
                Tensor::from_vec(&[1, 1, k, k], sample(rng, k * k, conv_std))
                    .expect("sampled weights are finite"),
            ),
            conv_bias: Parameter::new(format!("{prefix}.conv.bias"), Tensor::zeros(&[1])),
            fc2: Linear::new(rng, &format!("{prefix}.fc2"), c2, c1, LINEAR_STD),
            patch: cfg.fem_patch,
            kernel: k,
            eps: cfg.ln_eps,
        }
    }

    /// FC1 → per-token P×P conv → FC2, plus the residual input.
    pub fn forward(&self, e_a: &Tensor) -> Result<Tensor> {
        let n = e_a.shape()[0];
        let p = self.patch;
        let x = match &self.ln {
            Some((g, b)) => e_a.layer_norm(&g.tensor, &b.tensor, self.eps)?,
            None => e_a.clone(),
        };
        let f = self.fc1.apply(&x)?; // [n × C2]
        let f3 = f.reshape(&[n, 1, p, p])?;
        let fc = f3.conv2d(&self.conv_weight.tensor, Some(&self.conv_bias.tensor), 1, self.kernel / 2)?;
        let f2 = fc.reshape(&[n, p * p])?;
        self.fc2.apply(&f2)?.add(e_a)
    }

    fn collect(&self, out: &mut Vec<Parameter>) {
        if let Some((g, b)) = &self.ln {
            out.push(g.clone());
            out.push(b.clone());
        }
        self.fc1.collect(out);
        out.push(self.conv_weight.clone());
        out.push(self.conv_bias.clone());
        self.fc2.collect(out);
    }
}

pub struct EncoderLayer {
    pub msa: Msa,
    pub fem: Fem,
}

impl EncoderLayer {
    pub(crate) fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> EncoderLayer {
        EncoderLayer {
            msa: Msa::new(rng, &format!("{prefix}.msa"), cfg.token_width, cfg.heads, cfg.ln_eps),
            fem: Fem::new(rng, &format!("{prefix}.fem"), cfg),
        }
    }

    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        self.fem.forward(&self.msa.forward(e)?)
    }

    pub(crate) fn collect(&self, out: &mut Vec<Parameter>) {
        self.msa.collect(out);
        self.fem.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_layer(seed: u64) -> EncoderLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderLayer::new(&mut rng, "encoder.0", &ModelConfig::toy())
    }

    fn zero(p: &Parameter) {
        p.tensor.set_data(&vec![0.0; p.tensor.numel()]).unwrap();
    }

    fn random_tokens(n: usize, c: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_token_attention_is_one() {
        let layer = toy_layer(5);
        let e = random_tokens(1, 16, 1);
        let maps = layer.msa.attention(&e).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.shape(), vec![1, 1]);
            assert!((m.item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let layer = toy_layer(6);
        for h in &layer.msa.heads {
            zero(&h.wq);
            zero(&h.wk);
        }
        let e = random_tokens(4, 16, 2);
        for m in layer.msa.attention(&e).unwrap() {
            for v in m.to_vec() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let layer = toy_layer(7);
        let e = random_tokens(4, 16, 3);
        for m in layer.msa.attention(&e).unwrap() {
            for r in 0..4 {
                let row: f64 = (0..4).map(|c| m.at(&[r, c])).sum();
                assert!((row - 1.0).abs() < 1e-9);
                for c in 0..4 {
                    assert!(m.at(&[r, c]) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn zeroed_branches_make_the_layer_identity() {
        let layer = toy_layer(8);
        zero(&layer.msa.proj.weight);
        zero(&layer.msa.proj.bias);
        zero(&layer.fem.fc2.weight);
        zero(&layer.fem.fc2.bias);
        let e = random_tokens(4, 16, 4);
        let out = layer.forward(&e).unwrap();
        for (a, b) in e.to_vec().iter().zip(out.to_vec()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn fem_zero_fc2_is_pure_residual() {
        let layer = toy_layer(9);
        zero(&layer.fem.fc2.weight);
        zero(&layer.fem.fc2.bias);
        let e = random_tokens(3, 16, 5);
        assert_eq!(layer.fem.forward(&e).unwrap().to_vec(), e.to_vec());
    }
}
