//! Pre-norm transformer block shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::params::{linear_specs, norm_specs, ParamSpec, ParamVars};
use crate::tensor::Var;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("BlockConfig", "dim, heads and mlp_ratio must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "BlockConfig",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

pub fn block_specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let mut specs = Vec::new();
    specs.extend(norm_specs(&format!("{prefix}.norm1"), d));
    specs.extend(linear_specs(&format!("{prefix}.attn.qkv"), d, 3 * d));
    specs.extend(linear_specs(&format!("{prefix}.attn.proj"), d, d));
    specs.extend(norm_specs(&format!("{prefix}.norm2"), d));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc1"), d, cfg.hidden()));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc2"), cfg.hidden(), d));
    specs
}

/// `4d^2 + 2*d*h + 9d + h` with `h = mlp_ratio * d`.
pub fn block_param_count(cfg: &BlockConfig) -> usize {
    let (d, h) = (cfg.dim, cfg.hidden());
    4 * d * d + 2 * d * h + 9 * d + h
}

fn norm(x: &Var, p: &ParamVars, prefix: &str) -> Result<Var> {
    x.layer_norm(
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
        NORM_EPS,
    )
}

fn dense(x: &Var, p: &ParamVars, prefix: &str) -> Result<Var> {
    x.linear(
        p.get(&format!("{prefix}.weight"))?,
        Some(p.get(&format!("{prefix}.bias"))?),
    )
}

/// Multi-head self-attention over `[N, L, D]`.
pub fn attention(x: &Var, cfg: &BlockConfig, p: &ParamVars, prefix: &str) -> Result<Var> {
    let [n, l, d] = x.value().dims3("attention")?;
    let (h, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let qkv = dense(x, p, &format!("{prefix}.qkv"))?
        .reshape(&[n, l, 3, h, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var> { qkv.narrow(0, i, 1)?.reshape(&[n * h, l, dh]) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let weights = q
        .matmul(&k, true)?
        .scale(1.0 / (dh as f64).sqrt())?
        .softmax_rows()?;
    let merged = weights
        .matmul(&v, false)?
        .reshape(&[n, h, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, l, d])?;
    dense(&merged, p, &format!("{prefix}.proj"))
}

pub fn block_forward(x: &Var, cfg: &BlockConfig, p: &ParamVars, prefix: &str) -> Result<Var> {
    let a = attention(&norm(x, p, &format!("{prefix}.norm1"))?, cfg, p, &format!("{prefix}.attn"))?;
    let x = x.add(&a)?;
    let hdn = dense(&norm(&x, p, &format!("{prefix}.norm2"))?, p, &format!("{prefix}.mlp.fc1"))?.gelu()?;
    x.add(&dense(&hdn, p, &format!("{prefix}.mlp.fc2"))?)
}

/// Runs `depth` blocks named `{prefix}.blocks.{i}` then the final norm
/// `{prefix}.norm`.
pub fn stack_forward(x: &Var, cfg: &BlockConfig, depth: usize, p: &ParamVars, prefix: &str) -> Result<Var> {
    let mut x = x.clone();
    for i in 0..depth {
        x = block_forward(&x, cfg, p, &format!("{prefix}.blocks.{i}"))?;
    }
    norm(&x, p, &format!("{prefix}.norm"))
}

pub fn stack_specs(prefix: &str, cfg: &BlockConfig, depth: usize) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = (0..depth)
        .flat_map(|i| block_specs(&format!("{prefix}.blocks.{i}"), cfg))
        .collect();
    specs.extend(norm_specs(&format!("{prefix}.norm"), cfg.dim));
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{count, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn vit_base_block_count() {
        let cfg = BlockConfig {
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
        };
        assert_eq!(block_param_count(&cfg), 7_087_872);
        assert_eq!(count(&block_specs("b", &cfg)), 7_087_872);
    }

    #[test]
    fn attention_preserves_shape_and_rows_normalize() {
        let cfg = BlockConfig {
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
        };
        let store = ParamStore::init(&stack_specs("enc", &cfg, 2), 1).unwrap();
        let p = ParamVars::constants(&store);
        let x = Var::constant(Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.37).sin()).unwrap());
        let y = stack_forward(&x, &cfg, 2, &p, "enc").unwrap();
        assert_eq!(y.shape(), &[2, 5, 8]);
        assert!(y.value().is_finite());
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = BlockConfig {
            dim: 6,
            heads: 4,
            mlp_ratio: 4,
        };
        assert!(cfg.validate().is_err());
    }
}
