//! Plain ViT encoder over a partial token sequence.

use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamVars};
use crate::sampler::SampledSet;
use crate::tensor::{Tensor, Var};
use crate::transformer::{block_param_count, stack_forward, stack_specs, BlockConfig};

pub const PREFIX: &str = "encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// ViT-Base: 768 wide, 12 blocks, 12 heads.
    pub fn full_scale() -> Self {
        EncoderConfig {
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if !self.dim.is_multiple_of(4) {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("dim {} must be divisible by 4 for the position table", self.dim),
            ));
        }
        Ok(())
    }
}

pub fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    stack_specs(PREFIX, &cfg.block(), cfg.depth)
}

/// Blocks plus the final norm; there is no patch embedding, class token or
/// learned position table.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    cfg.depth * block_param_count(&cfg.block()) + 2 * cfg.dim
}

/// Fixed 2D sine-cosine position table, one row per grid cell in row-major
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbed {
    pub grid_h: usize,
    pub grid_w: usize,
    pub table: Tensor,
}

/// Channels `[0, D/2)` encode the row, `[D/2, D)` the column. Within each
/// half, channel `2k` is `sin(p * w_k)` and `2k + 1` is `cos(p * w_k)` with
/// `w_k = 10000^(-k / (D/4))`.
pub fn pos_embed_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<PosEmbed> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::invalid(
            "pos_embed_2d",
            format!("dim {dim} must be a positive multiple of 4"),
        ));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::invalid("pos_embed_2d", "empty grid"));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for p in [r as f64, c as f64] {
                for &w in &freqs {
                    data.push((p * w).sin());
                    data.push((p * w).cos());
                }
            }
        }
    }
    Ok(PosEmbed {
        grid_h,
        grid_w,
        table: Tensor::new(&[grid_h * grid_w, dim], data)?,
    })
}

fn check_tokens(tokens: &Var, pos: &PosEmbed, cfg: &EncoderConfig) -> Result<()> {
    let [_, l, d] = tokens.value().dims3("encode_partial")?;
    if l != pos.grid_h * pos.grid_w || d != cfg.dim || pos.table.shape()[1] != d {
        return Err(Error::shape(
            "encode_partial",
            format!(
                "tokens {:?} vs {}x{} grid, table {:?}, encoder dim {}",
                tokens.shape(),
                pos.grid_h,
                pos.grid_w,
                pos.table.shape(),
                cfg.dim
            ),
        ));
    }
    Ok(())
}

/// Adds positions to every token, keeps the rows in `indices` in the given
/// order, then runs the block stack and final norm.
pub fn encode_indices(
    tokens: &Var,
    pos: &PosEmbed,
    indices: &[usize],
    cfg: &EncoderConfig,
    p: &ParamVars,
) -> Result<Var> {
    check_tokens(tokens, pos, cfg)?;
    let x = tokens.add(&Var::constant(pos.table.clone()))?;
    let x = x.gather_rows(indices)?;
    stack_forward(&x, &cfg.block(), cfg.depth, p, PREFIX)
}

/// Encodes the kept rows of `set`. A full set skips the gather.
pub fn encode_partial(
    tokens: &Var,
    pos: &PosEmbed,
    set: &SampledSet,
    cfg: &EncoderConfig,
    p: &ParamVars,
) -> Result<Var> {
    check_tokens(tokens, pos, cfg)?;
    if set.n_tokens() != pos.grid_h * pos.grid_w {
        return Err(Error::shape(
            "encode_partial",
            format!("set spans {} tokens, grid has {}", set.n_tokens(), pos.grid_h * pos.grid_w),
        ));
    }
    if set.is_full() {
        let x = tokens.add(&Var::constant(pos.table.clone()))?;
        return stack_forward(&x, &cfg.block(), cfg.depth, p, PREFIX);
    }
    encode_indices(tokens, pos, set.kept(), cfg, p)
}
