//! Lightweight decoder that turns encoded fragments back into a complete
//! stride-16 feature map.
//!
//! Kept positions come from the encoder through `enc_to_dec`. Dropped
//! positions are filled either with a learnable mask token or with the
//! stem's own tokens projected by `stem_to_dec`.

use crate::encoder::pos_embed_2d;
use crate::error::{Error, Result};
use crate::params::{linear_specs, Init, ParamSpec, ParamVars};
use crate::sampler::SampledSet;
use crate::tensor::{Tensor, Var};
use crate::transformer::{block_param_count, stack_forward, stack_specs, BlockConfig};

pub const PREFIX: &str = "decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillMode {
    MaskToken,
    ConvStemFeature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub fill_mode: FillMode,
}

impl DecoderConfig {
    pub fn full_scale() -> Self {
        DecoderConfig {
            dim: 512,
            depth: 4,
            heads: 16,
            mlp_ratio: 4,
            fill_mode: FillMode::ConvStemFeature,
        }
    }

    pub fn desk() -> Self {
        DecoderConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            fill_mode: FillMode::ConvStemFeature,
        }
    }

    pub fn with_depth(self, depth: usize) -> Self {
        DecoderConfig { depth, ..self }
    }

    pub fn with_fill(self, fill_mode: FillMode) -> Self {
        DecoderConfig { fill_mode, ..self }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::invalid(
                "DecoderConfig",
                format!("dim {} must be a positive multiple of 4", self.dim),
            ));
        }
        if self.depth > 0 {
            self.block().validate()?;
        }
        Ok(())
    }
}

pub fn param_specs(cfg: &DecoderConfig, enc_dim: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    specs.extend(linear_specs(&format!("{PREFIX}.enc_to_dec"), enc_dim, cfg.dim));
    specs.extend(linear_specs(&format!("{PREFIX}.stem_to_dec"), enc_dim, cfg.dim));
    specs.push(ParamSpec::new(
        format!("{PREFIX}.mask_token"),
        &[cfg.dim],
        Init::TruncNormal,
    ));
    specs.extend(stack_specs(PREFIX, &cfg.block(), cfg.depth));
    specs
}

pub fn param_count(cfg: &DecoderConfig, enc_dim: usize) -> usize {
    2 * (enc_dim * cfg.dim + cfg.dim)
        + cfg.dim
        + cfg.depth * block_param_count(&cfg.block())
        + 2 * cfg.dim
}

/// Name of the fill parameter that the given mode never reads.
pub fn inactive_fill_param(mode: FillMode) -> String {
    match mode {
        FillMode::MaskToken => format!("{PREFIX}.stem_to_dec"),
        FillMode::ConvStemFeature => format!("{PREFIX}.mask_token"),
    }
}

fn dense(x: &Var, p: &ParamVars, name: &str) -> Result<Var> {
    x.linear(
        p.get(&format!("{PREFIX}.{name}.weight"))?,
        Some(p.get(&format!("{PREFIX}.{name}.bias"))?),
    )
}

/// Full-length decoder input before position embeddings are added.
pub fn fill_rows(
    encoded: &Var,
    stem_tokens: &Var,
    set: &SampledSet,
    cfg: &DecoderConfig,
    p: &ParamVars,
) -> Result<Var> {
    let [n, k, e] = encoded.value().dims3("fill_full_sequence")?;
    let [sn, l, se] = stem_tokens.value().dims3("fill_full_sequence")?;
    if sn != n || se != e || l != set.n_tokens() || k != set.kept().len() {
        return Err(Error::shape(
            "fill_full_sequence",
            format!(
                "encoded {:?}, stem tokens {:?}, set keeps {} of {}",
                encoded.shape(),
                stem_tokens.shape(),
                set.kept().len(),
                set.n_tokens()
            ),
        ));
    }
    let kept = dense(encoded, p, "enc_to_dec")?;
    if set.is_full() {
        return Ok(kept);
    }
    let base = match cfg.fill_mode {
        FillMode::MaskToken => p.get(&format!("{PREFIX}.mask_token"))?.expand_leading(&[n, l])?,
        FillMode::ConvStemFeature => {
            let dropped = dense(&stem_tokens.gather_rows(set.dropped())?, p, "stem_to_dec")?;
            Var::constant(Tensor::zeros(&[n, l, cfg.dim])?).scatter_rows(set.dropped(), &dropped)?
        }
    };
    base.scatter_rows(set.kept(), &kept)
}

/// Fills every position, then adds the decoder-width position table.
pub fn fill_full_sequence(
    encoded: &Var,
    stem_tokens: &Var,
    set: &SampledSet,
    grid_h: usize,
    grid_w: usize,
    cfg: &DecoderConfig,
    p: &ParamVars,
) -> Result<Var> {
    if grid_h * grid_w != set.n_tokens() {
        return Err(Error::shape(
            "fill_full_sequence",
            format!("{grid_h}x{grid_w} grid but the set spans {} tokens", set.n_tokens()),
        ));
    }
    let rows = fill_rows(encoded, stem_tokens, set, cfg, p)?;
    let pos = pos_embed_2d(grid_h, grid_w, cfg.dim)?;
    rows.add(&Var::constant(pos.table))
}

/// Block stack and final norm over the full sequence, reshaped to
/// `[N, dim, grid_h, grid_w]`.
pub fn decode(full_seq: &Var, cfg: &DecoderConfig, p: &ParamVars, grid_h: usize, grid_w: usize) -> Result<Var> {
    let [n, l, d] = full_seq.value().dims3("decode")?;
    if l != grid_h * grid_w || d != cfg.dim {
        return Err(Error::shape(
            "decode",
            format!("sequence {:?} vs {grid_h}x{grid_w} grid, dim {}", full_seq.shape(), cfg.dim),
        ));
    }
    stack_forward(full_seq, &cfg.block(), cfg.depth, p, PREFIX)?
        .permute(&[0, 2, 1])?
        .reshape(&[n, d, grid_h, grid_w])
}
