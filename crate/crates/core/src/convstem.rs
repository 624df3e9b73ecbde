//! Randomly initialized convolutional stem.
//!
//! Four 3x3 stride-2 convolutions (no bias), each followed by a channel layer
//! norm and GELU, with channels doubling per stage, then a 1x1 projection to
//! the encoder width. The stride-4 and stride-8 activations feed the two
//! finest pyramid levels; the projected stride-16 map becomes the encoder's
//! token sequence.
//!
//! Full scale (`base = 96`, `out = 768`) the stages produce 96/192/384/768
//! channels and the stem holds 4,079,712 parameters.

use crate::error::{Error, Result};
use crate::params::{conv_specs, norm_specs, ParamSpec, ParamStore, ParamVars};
use crate::tensor::{Tensor, Var};

pub const STAGES: usize = 4;
pub const NORM_EPS: f64 = 1e-6;
const KERNEL: usize = 3;
const STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStemConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub out_dim: usize,
}

impl ConvStemConfig {
    pub fn full_scale() -> Self {
        ConvStemConfig {
            in_channels: 3,
            base_channels: 96,
            out_dim: 768,
        }
    }

    pub fn desk() -> Self {
        ConvStemConfig {
            in_channels: 3,
            base_channels: 8,
            out_dim: 64,
        }
    }

    /// Output channels of stage `s` (0-based): `base * 2^s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Channels of the stride-4 tap.
    pub fn s4_channels(&self) -> usize {
        self.stage_channels(1)
    }

    /// Channels of the stride-8 tap.
    pub fn s8_channels(&self) -> usize {
        self.stage_channels(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.out_dim == 0 {
            return Err(Error::invalid("ConvStemConfig", "channel counts must be positive"));
        }
        Ok(())
    }
}

pub fn param_specs(cfg: &ConvStemConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = cfg.in_channels;
    for s in 0..STAGES {
        let cout = cfg.stage_channels(s);
        specs.extend(conv_specs(&format!("stem.stage{s}.conv"), cin, cout, KERNEL, false));
        specs.extend(norm_specs(&format!("stem.stage{s}.norm"), cout));
        cin = cout;
    }
    specs.extend(conv_specs("stem.proj", cin, cfg.out_dim, 1, true));
    specs
}

/// Closed-form parameter count: per stage `cin*cout*9 + 2*cout`, plus the
/// 1x1 projection `8*base*out + out`.
pub fn param_count(cfg: &ConvStemConfig) -> usize {
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for s in 0..STAGES {
        let cout = cfg.stage_channels(s);
        total += cin * cout * KERNEL * KERNEL + 2 * cout;
        cin = cout;
    }
    total + cin * cfg.out_dim + cfg.out_dim
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    pub stride: usize,
}

/// Standard recurrence over `(kernel, stride)` layers:
/// `rf += (k - 1) * jump; jump *= stride`.
pub fn receptive_field(layers: &[(usize, usize)]) -> ReceptiveField {
    let (size, stride) = layers
        .iter()
        .fold((1, 1), |(rf, jump), &(k, s)| (rf + (k - 1) * jump, jump * s));
    ReceptiveField { size, stride }
}

pub fn layer_geometry(_cfg: &ConvStemConfig) -> Vec<(usize, usize)> {
    let mut layers = vec![(KERNEL, STRIDE); STAGES];
    layers.push((1, 1));
    layers
}

pub fn convstem_receptive_field(cfg: &ConvStemConfig) -> ReceptiveField {
    receptive_field(&layer_geometry(cfg))
}

#[derive(Clone, Debug)]
pub struct ConvStemOutput<T> {
    /// `[N, 2*base, H/4, W/4]`
    pub s4: T,
    /// `[N, 4*base, H/8, W/8]`
    pub s8: T,
    /// `[N, (H/16)*(W/16), out_dim]`, row-major over the stride-16 grid.
    pub tokens_s16: T,
    pub grid_h: usize,
    pub grid_w: usize,
}

fn check_image(image: &Tensor, cfg: &ConvStemConfig) -> Result<(usize, usize)> {
    let [_, c, h, w] = image.dims4("convstem_forward")?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "convstem_forward",
            format!("image has {c} channels, stem expects {}", cfg.in_channels),
        ));
    }
    if h % 16 != 0 || w % 16 != 0 || h < 32 || w < 32 {
        let pad = |v: usize| v.max(32).div_ceil(16) * 16;
        return Err(Error::shape(
            "convstem_forward",
            format!(
                "image extents {h}x{w} must be multiples of 16 and at least 32; pad to {}x{}",
                pad(h),
                pad(w)
            ),
        ));
    }
    Ok((h / 16, w / 16))
}

pub fn forward(image: &Var, cfg: &ConvStemConfig, p: &ParamVars) -> Result<ConvStemOutput<Var>> {
    let (grid_h, grid_w) = check_image(image.value(), cfg)?;
    let mut x = image.clone();
    let mut taps = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        x = x.conv2d(p.get(&format!("stem.stage{s}.conv.weight"))?, None, STRIDE, 1)?;
        x = x.layer_norm(
            p.get(&format!("stem.stage{s}.norm.weight"))?,
            p.get(&format!("stem.stage{s}.norm.bias"))?,
            NORM_EPS,
        )?;
        x = x.gelu()?;
        taps.push(x.clone());
    }
    let proj = x.conv2d(p.get("stem.proj.weight")?, Some(p.get("stem.proj.bias")?), 1, 0)?;
    let n = proj.shape()[0];
    let tokens = proj
        .reshape(&[n, cfg.out_dim, grid_h * grid_w])?
        .permute(&[0, 2, 1])?;
    let mut taps = taps.into_iter();
    let _s2 = taps.next();
    Ok(ConvStemOutput {
        s4: taps.next().expect("four stages"),
        s8: taps.next().expect("four stages"),
        tokens_s16: tokens,
        grid_h,
        grid_w,
    })
}

/// Untracked forward pass.
pub fn convstem_forward(
    image: &Tensor,
    cfg: &ConvStemConfig,
    params: &ParamStore,
) -> Result<ConvStemOutput<Tensor>> {
    let out = forward(&Var::constant(image.clone()), cfg, &ParamVars::constants(params))?;
    Ok(ConvStemOutput {
        s4: out.s4.into_value(),
        s8: out.s8.into_value(),
        tokens_s16: out.tokens_s16.into_value(),
        grid_h: out.grid_h,
        grid_w: out.grid_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_count() {
        assert_eq!(param_count(&ConvStemConfig::full_scale()), 4_079_712);
        assert_eq!(
            crate::params::count(&param_specs(&ConvStemConfig::full_scale())),
            4_079_712
        );
    }

    #[test]
    fn unit_config_enumerates() {
        // base 1: stages 1->1->2->4->8 channels, 1x1 proj 8->1 with bias.
        let cfg = ConvStemConfig {
            in_channels: 1,
            base_channels: 1,
            out_dim: 1,
        };
        let by_hand = (9 + 2) + (1 * 2 * 9 + 4) + (2 * 4 * 9 + 8) + (4 * 8 * 9 + 16) + (8 + 1);
        assert_eq!(param_count(&cfg), by_hand);
        assert_eq!(crate::params::count(&param_specs(&cfg)), by_hand);
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(
            convstem_receptive_field(&ConvStemConfig::full_scale()),
            ReceptiveField { size: 31, stride: 16 }
        );
        assert_eq!(receptive_field(&[(3, 2)]), ReceptiveField { size: 3, stride: 2 });
    }

    #[test]
    fn desk_shapes() {
        let cfg = ConvStemConfig::desk();
        let params = ParamStore::init(&param_specs(&cfg), 0).unwrap();
        let img = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        let out = convstem_forward(&img, &cfg, &params).unwrap();
        assert_eq!(out.s4.shape(), &[1, 16, 16, 16]);
        assert_eq!(out.s8.shape(), &[1, 32, 8, 8]);
        assert_eq!(out.tokens_s16.shape(), &[1, 16, 64]);
    }

    #[test]
    fn zero_params_zero_image_give_zero() {
        let cfg = ConvStemConfig::desk();
        let mut params = ParamStore::init(&param_specs(&cfg), 0).unwrap();
        for spec in param_specs(&cfg) {
            params.set(&spec.name, Tensor::zeros(&spec.shape).unwrap()).unwrap();
        }
        let img = Tensor::zeros(&[1, 3, 32, 32]).unwrap();
        let out = convstem_forward(&img, &cfg, &params).unwrap();
        for t in [&out.s4, &out.s8, &out.tokens_s16] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_extent_reports_padding() {
        let cfg = ConvStemConfig::desk();
        let params = ParamStore::init(&param_specs(&cfg), 0).unwrap();
        let img = Tensor::zeros(&[1, 3, 40, 64]).unwrap();
        let msg = convstem_forward(&img, &cfg, &params).unwrap_err().to_string();
        assert!(msg.contains("pad to 48x64"), "{msg}");
    }
}
