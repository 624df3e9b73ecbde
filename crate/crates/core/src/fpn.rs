//! Feature pyramid over the hybrid inputs: stem stride-4 and stride-8 maps,
//! the decoded stride-16 map, and a mean-pooled stride-32 map.

use crate::error::{Error, Result};
use crate::params::{conv_specs, ParamSpec, ParamVars};
use crate::tensor::Var;

pub const PREFIX: &str = "fpn";
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug)]
pub struct Pyramid<T> {
    pub p2: T,
    pub p3: T,
    pub p4: T,
    pub p5: T,
}

impl<T> Pyramid<T> {
    pub fn levels(&self) -> [&T; 4] {
        [&self.p2, &self.p3, &self.p4, &self.p5]
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Pyramid<U> {
        Pyramid {
            p2: f(self.p2),
            p3: f(self.p3),
            p4: f(self.p4),
            p5: f(self.p5),
        }
    }

    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<Pyramid<U>> {
        Ok(Pyramid {
            p2: f(self.p2)?,
            p3: f(self.p3)?,
            p4: f(self.p4)?,
            p5: f(self.p5)?,
        })
    }
}

pub type PyramidFeatures = Pyramid<crate::tensor::Tensor>;

/// `in_channels` are the channel counts of `[s4, s8, s16, s32]`; s32 shares
/// the decoder width with s16.
pub fn param_specs(in_channels: [usize; 4], fpn_dim: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (&lvl, &c) in LEVELS.iter().zip(&in_channels) {
        specs.extend(conv_specs(&format!("{PREFIX}.lateral{lvl}"), c, fpn_dim, 1, true));
    }
    for lvl in LEVELS {
        specs.extend(conv_specs(&format!("{PREFIX}.output{lvl}"), fpn_dim, fpn_dim, 3, true));
    }
    specs
}

pub fn param_count(in_channels: [usize; 4], fpn_dim: usize) -> usize {
    let lateral: usize = in_channels.iter().map(|c| c * fpn_dim + fpn_dim).sum();
    lateral + 4 * (9 * fpn_dim * fpn_dim + fpn_dim)
}

fn conv(x: &Var, p: &ParamVars, name: &str, padding: usize) -> Result<Var> {
    x.conv2d(
        p.get(&format!("{PREFIX}.{name}.weight"))?,
        Some(p.get(&format!("{PREFIX}.{name}.bias"))?),
        1,
        padding,
    )
}

pub fn build_pyramid(s4: &Var, s8: &Var, s16: &Var, p: &ParamVars) -> Result<Pyramid<Var>> {
    let [n, _, h16, w16] = s16.value().dims4("build_pyramid")?;
    let [n8, _, h8, w8] = s8.value().dims4("build_pyramid")?;
    let [n4, _, h4, w4] = s4.value().dims4("build_pyramid")?;
    if n4 != n
        || n8 != n
        || (h8, w8) != (2 * h16, 2 * w16)
        || (h4, w4) != (4 * h16, 4 * w16)
        || h16 % 2 != 0
        || w16 % 2 != 0
    {
        return Err(Error::shape(
            "build_pyramid",
            format!(
                "levels {:?}, {:?}, {:?} are not successive halvings with even stride-16 extents",
                s4.shape(),
                s8.shape(),
                s16.shape()
            ),
        ));
    }
    let s32 = s16.avg_pool2d(2, 2)?;
    let l5 = conv(&s32, p, "lateral5", 0)?;
    let l4 = conv(s16, p, "lateral4", 0)?.add(&l5.upsample_nearest2x()?)?;
    let l3 = conv(s8, p, "lateral3", 0)?.add(&l4.upsample_nearest2x()?)?;
    let l2 = conv(s4, p, "lateral2", 0)?.add(&l3.upsample_nearest2x()?)?;
    Ok(Pyramid {
        p2: conv(&l2, p, "output2", 1)?,
        p3: conv(&l3, p, "output3", 1)?,
        p4: conv(&l4, p, "output4", 1)?,
        p5: conv(&l5, p, "output5", 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_count() {
        assert_eq!(param_count([192, 384, 512, 512], 256), 2_770_944);
        assert_eq!(
            crate::params::count(&param_specs([192, 384, 512, 512], 256)),
            2_770_944
        );
    }
}
