//! Parameter accounting for the full-scale and desk configurations.
//!
//! The published totals describe a whole detector, so the report adds a
//! closed-form count for a reference two-stage detection head (region
//! proposal network, a four-conv one-fc box head with norms, class and box
//! predictors, and a four-conv mask head with norms). Those heads are counted,
//! never built.

use std::fmt;

use crate::convstem;
use crate::decoder;
use crate::encoder;
use crate::fpn;
use crate::params::count;
use crate::pipeline::ModelConfig;

pub const STEM_TARGET: usize = 4_079_712;
pub const STEM_TO_ENCODER_LIMIT: f64 = 0.05;
/// Published detector totals for decoder depths 1, 2, 4 and 8.
pub const PUBLISHED_TOTALS: [(usize, usize); 4] =
    [(1, 118_000_000), (2, 121_000_000), (4, 127_000_000), (8, 140_000_000)];
pub const TOTAL_TOLERANCE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadCounts {
    pub rpn: usize,
    pub box_head: usize,
    pub box_predictor: usize,
    pub mask_head: usize,
}

impl HeadCounts {
    pub fn total(&self) -> usize {
        self.rpn + self.box_head + self.box_predictor + self.mask_head
    }
}

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

fn fc(i: usize, o: usize) -> usize {
    i * o + o
}

/// Reference heads over a `dim`-channel pyramid with 3 anchors per location,
/// 80 classes, 7x7 box pooling and a 1024-wide fc.
pub fn detector_head_reference_params(dim: usize) -> HeadCounts {
    let (anchors, classes, fc_dim) = (3, 80, 1024);
    let norm = 2 * dim;
    HeadCounts {
        rpn: 2 * conv(dim, dim, 3, true) + conv(dim, anchors, 1, true) + conv(dim, 4 * anchors, 1, true),
        box_head: 4 * (conv(dim, dim, 3, false) + norm) + fc(dim * 7 * 7, fc_dim),
        box_predictor: fc(fc_dim, classes + 1) + fc(fc_dim, 4 * classes),
        mask_head: 4 * (conv(dim, dim, 3, false) + norm) + conv(dim, dim, 2, true) + conv(dim, classes, 1, true),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub stem: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub fpn: usize,
    pub head: usize,
    pub heads_reference: HeadCounts,
    pub decoder_depth: usize,
}

impl ParamReport {
    pub fn new(cfg: &ModelConfig) -> Self {
        ParamReport {
            stem: convstem::param_count(&cfg.convstem),
            encoder: encoder::param_count(&cfg.encoder),
            decoder: decoder::param_count(&cfg.decoder, cfg.encoder.dim),
            fpn: fpn::param_count(cfg.fpn_inputs(), cfg.fpn_dim),
            head: count(&cfg.head_specs()),
            heads_reference: detector_head_reference_params(cfg.fpn_dim),
            decoder_depth: cfg.decoder.depth,
        }
    }

    pub fn extractor(&self) -> usize {
        self.stem + self.encoder + self.decoder + self.fpn
    }

    pub fn with_reference_heads(&self) -> usize {
        self.extractor() + self.heads_reference.total()
    }

    pub fn stem_to_encoder(&self) -> f64 {
        self.stem as f64 / self.encoder as f64
    }

    pub fn published_total(&self) -> Option<usize> {
        PUBLISHED_TOTALS
            .iter()
            .find(|(d, _)| *d == self.decoder_depth)
            .map(|&(_, t)| t)
    }

    /// Relative deviation of extractor plus reference heads from the
    /// published total for this decoder depth.
    pub fn total_delta(&self) -> Option<f64> {
        self.published_total()
            .map(|t| (self.with_reference_heads() as f64 - t as f64) / t as f64)
    }

    pub fn extractor_delta(&self) -> Option<f64> {
        self.published_total()
            .map(|t| (self.extractor() as f64 - t as f64) / t as f64)
    }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, name: &str, n: usize| {
            writeln!(f, "{name:<28}{n:>14}  {:>9}", millions(n))
        };
        row(f, "convstem", self.stem)?;
        row(f, "encoder", self.encoder)?;
        row(f, &format!("decoder (depth {})", self.decoder_depth), self.decoder)?;
        row(f, "fpn", self.fpn)?;
        row(f, "extractor total", self.extractor())?;
        row(f, "toy head (not counted)", self.head)?;
        writeln!(f, "stem/encoder ratio          {:>14.5}", self.stem_to_encoder())?;
        let h = &self.heads_reference;
        row(f, "ref rpn", h.rpn)?;
        row(f, "ref box head", h.box_head)?;
        row(f, "ref box predictor", h.box_predictor)?;
        row(f, "ref mask head", h.mask_head)?;
        row(f, "extractor + ref heads", self.with_reference_heads())?;
        if let (Some(t), Some(d), Some(e)) = (self.published_total(), self.total_delta(), self.extractor_delta()) {
            writeln!(
                f,
                "published total {}: delta {:+.2}% with ref heads, {:+.2}% extractor only",
                millions(t),
                100.0 * d,
                100.0 * e
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_breakdown() {
        let r = ParamReport::new(&ModelConfig::full_scale());
        assert_eq!(r.stem, STEM_TARGET);
        assert_eq!(r.encoder, 85_056_000);
        assert_eq!(r.decoder, 13_398_528);
        assert_eq!(r.fpn, 2_770_944);
        assert_eq!(r.extractor(), 105_305_184);
        assert_eq!(r.heads_reference.total(), 19_446_768);
        assert!(r.total_delta().unwrap().abs() < TOTAL_TOLERANCE);
    }

    #[test]
    fn reference_head_terms() {
        let h = detector_head_reference_params(256);
        assert_eq!(h.rpn, 1_184_015);
        assert_eq!(h.box_head, 15_207_424);
        assert_eq!(h.box_predictor, 411_025);
        assert_eq!(h.mask_head, 2_644_304);
    }
}
