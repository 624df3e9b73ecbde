//! End-to-end extractor, the toy dense training objective, and ensembled
//! inference.

use rayon::prelude::*;

use crate::convstem::{self, ConvStemConfig};
use crate::decoder::{self, DecoderConfig, FillMode};
use crate::encoder::{self, pos_embed_2d, EncoderConfig};
use crate::error::{Error, Result};
use crate::fpn::{self, Pyramid, PyramidFeatures, LEVEL_STRIDES};
use crate::params::{conv_specs, ParamSpec, ParamStore, ParamVars};
use crate::sampler::{sample_grid, SampleSpec, SampledSet};
use crate::tensor::{Tape, Tensor, Var};

pub const HEAD_PREFIX: &str = "head";
pub const HEAD_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub convstem: ConvStemConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub fpn_dim: usize,
    pub train_spec: SampleSpec,
    pub infer_spec: SampleSpec,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            convstem: ConvStemConfig::full_scale(),
            encoder: EncoderConfig::full_scale(),
            decoder: DecoderConfig::full_scale(),
            fpn_dim: 256,
            train_spec: SampleSpec::random(0.5, 0),
            infer_spec: SampleSpec::full(),
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            convstem: ConvStemConfig::desk(),
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            fpn_dim: 32,
            train_spec: SampleSpec::random(0.5, 0),
            infer_spec: SampleSpec::full(),
        }
    }

    /// Smallest configuration for whole-pipeline finite differences. Every
    /// width is at most 8 except the last stem stage, which doubling forces
    /// to 16.
    pub fn tiny() -> Self {
        ModelConfig {
            convstem: ConvStemConfig {
                in_channels: 3,
                base_channels: 2,
                out_dim: 8,
            },
            encoder: EncoderConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 1,
            },
            decoder: DecoderConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 1,
                fill_mode: FillMode::ConvStemFeature,
            },
            fpn_dim: 4,
            train_spec: SampleSpec::random(0.5, 0),
            infer_spec: SampleSpec::full(),
        }
    }

    pub fn with_train_spec(self, train_spec: SampleSpec) -> Self {
        ModelConfig { train_spec, ..self }
    }

    pub fn with_decoder(self, decoder: DecoderConfig) -> Self {
        ModelConfig { decoder, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        self.convstem.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train_spec.validate()?;
        self.infer_spec.validate()?;
        if self.convstem.out_dim != self.encoder.dim {
            return Err(Error::invalid(
                "ModelConfig",
                format!(
                    "stem out_dim {} differs from encoder dim {}",
                    self.convstem.out_dim, self.encoder.dim
                ),
            ));
        }
        if self.fpn_dim == 0 {
            return Err(Error::invalid("ModelConfig", "fpn_dim must be positive"));
        }
        Ok(())
    }

    pub fn fpn_inputs(&self) -> [usize; 4] {
        [
            self.convstem.s4_channels(),
            self.convstem.s8_channels(),
            self.decoder.dim,
            self.decoder.dim,
        ]
    }

    /// Extractor parameters, without the training head.
    pub fn extractor_specs(&self) -> Vec<ParamSpec> {
        let mut specs = convstem::param_specs(&self.convstem);
        specs.extend(encoder::param_specs(&self.encoder));
        specs.extend(decoder::param_specs(&self.decoder, self.encoder.dim));
        specs.extend(fpn::param_specs(self.fpn_inputs(), self.fpn_dim));
        specs
    }

    pub fn head_specs(&self) -> Vec<ParamSpec> {
        conv_specs(HEAD_PREFIX, self.fpn_dim, HEAD_CHANNELS, 1, true)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.extractor_specs();
        specs.extend(self.head_specs());
        specs
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        ParamStore::init(&self.param_specs(), seed)
    }
}

/// Forward with an explicit sampled set.
pub fn forward_with_set(image: &Var, cfg: &ModelConfig, p: &ParamVars, set: &SampledSet) -> Result<Pyramid<Var>> {
    let stem = convstem::forward(image, &cfg.convstem, p)?;
    let (gh, gw) = (stem.grid_h, stem.grid_w);
    let pos = pos_embed_2d(gh, gw, cfg.encoder.dim)?;
    let encoded = encoder::encode_partial(&stem.tokens_s16, &pos, set, &cfg.encoder, p)?;
    let full = decoder::fill_full_sequence(&encoded, &stem.tokens_s16, set, gh, gw, &cfg.decoder, p)?;
    let s16 = decoder::decode(&full, &cfg.decoder, p, gh, gw)?;
    fpn::build_pyramid(&stem.s4, &stem.s8, &s16, p)
}

fn token_grid(image: &Tensor) -> Result<(usize, usize)> {
    let [_, _, h, w] = image.dims4("forward")?;
    Ok((h / 16, w / 16))
}

pub fn forward_var(image: &Var, cfg: &ModelConfig, p: &ParamVars, spec: &SampleSpec) -> Result<Pyramid<Var>> {
    let (gh, gw) = token_grid(image.value())?;
    let set = sample_grid(gh.max(1), gw.max(1), spec)?;
    forward_with_set(image, cfg, p, &set)
}

/// Untracked forward pass.
pub fn forward(image: &Tensor, cfg: &ModelConfig, params: &ParamStore, spec: &SampleSpec) -> Result<PyramidFeatures> {
    let p = ParamVars::constants(params);
    Ok(forward_var(&Var::constant(image.clone()), cfg, &p, spec)?.map(Var::into_value))
}

/// Mean over the four levels of the squared error between the shared 1x1
/// head and the image average-pooled to that level's stride.
pub fn task_loss(image: &Var, pyramid: &Pyramid<Var>, p: &ParamVars) -> Result<Var> {
    let weight = p.get(&format!("{HEAD_PREFIX}.weight"))?;
    let bias = p.get(&format!("{HEAD_PREFIX}.bias"))?;
    let target = Var::constant(image.value().clone());
    let mut total: Option<Var> = None;
    for (level, stride) in pyramid.levels().into_iter().zip(LEVEL_STRIDES) {
        let pred = level.conv2d(weight, Some(bias), 1, 0)?;
        let err = pred.sub(&target.avg_pool2d(stride, stride)?)?.square()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(&err)?,
            None => err,
        });
    }
    total.expect("four levels").scale(0.25)
}

/// Loss and the gradient of every parameter.
pub fn loss_and_grads(
    params: &ParamStore,
    batch: &Tensor,
    cfg: &ModelConfig,
    spec: &SampleSpec,
) -> Result<(f64, ParamStore)> {
    let tape = Tape::new();
    let p = ParamVars::track(params, &tape);
    let image = Var::constant(batch.clone());
    let pyramid = forward_var(&image, cfg, &p, spec)?;
    let loss = task_loss(&image, &pyramid, &p)?;
    let value = loss.value().item()?;
    let grads = loss.backward()?;
    Ok((value, p.gradients(&grads)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::from_params(cfg.init_params(seed)?, seed)
    }

    pub fn from_params(params: ParamStore, seed: u64) -> Result<Self> {
        Ok(TrainState {
            m: params.zeros_like()?,
            v: params.zeros_like()?,
            params,
            step: 0,
            seed,
            adam: AdamConfig::default(),
        })
    }

    /// Sampling spec for the current step: the configured train spec on
    /// substream `step`.
    pub fn step_spec(&self, cfg: &ModelConfig) -> SampleSpec {
        cfg.train_spec.substream(self.step)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Tensor, cfg: &ModelConfig) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.params, batch, cfg, &self.step_spec(cfg))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.apply_adam(&grads)?;
        self.step += 1;
        Ok(loss)
    }

    fn apply_adam(&mut self, grads: &ParamStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name)?;
            let m = self.m.get(&name)?.zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g)?;
            let v = self.v.get(&name)?.zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
            let delta = m.zip_map(&v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            let p = self.params.get(&name)?.zip_map(&delta, |p, d| p - d)?;
            self.params.set(&name, p)?;
            self.m.set(&name, m)?;
            self.v.set(&name, v)?;
        }
        Ok(())
    }
}

/// Average of `k` forwards with random sampling on substreams
/// `seed, seed + 1, ..., seed + k - 1`.
pub fn ensemble_infer(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &ParamStore,
    ratio: f64,
    k: usize,
    seed: u64,
) -> Result<PyramidFeatures> {
    if k == 0 {
        return Err(Error::invalid("ensemble_infer", "k must be at least 1"));
    }
    let base = SampleSpec::random(ratio, seed);
    base.validate()?;
    let members: Vec<PyramidFeatures> = (0..k as u64)
        .into_par_iter()
        .map(|i| forward(image, cfg, params, &base.substream(i)))
        .collect::<Result<_>>()?;
    let inv = 1.0 / k as f64;
    let sum_level = |pick: fn(&PyramidFeatures) -> &Tensor| -> Result<Tensor> {
        let first = pick(&members[0]);
        let mut acc = first.to_vec();
        for m in &members[1..] {
            acc.iter_mut().zip(pick(m).data()).for_each(|(a, b)| *a += b);
        }
        Tensor::new(first.shape(), acc.into_iter().map(|v| v * inv).collect())
    };
    Ok(Pyramid {
        p2: sum_level(|p| &p.p2)?,
        p3: sum_level(|p| &p.p3)?,
        p4: sum_level(|p| &p.p4)?,
        p5: sum_level(|p| &p.p5)?,
    })
}

/// Task loss on `batch` with features from `k`-member ensembling at `ratio`,
/// or the full path when `ratio >= 1`.
pub fn evaluate_loss(batch: &Tensor, cfg: &ModelConfig, params: &ParamStore, ratio: f64, k: usize, seed: u64) -> Result<f64> {
    let pyramid = if ratio >= 1.0 {
        forward(batch, cfg, params, &SampleSpec::full())?
    } else {
        ensemble_infer(batch, cfg, params, ratio, k, seed)?
    };
    let p = ParamVars::constants(params);
    let image = Var::constant(batch.clone());
    task_loss(&image, &pyramid.map(Var::constant), &p)?.value().item()
}
