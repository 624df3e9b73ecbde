#![allow(dead_code)]

use mimdet_core::params::ParamStore;
use mimdet_core::pipeline::ModelConfig;
use mimdet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

pub fn image(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    uniform(rng, &[n, 3, h, w], 0.0, 1.0)
}

pub fn desk_params(seed: u64) -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig::desk();
    let params = cfg.init_params(seed).unwrap();
    (cfg, params)
}

/// Direct quadruple-sum cross-correlation.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.dims4("naive").unwrap();
    let [cout, _, k, _] = w.dims4("naive").unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for b_ in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((b_ * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdat[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b_ * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

pub fn pyramid_distance(a: &mimdet_core::fpn::PyramidFeatures, b: &mimdet_core::fpn::PyramidFeatures) -> f64 {
    a.levels()
        .iter()
        .zip(b.levels())
        .map(|(x, y)| x.zip_map(y, |p, q| (p - q).powi(2)).unwrap().sum())
        .sum::<f64>()
        .sqrt()
}

pub fn pyramid_max_diff(a: &mimdet_core::fpn::PyramidFeatures, b: &mimdet_core::fpn::PyramidFeatures) -> f64 {
    a.levels()
        .iter()
        .zip(b.levels())
        .map(|(x, y)| x.max_abs_diff(y).unwrap())
        .fold(0.0, f64::max)
}
