mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{desk_params, image, pyramid_distance, pyramid_max_diff, rng, uniform};
use mimdet_core::checkpoint::{self, load_params, save_params, Dtype};
use mimdet_core::convstem::{self, convstem_forward, convstem_receptive_field, ConvStemConfig};
use mimdet_core::decoder::{fill_full_sequence, FillMode};
use mimdet_core::encoder::{encode_indices, pos_embed_2d};
use mimdet_core::params::{ParamStore, ParamVars};
use mimdet_core::pipeline::{ensemble_infer, forward, ModelConfig, TrainState};
use mimdet_core::report::{ParamReport, STEM_TARGET, STEM_TO_ENCODER_LIMIT, TOTAL_TOLERANCE};
use mimdet_core::sampler::{coverage_fraction, sample_grid, sample_indices, SampleSpec};
use mimdet_core::tensor::ops;
use mimdet_core::verify::{gradient_suite, random_image, synthetic_batch, GRAD_TOLERANCE};
use mimdet_core::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;

type Outcome = (bool, String);

fn stem_count() -> Outcome {
    let n = convstem::param_count(&ConvStemConfig::full_scale());
    (n == STEM_TARGET, format!("stem params {n} (target {STEM_TARGET})"))
}

fn stem_ratio() -> Outcome {
    let r = ParamReport::new(&ModelConfig::full_scale());
    let ratio = r.stem_to_encoder();
    (
        ratio < STEM_TO_ENCODER_LIMIT,
        format!("stem/encoder = {} / {} = {ratio:.4}", r.stem, r.encoder),
    )
}

/// Bitwise change of token `(ti, tj)` after bumping pixel `(y, x)`.
fn token_moves(cfg: &ConvStemConfig, params: &ParamStore, img: &Tensor, base: &Tensor, ti: usize, tj: usize, y: usize, x: usize) -> bool {
    let size = img.shape()[3];
    let g = size / 16;
    let mut d = img.to_vec();
    for c in 0..3 {
        d[(c * size + y) * size + x] += 1.0;
    }
    let out = convstem_forward(&Tensor::new(img.shape(), d).unwrap(), cfg, params).unwrap().tokens_s16;
    let dim = cfg.out_dim;
    let row = (ti * g + tj) * dim;
    out.data()[row..row + dim] != base.data()[row..row + dim]
}

fn receptive_field() -> Outcome {
    let cfg = ConvStemConfig::full_scale();
    let geom = convstem_receptive_field(&cfg);
    let (rf, stride) = (geom.size, geom.stride);
    let params = ParamStore::init(&convstem::param_specs(&cfg), 3).unwrap();
    let mut r = rng(3);
    let img = uniform(&mut r, &[1, 3, 64, 64], 0.0, 1.0);
    let base = convstem_forward(&img, &cfg, &params).unwrap().tokens_s16;
    let (ti, tj) = (2, 2);
    let (lo, hi) = (16 * tj - 15, 16 * tj + 15);
    let inside = [(32, lo), (32, hi), (lo, 32), (hi, 32)]
        .iter()
        .all(|&(y, x)| token_moves(&cfg, &params, &img, &base, ti, tj, y, x));
    let outside = [(32, lo - 1), (32, hi + 1), (lo - 1, 32), (hi + 1, 32)]
        .iter()
        .all(|&(y, x)| !token_moves(&cfg, &params, &img, &base, ti, tj, y, x));

    let tape = Tape::new();
    let x = tape.leaf(img.clone());
    let out = convstem::forward(&x, &cfg, &ParamVars::constants(&params)).unwrap();
    let g = out
        .tokens_s16
        .gather_rows(&[ti * 4 + tj])
        .unwrap()
        .sum()
        .unwrap()
        .backward()
        .unwrap()
        .wrt(&x)
        .unwrap();
    let cols: Vec<usize> = (0..64)
        .filter(|&c| (0..3 * 64).any(|row| g.data()[row * 64 + c] != 0.0))
        .collect();
    let support = cols.last().unwrap() - cols[0] + 1;
    (
        rf == 31 && stride == 16 && inside && outside && support == rf,
        format!("rf={rf} stride={stride}; perturbation edges inside={inside} outside-unchanged={outside}; gradient support {support} px"),
    )
}

fn coverage() -> Outcome {
    let grid = sample_grid(14, 14, &SampleSpec::grid(0.5)).unwrap();
    let c = coverage_fraction(&grid, 14, 14, 31, 16, 224, 224).unwrap();
    let flat = sample_indices(196, &SampleSpec::grid(0.5)).unwrap();
    let cf = coverage_fraction(&flat, 14, 14, 31, 16, 224, 224).unwrap();
    (
        c >= 0.99,
        format!("2D grid keep {} of 196 covers {:.5} (flattened stride would cover {:.5})", grid.kept().len(), c, cf),
    )
}

fn full_path() -> Outcome {
    let (cfg, params) = desk_params(5);
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let img = image(&mut r, 1, 64, 64);
        let a = forward(&img, &cfg, &params, &SampleSpec::random(1.0, i)).unwrap();
        let b = forward(&img, &cfg, &params, &SampleSpec::full()).unwrap();
        worst = worst.max(pyramid_max_diff(&a, &b));
    }
    (worst <= 1e-12, format!("10 images, max |random(1.0) - full| = {worst:e}"))
}

fn permutation() -> Outcome {
    let (cfg, params) = desk_params(6);
    let mut r = rng(6);
    let tokens = Var::constant(uniform(&mut r, &[2, 16, cfg.encoder.dim], -1.0, 1.0));
    let pos = pos_embed_2d(4, 4, cfg.encoder.dim).unwrap();
    let p = ParamVars::constants(&params);
    let kept = sample_indices(16, &SampleSpec::random(0.5, 6)).unwrap().kept().to_vec();
    let base = encode_indices(&tokens, &pos, &kept, &cfg.encoder, &p).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..kept.len()).collect();
        perm.shuffle(&mut r);
        let order: Vec<usize> = perm.iter().map(|&i| kept[i]).collect();
        let out = encode_indices(&tokens, &pos, &order, &cfg.encoder, &p).unwrap();
        let want = ops::gather_rows(base.value(), &perm).unwrap();
        worst = worst.max(out.value().max_abs_diff(&want).unwrap());
    }
    (worst < 1e-10, format!("20 permutations, max deviation {worst:e}"))
}

fn gradients() -> Outcome {
    let report = gradient_suite(0).unwrap();
    let ops_max = report.ops.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    (
        report.passes(),
        format!(
            "{} op cases max rel err {ops_max:.2e}; pipeline {} coords max rel err {:.2e} (tolerance {GRAD_TOLERANCE:e})",
            report.ops.len(),
            report.pipeline.checked,
            report.pipeline.max_rel_err
        ),
    )
}

fn training() -> Outcome {
    let cfg = ModelConfig::desk();
    let batch = synthetic_batch(2, 64, 64).unwrap();
    let run = || {
        let mut s = TrainState::new(&cfg, 0).unwrap();
        (0..300).map(|_| s.train_step(&batch, &cfg).unwrap()).collect::<Vec<f64>>()
    };
    let a = run();
    let b = run();
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let (first, last) = (a[0], a[299]);
    (
        last < 0.3 * first && same,
        format!("loss {first:.5} -> {last:.6} ({:.4}x), repeat run identical={same}", last / first),
    )
}

fn ensemble() -> Outcome {
    let cfg = ModelConfig::desk();
    let params = TrainState::new(&cfg, 0).unwrap().params;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let ks = [1, 2, 4, 8];
    let mut totals = [0.0; 4];
    let mut monotone = 0;
    for i in 0..8u64 {
        let img = random_image(&mut r, 1, 64, 64).unwrap();
        let full = forward(&img, &cfg, &params, &SampleSpec::full()).unwrap();
        let d: Vec<f64> = ks
            .iter()
            .map(|&k| pyramid_distance(&ensemble_infer(&img, &cfg, &params, 0.5, k, 100 * i).unwrap(), &full))
            .collect();
        if d.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        for (t, v) in totals.iter_mut().zip(&d) {
            *t += v;
        }
    }
    (
        monotone == 8,
        format!("{monotone}/8 images nonincreasing; summed distance k=1,2,4,8: {:.3} {:.3} {:.3} {:.3}", totals[0], totals[1], totals[2], totals[3]),
    )
}

fn fill_modes() -> Outcome {
    let (cfg, params) = desk_params(10);
    let mut r = rng(10);
    let set = sample_indices(16, &SampleSpec::random(0.5, 10)).unwrap();
    let enc = Var::constant(uniform(&mut r, &[2, set.kept().len(), cfg.encoder.dim], -1.0, 1.0));
    let stem = Var::constant(uniform(&mut r, &[2, 16, cfg.encoder.dim], -1.0, 1.0));
    let p = ParamVars::constants(&params);
    let run = |mode| {
        fill_full_sequence(&enc, &stem, &set, 4, 4, &cfg.decoder.with_fill(mode), &p)
            .unwrap()
            .into_value()
    };
    let (a, b) = (run(FillMode::MaskToken), run(FillMode::ConvStemFeature));
    let kept_same = ops::gather_rows(&a, set.kept()).unwrap().bit_eq(&ops::gather_rows(&b, set.kept()).unwrap());
    let dropped_diff = ops::gather_rows(&a, set.dropped())
        .unwrap()
        .max_abs_diff(&ops::gather_rows(&b, set.dropped()).unwrap())
        .unwrap();
    (
        kept_same && dropped_diff > 0.0,
        format!("kept rows bit-identical={kept_same}; dropped rows max difference {dropped_diff:.3}"),
    )
}

fn checkpoints() -> Outcome {
    let (_, params) = desk_params(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    save_params(&params, &path, Dtype::F64).unwrap();
    let exact = load_params(&path).unwrap().bit_eq(&params);
    let bytes = checkpoint::encode(&params, Dtype::F64);
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let rejected = load_params(&cut).is_err();
    (
        exact && rejected,
        format!("{} tensors bit-exact={exact}; half-length file rejected={rejected}", params.len()),
    )
}

fn total_params() -> Outcome {
    let r = ParamReport::new(&ModelConfig::full_scale());
    let delta = r.total_delta().unwrap();
    (
        delta.abs() <= TOTAL_TOLERANCE,
        format!(
            "extractor {} ({:+.2}%) + reference detector heads {} = {} vs {} ({:+.2}%)",
            r.extractor(),
            100.0 * r.extractor_delta().unwrap(),
            r.heads_reference.total(),
            r.with_reference_heads(),
            r.published_total().unwrap(),
            100.0 * delta
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("stem parameter count", stem_count),
        ("stem to encoder ratio", stem_ratio),
        ("receptive field", receptive_field),
        ("grid coverage", coverage),
        ("full-path equivalence", full_path),
        ("permutation equivariance", permutation),
        ("gradient suite", gradients),
        ("training smoke", training),
        ("ensemble trend", ensemble),
        ("fill-mode contract", fill_modes),
        ("checkpoint roundtrip", checkpoints),
        ("total parameters", total_params),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {detail} [{:.2?}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
