mod common;

use common::{desk_params, image, rng};
use mimdet_core::checkpoint::{self, load_checkpoint, load_params, save_checkpoint, save_params, Dtype};
use mimdet_core::convstem::convstem_forward;
use mimdet_core::imageio::{read_image_ppm, read_pgm, write_feature_pgm, write_image_ppm};
use mimdet_core::params::ParamStore;
use mimdet_core::pipeline::{ModelConfig, TrainState};
use mimdet_core::{Error, Tensor};

#[test]
fn desk_params_roundtrip_through_file() {
    let (_, params) = desk_params(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_params(&params, &path, Dtype::F64).unwrap();
    let back = load_params(&path).unwrap();
    assert!(back.bit_eq(&params));
    assert_eq!(back.names().collect::<Vec<_>>(), params.names().collect::<Vec<_>>());
}

#[test]
fn f32_checkpoint_is_close() {
    let (_, params) = desk_params(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p32.ckpt");
    save_params(&params, &path, Dtype::F32).unwrap();
    let back = load_params(&path).unwrap();
    assert!(back.same_layout(&params));
    for ((_, a), (_, b)) in back.iter().zip(params.iter()) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-7);
    }
}

#[test]
fn truncation_names_the_entry() {
    let (_, params) = desk_params(3);
    let bytes = checkpoint::encode(&params, Dtype::F64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let err = load_params(&path).unwrap_err();
    let last = params.names().last().unwrap().to_string();
    assert!(matches!(err, Error::Checkpoint { .. }));
    assert!(err.to_string().contains(&last), "{err}");
    assert!(err.to_string().contains("cut.ckpt"), "{err}");
}

#[test]
fn empty_store_roundtrips() {
    let empty = ParamStore::default();
    let bytes = checkpoint::encode(&empty, Dtype::F64);
    let back = checkpoint::decode(&bytes, std::path::Path::new("empty")).unwrap();
    assert_eq!(back.len(), 0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = ModelConfig::desk();
    let mut r = rng(4);
    let batch = image(&mut r, 1, 64, 64);
    let mut a = TrainState::new(&cfg, 3).unwrap();
    for _ in 0..2 {
        a.train_step(&batch, &cfg).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&a, &path).unwrap();
    let mut b = load_checkpoint(&path).unwrap();
    assert_eq!(a, b);
    let la = a.train_step(&batch, &cfg).unwrap();
    let lb = b.train_step(&batch, &cfg).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(a, b);
}

#[test]
fn ppm_roundtrip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(&[1, 3, 4, 5], |i| (i % 256) as f64 / 255.0).unwrap();
    let path = dir.path().join("a.ppm");
    write_image_ppm(&img, &path).unwrap();
    let back = read_image_ppm(&path).unwrap();
    assert_eq!(back.shape(), &[1, 3, 4, 5]);
    assert!(back.max_abs_diff(&img).unwrap() < 1e-12);

    let ascii = dir.path().join("b.ppm");
    std::fs::write(&ascii, "P3\n1 1\n255\n0 0 0\n").unwrap();
    assert!(matches!(read_image_ppm(&ascii), Err(Error::Image { .. })));
    let junk = dir.path().join("c.ppm");
    std::fs::write(&junk, "hello").unwrap();
    assert!(read_image_ppm(&junk).is_err());
}

#[test]
fn feature_pgm_dimensions_and_flat_gray() {
    let dir = tempfile::tempdir().unwrap();
    let map = Tensor::full(&[1, 4, 6, 9], 0.3).unwrap();
    let paths = write_feature_pgm(&map, dir.path(), "flat", true).unwrap();
    assert_eq!(paths.len(), 2);
    for p in &paths {
        let (w, h, px) = read_pgm(p).unwrap();
        assert_eq!((w, h), (9, 6));
        assert!(px.iter().all(|&v| v == 128));
    }
}

fn step_edge(size: usize, edge: usize) -> Tensor {
    Tensor::from_fn(&[1, 3, size, size], |i| if i % size >= edge { 1.0 } else { 0.0 }).unwrap()
}

/// Column means of the variance map over interior rows.
fn column_profile(px: &[u8], w: usize, h: usize) -> Vec<f64> {
    (0..w)
        .map(|x| (1..h - 1).map(|y| px[y * w + x] as f64).sum::<f64>() / (h - 2) as f64)
        .collect()
}

#[test]
fn step_edge_variance_map() {
    let (cfg, params) = desk_params(0);
    let img = step_edge(64, 32);
    let dir = tempfile::tempdir().unwrap();
    let ppm = dir.path().join("edge.ppm");
    write_image_ppm(&img, &ppm).unwrap();
    let loaded = read_image_ppm(&ppm).unwrap();
    let s4 = convstem_forward(&loaded, &cfg.convstem, &params).unwrap().s4;
    let paths = write_feature_pgm(&s4, dir.path(), "s4", true).unwrap();
    let (w, h, var) = read_pgm(&paths[1]).unwrap();
    assert_eq!((w, h), (16, 16));
    let prof = column_profile(&var, w, h);
    let edge = prof[7].max(prof[8]);
    let dark = prof[2..5].iter().sum::<f64>() / 3.0;
    let bright = prof[11..14].iter().sum::<f64>() / 3.0;
    println!("variance profile {prof:?}");
    println!("edge {edge} dark {dark} bright {bright}");
    assert!(edge >= 10.0 * dark, "edge {edge} vs dark {dark}");
}
