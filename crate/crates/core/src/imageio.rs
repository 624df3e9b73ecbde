//! Binary PPM input and PGM feature-map dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray level written for a constant map.
pub const FLAT_GRAY: u8 = 128;

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Reads a binary (P6) PPM as `[1, 3, H, W]` with samples scaled by the
/// file's maxval into `[0, 1]`.
pub fn read_image_ppm(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let dec = PnmDecoder::new(BufReader::new(file)).map_err(|e| image_err(path, e))?;
    if dec.subtype() != PnmSubtype::Pixmap(SampleEncoding::Binary) {
        return Err(image_err(
            path,
            format!("expected a binary P6 pixmap, found {:?}", dec.subtype()),
        ));
    }
    let maxval = dec.header().maximal_sample() as f64;
    let (w, h) = dec.dimensions();
    let (w, h) = (w as usize, h as usize);
    let pixels = w
        .checked_mul(h)
        .filter(|p| p.checked_mul(6).is_some())
        .ok_or_else(|| image_err(path, format!("dimensions {w}x{h} overflow")))?;
    let wide = dec.color_type() == image::ColorType::Rgb16;
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| image_err(path, e))?;
    let samples: Vec<f64> = if wide {
        buf.chunks_exact(2)
            .map(|c| u16::from_ne_bytes([c[0], c[1]]) as f64)
            .collect()
    } else {
        buf.iter().map(|&b| b as f64).collect()
    };
    let mut data = vec![0.0; 3 * pixels];
    for (px, rgb) in samples.chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            data[c * pixels + px] = v / maxval;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Writes `[1, 3, H, W]` (or `[3, H, W]`) values in `[0, 1]` as an 8-bit P6.
pub fn write_image_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        s => return Err(Error::shape("write_image_ppm", format!("expected 3 channels, got {s:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|px| (0..3).map(move |c| (d[c * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let out = BufWriter::new(File::create(path).map_err(|e| image_err(path, e))?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

fn chw(map: &Tensor) -> Result<(usize, usize, usize)> {
    match map.shape() {
        [c, h, w] | [1, c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("feature map", format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Per-position mean over channels, row-major `H * W`.
pub fn channel_mean(map: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = chw(map)?;
    let plane = h * w;
    let d = map.data();
    Ok((0..plane)
        .map(|px| (0..c).map(|ch| d[ch * plane + px]).sum::<f64>() / c as f64)
        .collect())
}

/// Per-position population variance over channels.
pub fn channel_variance(map: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = chw(map)?;
    let plane = h * w;
    let d = map.data();
    let mean = channel_mean(map)?;
    Ok((0..plane)
        .map(|px| {
            (0..c)
                .map(|ch| (d[ch * plane + px] - mean[px]).powi(2))
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Min-max normalization to 8 bits; a constant input maps to [`FLAT_GRAY`].
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![FLAT_GRAY; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / range * 255.0).round() as u8)
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(image_err(
            path,
            format!("{} bytes for a {width}x{height} map", gray.len()),
        ));
    }
    let out = BufWriter::new(File::create(path).map_err(|e| image_err(path, e))?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(gray, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

/// Reads a binary P5 back as `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let dec = PnmDecoder::new(BufReader::new(File::open(path).map_err(|e| image_err(path, e))?)).map_err(|e| image_err(path, e))?;
    if dec.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) || dec.color_type() != image::ColorType::L8 {
        return Err(image_err(path, "expected an 8-bit binary P5 graymap"));
    }
    let (w, h) = dec.dimensions();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| image_err(path, e))?;
    Ok((w as usize, h as usize, buf))
}

/// Writes the channel-mean of `map` as `{dir}/{name}.pgm`; with
/// `with_variance` also `{dir}/{name}_var.pgm`. Returns the written paths.
pub fn write_feature_pgm(map: &Tensor, dir: &Path, name: &str, with_variance: bool) -> Result<Vec<std::path::PathBuf>> {
    let (_, h, w) = chw(map)?;
    let mut written = Vec::new();
    let mean_path = dir.join(format!("{name}.pgm"));
    write_pgm(&mean_path, w, h, &to_gray(&channel_mean(map)?))?;
    written.push(mean_path);
    if with_variance {
        let var_path = dir.join(format!("{name}_var.pgm"));
        write_pgm(&var_path, w, h, &to_gray(&channel_variance(map)?))?;
        written.push(var_path);
    }
    Ok(written)
}
