//! Per-part attention maps from encoder affinities, written as grayscale
//! PGM images plus a red overlay on the input.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::{Mode, Session};
use crate::tensor::{Scalar, Tensor};
use crate::train::data::{normalize_byte, read_rgb};

/// One part's spatial attention, quantized to `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMap {
    pub block: usize,
    pub part: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`.
    pub values: Vec<u8>,
    pub source: String,
}

impl AttentionMap {
    pub fn file_name(&self) -> String {
        format!("block{}_part{}.pgm", self.block, self.part)
    }
}

/// Mean over heads of one sample's `[B, G, N, L]` affinity: `N` rows of `L`.
pub fn head_average<T: Scalar>(weights: &Tensor<T>, sample: usize) -> Result<Vec<Vec<f64>>> {
    let [b, g, n, l] = weights.shape()[..] else {
        return Err(Error::dim("head_average", format!("expected [B, G, N, L], got {:?}", weights.shape())));
    };
    if sample >= b {
        return Err(Error::Index(format!("sample {sample} of a batch of {b}")));
    }
    let d = weights.data();
    Ok((0..n)
        .map(|p| {
            (0..l)
                .map(|i| (0..g).map(|h| d[((sample * g + h) * n + p) * l + i].as_f64()).sum::<f64>() / g as f64)
                .collect()
        })
        .collect())
}

/// Min–max normalization to `[0, 255]`, rounding half away from zero.
/// A constant row maps to all zeros.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // also covers empty rows (hi = -inf)
pub fn quantize(row: &[f64]) -> Vec<u8> {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; row.len()];
    }
    row.iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes binary (`P5`) PGM.
pub fn write_pgm(map: &AttentionMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, map.values.clone())
        .ok_or_else(|| Error::dim("write_pgm", "map size does not match its values"))?;
    write_pnm(path, img.as_raw(), img.width(), img.height(), ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))
}

/// Writes binary (`P6`) PPM.
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    write_pnm(path, img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

fn write_pnm(path: &Path, data: &[u8], width: u32, height: u32, color: ExtendedColorType, subtype: PnmSubtype) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file).with_subtype(subtype).write_image(data, width, height, color)?;
    Ok(())
}

/// Reads a grayscale PNM file as `(height, width, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// `rgb` (channel-major `[3, H, W]` bytes) with the map, nearest-neighbor
/// upsampled to `H × W`, blended at 50% into the red channel; green and
/// blue are halved.
pub fn overlay(map: &AttentionMap, rgb: &[u8], height: usize, width: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let my = y * map.height / height;
        let mx = x * map.width / width;
        let m = map.values[my * map.width + mx] as f64;
        let px = |c: usize| rgb[(c * height + y) * width + x] as f64;
        image::Rgb([
            (0.5 * px(0) + 0.5 * m).round() as u8,
            (0.5 * px(1)).round() as u8,
            (0.5 * px(2)).round() as u8,
        ])
    })
}

/// Runs the model on one image and returns the head-averaged, normalized
/// maps of the selected parts at encoder `block` (0-based over all blocks;
/// for a parts-head model the classification encoder is the last index).
pub fn attention_maps<T: Scalar>(
    model: &Model<T>,
    rgb: &[u8],
    height: usize,
    width: usize,
    block: usize,
    parts: &[usize],
    source: &str,
) -> Result<Vec<AttentionMap>> {
    let input = Tensor::<T>::from_fn(&[1, 3, height, width], |i| T::from_f64_lossy(normalize_byte(rgb[i])));
    let mut s = Session::new(&model.params, Mode::Eval, 0);
    let x = s.constant(input);
    let out = model.forward(&mut s, x, 0.0)?;
    let blocks = out.affinities.len();
    let aff = out
        .affinities
        .get(block)
        .ok_or_else(|| Error::Index(format!("block {block}; the model has {blocks} encoder blocks")))?;
    if let Some(&bad) = parts.iter().find(|&&p| p >= aff.parts) {
        return Err(Error::Index(format!("part {bad}; block {block} has {} parts", aff.parts)));
    }
    let rows = head_average(s.tape.value(aff.affinity.weights), 0)?;
    Ok(parts
        .iter()
        .map(|&p| AttentionMap {
            block,
            part: p,
            height: aff.height,
            width: aff.width,
            values: quantize(&rows[p]),
            source: source.to_string(),
        })
        .collect())
}

/// Loads an image file (resized to `size × size` when given), writes
/// `block{i}_part{j}.pgm` and `block{i}_part{j}_overlay.ppm` per part into
/// `out_dir`, and returns the maps with the written paths.
pub fn export_affinity<T: Scalar>(
    model: &Model<T>,
    image: &Path,
    size: Option<usize>,
    block: usize,
    parts: &[usize],
    out_dir: &Path,
) -> Result<Vec<(AttentionMap, PathBuf)>> {
    let (rgb, h, w) = read_rgb(image, size)?;
    let maps = attention_maps(model, &rgb, h, w, block, parts, &image.display().to_string())?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(maps.len());
    for m in maps {
        let path = out_dir.join(m.file_name());
        write_pgm(&m, &path)?;
        write_ppm(&overlay(&m, &rgb, h, w), &out_dir.join(format!("block{}_part{}_overlay.ppm", m.block, m.part)))?;
        written.push((m, path));
    }
    Ok(written)
}
