//! Binary PPM (P6) images and PGM (P5) maps, 8 bits per sample.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use cosal_core::{BinaryMask, SaliencyMap, Tensor};
use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{HarnessError, Result};

/// `[0, 1]` → nearest 8-bit level.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> HarnessError + '_ {
    move |e| HarnessError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write(path: &Path, width: usize, height: usize, bytes: &[u8], color: PnmSubtype) -> Result<()> {
    let file = File::create(path).map_err(HarnessError::io(path))?;
    let kind = match color {
        PnmSubtype::Pixmap(_) => ExtendedColorType::Rgb8,
        _ => ExtendedColorType::L8,
    };
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(color)
        .write_image(bytes, width as u32, height as u32, kind)
        .map_err(img_err(path))
}

fn read(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(img_err(path))?;
    let (w, h) = decoder.dimensions();
    let color = decoder.color_type();
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut buf).map_err(img_err(path))?;
    let bad = || HarnessError::Image {
        path: path.to_path_buf(),
        message: format!("unsupported sample layout {color:?}"),
    };
    Ok(match color {
        image::ColorType::Rgb8 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, buf).ok_or_else(bad)?),
        image::ColorType::L8 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, buf).ok_or_else(bad)?),
        _ => return Err(bad()),
    })
}

/// Writes a `3×H×W` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(HarnessError::Data(format!("image must be 3×H×W, got {:?}", image.shape())));
    };
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(to_u8(d[c * h * w + p] as f64));
        }
    }
    write(path, w, h, &bytes, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Reads a colour image as `3×H×W` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = read(path)?;
    let rgb = img.as_rgb8().ok_or_else(|| HarnessError::Image {
        path: path.to_path_buf(),
        message: "expected a colour (P6) image".into(),
    })?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = from_u8(px[c]);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    write(path, width, height, bytes, PnmSubtype::Graymap(SampleEncoding::Binary))
}

/// Reads a grey map as `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read(path)?;
    let g = img.as_luma8().ok_or_else(|| HarnessError::Image {
        path: path.to_path_buf(),
        message: "expected a grey (P5) image".into(),
    })?;
    Ok((g.width() as usize, g.height() as usize, g.as_raw().clone()))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_pgm(path, mask.width, mask.height, &bytes)
}

/// Any sample ≥ 128 is foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, bytes) = read_pgm(path)?;
    Ok(BinaryMask {
        height: h,
        width: w,
        values: bytes.iter().map(|&b| b >= 128).collect(),
    })
}

pub fn write_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    let bytes: Vec<u8> = map.values.iter().map(|&v| to_u8(v)).collect();
    write_pgm(path, map.width, map.height, &bytes)
}

pub fn read_map(path: &Path, image: usize) -> Result<SaliencyMap> {
    let (w, h, bytes) = read_pgm(path)?;
    let values = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(SaliencyMap::new(h, w, values, image)?)
}
