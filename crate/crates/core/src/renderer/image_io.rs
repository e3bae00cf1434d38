use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Floating-point RGB image, `height x width x 3` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(width: usize, height: usize) -> Result<(u32, u32)> {
    let conv = |v: usize| u32::try_from(v).map_err(|_| Error::Param(format!("image dimension {v} too large")));
    Ok((conv(width)?, conv(height)?))
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let (w, h) = dims(image.width, image.height)?;
    let buf = RgbImage::from_raw(w, h, image.to_bytes())
        .ok_or_else(|| Error::Param("image buffer does not match its dimensions".into()))?;
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Binary PPM (P6).
pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let (w, h) = dims(image.width, image.height)?;
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&image.to_bytes(), w, h, ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Binary PGM (P5), 255 where the mask is set.
pub fn write_mask_pgm(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    let (w, h) = dims(width, height)?;
    if mask.len() != width * height {
        return Err(Error::Param("mask length does not match its dimensions".into()));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w, h, ExtendedColorType::L8)?;
    Ok(())
}

/// Load any supported image as RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::zeros(3, 2);
        img.data[0] = 1.0;
        img.data[4] = 0.5;
        img.data[17] = 2.0;
        write_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[4], 128.0 / 255.0);
        assert_eq!(back.data[17], 1.0);
    }

    #[test]
    fn pnm_headers() {
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("a.ppm");
        let pgm = dir.path().join("a.pgm");
        write_ppm(&Image::zeros(4, 2), &ppm).unwrap();
        write_mask_pgm(&[true, false, false, true], 2, 2, &pgm).unwrap();
        let p6 = std::fs::read(&ppm).unwrap();
        let p5 = std::fs::read(&pgm).unwrap();
        assert!(p6.starts_with(b"P6"));
        assert_eq!(p6.len() - 4 * 2 * 3, p6.iter().rposition(|&b| b == b'\n').unwrap() + 1);
        assert!(p5.starts_with(b"P5"));
        assert_eq!(&p5[p5.len() - 4..], &[255, 0, 0, 255]);
    }
}
