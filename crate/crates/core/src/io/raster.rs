//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::tiling::LabelMap;

/// 8-bit RGB raster, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "RGB image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Planar `[3,H,W]` tensor scaled to `[0,1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = T::of_f64(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("shape matches")
    }
}

fn encode(width: usize, height: usize, data: &[u8], color: ExtendedColorType) -> Result<Vec<u8>> {
    let subtype = match color {
        ExtendedColorType::Rgb8 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => PnmSubtype::Graymap(SampleEncoding::Binary),
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

fn decode(bytes: &[u8], expected: ColorType, what: &str) -> Result<(usize, usize, Vec<u8>)> {
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::Format(format!("{what}: {e}")))?;
    if dec.color_type() != expected {
        return Err(Error::Format(format!("{what}: expected {expected:?}, found {:?}", dec.color_type())));
    }
    let (w, h) = dec.dimensions();
    let mut data = vec![0; dec.total_bytes() as usize];
    dec.read_image(&mut data).map_err(|e| Error::Format(format!("{what}: {e}")))?;
    Ok((h as usize, w as usize, data))
}

pub fn ppm_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    encode(img.width, img.height, &img.data, ExtendedColorType::Rgb8)
}

pub fn pgm_bytes(labels: &LabelMap) -> Result<Vec<u8>> {
    encode(labels.width, labels.height, &labels.data, ExtendedColorType::L8)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &ppm_bytes(img)?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    write_atomic(path, &pgm_bytes(labels)?)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (h, w, data) = decode(&read_file(path)?, ColorType::Rgb8, &path.display().to_string())?;
    RgbImage::new(h, w, data)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let (h, w, data) = decode(&read_file(path)?, ColorType::L8, &path.display().to_string())?;
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_is_plain_binary_netpbm() {
        let img = RgbImage::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = ppm_bytes(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1 255\n"), "{:?}", String::from_utf8_lossy(&bytes));
        assert!(bytes.ends_with(&[1, 2, 3, 4, 5, 6]));
        let lab = LabelMap::new(2, 1, vec![0, 255]).unwrap();
        let bytes = pgm_bytes(&lab).unwrap();
        assert!(bytes.starts_with(b"P5\n1 2 255\n"));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap()).unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"P9 nonsense").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = RgbImage::new(1, 2, vec![255, 0, 51, 0, 255, 0]).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rasters_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u8>()) {
            let dir = tempfile::tempdir().unwrap();
            let rgb: Vec<u8> = (0..h * w * 3).map(|i| (i as u8).wrapping_mul(seed | 1)).collect();
            let img = RgbImage::new(h, w, rgb).unwrap();
            let p = dir.path().join("a.ppm");
            write_ppm(&p, &img).unwrap();
            prop_assert_eq!(read_ppm(&p).unwrap(), img);
            let lab = LabelMap::new(h, w, (0..h * w).map(|i| (i as u8).wrapping_add(seed)).collect()).unwrap();
            let p = dir.path().join("a.pgm");
            write_pgm(&p, &lab).unwrap();
            prop_assert_eq!(read_pgm(&p).unwrap(), lab);
        }
    }
}
