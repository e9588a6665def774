//! 8-bit RGB output as PNG or binary PPM.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use nit_core::{NitError, Result};

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    /// Quantizes a `3 × h × w` image in `[0, 1]`, clamping outliers.
    pub fn from_chw(img: &Array3<f32>) -> Result<Self> {
        let (c, h, w) = img.dim();
        if c != 3 {
            return Err(NitError::Shape(format!("expected 3 channels, got {c}")));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = img[[ch, y, x]];
                    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                    data.push((v * 255.0).round() as u8);
                }
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn encode_png(img: &Rgb8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| NitError::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| NitError::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Writes PNG or PPM depending on the extension (`.ppm`, anything else PNG).
pub fn write_image(path: &Path, img: &Rgb8) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_and_png_decodes() {
        let img = Array3::from_shape_fn((3, 2, 3), |(c, y, x)| (c + y + x) as f32 / 4.0);
        let rgb = Rgb8::from_chw(&img).unwrap();
        assert_eq!(rgb.get(2, 1), [191, 255, 255]);
        assert_eq!(rgb.get(0, 0), [0, 64, 128]);
        let ppm = encode_ppm(&rgb);
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);

        let bytes = encode_png(&rgb).unwrap();
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (3, 2));
        assert_eq!(&buf[..info.buffer_size()], &rgb.data[..]);
    }

    #[test]
    fn clamps_and_rejects() {
        let img = Array3::from_shape_fn((3, 1, 1), |(c, _, _)| [-1.0, 2.0, f32::NAN][c]);
        assert_eq!(Rgb8::from_chw(&img).unwrap().data, vec![0, 255, 0]);
        assert!(Rgb8::from_chw(&Array3::zeros((1, 2, 2))).is_err());
    }
}
