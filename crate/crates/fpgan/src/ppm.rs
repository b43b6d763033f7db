//! Binary PPM (P6) images, the artifact's sole image format.
//!
//! Pixel mapping is fixed: byte b -> b/127.5 - 1 into [-1, 1] on load;
//! on save values are clamped to [-1, 1] and quantized with
//! round-half-away-from-zero, so byte-representable values roundtrip
//! exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, 3 * width * height bytes, maxval 255.
    pub pixels: Vec<u8>,
}

impl PpmImage {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        let magic = p.take(2)?;
        if magic != b"P6" {
            return Err(Error::Format(format!(
                "P6 required, found magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let width = p.ascii_int()?;
        let height = p.ascii_int()?;
        let maxval = p.ascii_int()?;
        if maxval != 255 {
            return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the data.
        p.single_whitespace()?;
        let need = 3 * width * height;
        let rest = &p.bytes[p.pos..];
        if rest.len() < need {
            return Err(Error::Format(format!(
                "truncated pixel data: need {need} bytes, have {}",
                rest.len()
            )));
        }
        if rest.len() > need {
            return Err(Error::Format(format!(
                "{} trailing bytes after pixel data",
                rest.len() - need
            )));
        }
        Ok(PpmImage {
            width,
            height,
            pixels: rest.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Channel-major tensor [3, H, W] in [-1, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] =
                        self.pixels[(y * w + x) * 3 + c] as f32 / 127.5 - 1.0;
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data).expect("dims are consistent")
    }

    /// Quantizes a [3, H, W] tensor; values are clamped to [-1, 1] first.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::contract(format!(
                "expected a [3,H,W] tensor, got {dims:?}"
            )));
        }
        let (h, w) = (dims[1], dims[2]);
        let mut pixels = vec![0u8; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = t.data()[c * h * w + y * w + x].clamp(-1.0, 1.0);
                    // f32::round is round-half-away-from-zero; the operand is
                    // nonnegative here, so halves round up: 0.0 -> 128.
                    let b = (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8;
                    pixels[(y * w + x) * 3 + c] = b;
                }
            }
        }
        Ok(PpmImage {
            width: w,
            height: h,
            pixels,
        })
    }
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    Ok(PpmImage::decode(&bytes)?.to_tensor())
}

pub fn save_ppm(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = PpmImage::from_tensor(t)?;
    std::fs::write(path, img.encode())?;
    Ok(())
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Skips whitespace and `#` comments, then reads a decimal integer.
    fn ascii_int(&mut self) -> Result<usize> {
        loop {
            match self.peek()? {
                b' ' | b'\t' | b'\r' | b'\n' => {
                    self.pos += 1;
                }
                b'#' => {
                    while self.peek()? != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected integer in header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("header integer out of range".into()))
    }

    fn single_whitespace(&mut self) -> Result<()> {
        match self.peek()? {
            b' ' | b'\t' | b'\r' | b'\n' => {
                self.pos += 1;
                Ok(())
            }
            other => Err(Error::Format(format!(
                "expected whitespace before pixel data, found byte {other:#x}"
            ))),
        }
    }

    fn peek(&self) -> Result<u8> {
        self.bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Format("truncated header".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_pixels_map_to_unit_range() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00\xff\xff\xff\x00\x00\x00\xff\xff\xff";
        let img = PpmImage::decode(bytes).unwrap();
        let t = img.to_tensor();
        // Row 0: black, white; row 1: black, white; channel-major layout.
        for c in 0..3 {
            assert_eq!(t.data()[c * 4], -1.0);
            assert_eq!(t.data()[c * 4 + 1], 1.0);
            assert_eq!(t.data()[c * 4 + 2], -1.0);
            assert_eq!(t.data()[c * 4 + 3], 1.0);
        }
    }

    #[test]
    fn roundtrip_all_byte_values() {
        // 16x16 = 256 pixels covering every byte value in each channel.
        let mut pixels = Vec::with_capacity(256 * 3);
        for b in 0..=255u8 {
            pixels.extend_from_slice(&[b, 255 - b, b.wrapping_mul(7)]);
        }
        let img = PpmImage {
            width: 16,
            height: 16,
            pixels,
        };
        let back = PpmImage::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.encode(), img.encode());
    }

    #[test]
    fn quantization_rule() {
        let t = Tensor::from_vec(&[3, 1, 1], vec![-1.0, 1.0, 0.0]).unwrap();
        let img = PpmImage::from_tensor(&t).unwrap();
        assert_eq!(img.pixels, vec![0, 255, 128]);
    }

    #[test]
    fn ascii_ppm_rejected() {
        let err = PpmImage::decode(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("P6 required"), "{msg}");
    }

    #[test]
    fn wrong_maxval_rejected() {
        assert!(PpmImage::decode(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn truncated_data_rejected() {
        assert!(PpmImage::decode(b"P6\n2 2\n255\n\x00\x00").is_err());
    }

    #[test]
    fn header_comments_allowed() {
        let bytes = b"P6\n# a comment\n1 1\n255\n\x10\x20\x30";
        let img = PpmImage::decode(bytes).unwrap();
        assert_eq!(img.pixels, vec![0x10, 0x20, 0x30]);
    }
}
