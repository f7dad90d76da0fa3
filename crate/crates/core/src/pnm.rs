//! Binary netpbm I/O: 8-bit grayscale P5 and RGB P6.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grid of gray values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ValueCount {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }
}

/// Quantizes `v` in `[0, 1]` to a byte via `round(v * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut p = HeaderParser { buf: bytes, pos: 0 };
    let magic = p.token()?;
    if magic != b"P5" {
        return Err(Error::MalformedHeader(format!(
            "expected P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = p.number()?;
    let height = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!("only 8-bit maxval 255 is supported, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(Error::MalformedHeader("missing whitespace after maxval".into())),
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero image dimension".into()));
    }
    let len = width.checked_mul(height).ok_or(Error::DimensionOverflow)?;
    let raster = bytes
        .get(p.pos..p.pos.checked_add(len).ok_or(Error::DimensionOverflow)?)
        .ok_or_else(|| Error::MalformedHeader(format!("raster holds fewer than {len} bytes")))?;
    Ok(GrayImage {
        width,
        height,
        data: raster.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Writes interleaved RGB bytes as binary P6.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if rgb.len() != width * height * 3 {
        return Err(Error::ValueCount {
            expected: width * height * 3,
            actual: rgb.len(),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct HeaderParser<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        Ok(&self.buf[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        if !tok.iter().all(u8::is_ascii_digit) {
            return Err(Error::MalformedHeader(format!(
                "expected a number, found {:?}",
                String::from_utf8_lossy(tok)
            )));
        }
        std::str::from_utf8(tok)
            .unwrap()
            .parse()
            .map_err(|_| Error::DimensionOverflow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_bytes() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 64]);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    }

    #[test]
    fn ascii_variant_rejected() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
    }

    #[test]
    fn short_raster_rejected() {
        assert!(matches!(decode_pgm(b"P5\n4 4\n255\n\x00\x01"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn overflowing_dimensions_rejected() {
        let hdr = b"P5\n99999999999999999999999 2\n255\n";
        assert!(matches!(decode_pgm(hdr), Err(Error::DimensionOverflow)));
        let hdr = format!("P5\n{} {}\n255\n", usize::MAX / 2, 4);
        assert!(matches!(decode_pgm(hdr.as_bytes()), Err(Error::DimensionOverflow)));
    }

    #[test]
    fn comments_in_header() {
        let img = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.data, vec![1.0]);
    }

    #[test]
    fn out_of_range_write_rejected() {
        let img = GrayImage::new(1, 1, vec![1.5]).unwrap();
        assert!(encode_pgm(&img).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_stable(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let img = GrayImage::new(w, h, (0..w * h).map(|_| rng.next_f64()).collect()).unwrap();
            let first = encode_pgm(&img).unwrap();
            let decoded = decode_pgm(&first).unwrap();
            prop_assert_eq!((decoded.width, decoded.height), (w, h));
            prop_assert_eq!(encode_pgm(&decoded).unwrap(), first);
        }
    }
}
