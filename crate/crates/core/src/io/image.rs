//! Binary PPM (P6) and PGM (P5) images with maxval 255.
//!
//! The header accepts the usual whitespace and `#` comment syntax; pixel
//! data follows the single whitespace byte after maxval, row-major,
//! interleaved channels for P6.

use super::Reader;
use crate::dense::Tensor4;
use crate::error::{Error, Result};

/// Decoded 8-bit image, 1 (gray) or 3 (RGB) channels, interleaved rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// 1×c×h×w tensor of raw byte values (0..255 as f64, no normalization).
    pub fn to_tensor(&self) -> Tensor4 {
        let mut t = Tensor4::zeros(1, self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.data[(y * self.width + x) * self.channels + c];
                    t.set(0, c, y, x, v as f64);
                }
            }
        }
        t
    }

    /// Rounds and clamps a single-image tensor to [0, 255] bytes.
    pub fn from_tensor(t: &Tensor4) -> Result<Image> {
        if t.n != 1 || (t.c != 1 && t.c != 3) {
            return Err(Error::shape(format!(
                "image tensor must be 1x{{1|3}}xHxW, got {:?}",
                t.dims()
            )));
        }
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        let mut data = vec![0u8; t.h * t.w * t.c];
        for y in 0..t.h {
            for x in 0..t.w {
                for c in 0..t.c {
                    data[(y * t.w + x) * t.c + c] = t.get(0, c, y, x).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(Image {
            channels: t.c,
            width: t.w,
            height: t.h,
            data,
        })
    }
}

fn read_header_token(r: &mut Reader) -> Result<usize> {
    // Skip whitespace and # comments, then read a decimal token.
    let mut value: Option<usize> = None;
    loop {
        let off = r.offset();
        let byte = r.u8("image header")?;
        match byte {
            b'#' if value.is_none() => loop {
                if r.u8("image comment")? == b'\n' {
                    break;
                }
            },
            b' ' | b'\t' | b'\r' | b'\n' => {
                if let Some(v) = value {
                    return Ok(v);
                }
            }
            b'0'..=b'9' => {
                let digit = (byte - b'0') as usize;
                value = Some(value.unwrap_or(0) * 10 + digit);
                if value.unwrap() > 1 << 24 {
                    return Err(Error::format(off, "image dimension too large"));
                }
            }
            _ => return Err(Error::format(off, "unexpected byte in image header")),
        }
    }
}

pub fn parse_image(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    let magic = r.take(2, "image magic")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::format(
                0,
                format!("unsupported image magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
    };
    let width = read_header_token(&mut r)?;
    let height = read_header_token(&mut r)?;
    let maxval_off = r.offset();
    let maxval = read_header_token(&mut r)?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_off,
            format!("maxval {maxval} unsupported (need 255)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    let data = r.take(width * height * channels, "pixel data")?.to_vec();
    r.finish()?;
    Ok(Image {
        channels,
        width,
        height,
        data,
    })
}

pub fn serialize_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image {
            channels: 3,
            width: 2,
            height: 2,
            data: vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110],
        };
        let bytes = serialize_image(&img);
        let parsed = parse_image(&bytes).unwrap();
        assert_eq!(parsed, img);
        assert_eq!(serialize_image(&parsed), bytes);
    }

    #[test]
    fn pgm_round_trip() {
        let img = Image {
            channels: 1,
            width: 3,
            height: 1,
            data: vec![7, 8, 9],
        };
        let parsed = parse_image(&serialize_image(&img)).unwrap();
        assert_eq!(parsed, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n# another\n255\n\x01\x02";
        let img = parse_image(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        match parse_image(b"P3\n1 1\n255\n000") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_maxval_rejected() {
        assert!(matches!(
            parse_image(b"P5\n1 1\n65535\n\x00\x00"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_pixels_rejected() {
        assert!(matches!(
            parse_image(b"P5\n2 2\n255\n\x01\x02"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn tensor_conversion_clamps_and_rounds() {
        let t = Tensor4::from_vec(1, 1, 1, 4, vec![-5.0, 0.4, 254.6, 300.0]).unwrap();
        let img = Image::from_tensor(&t).unwrap();
        assert_eq!(img.data, vec![0, 0, 255, 255]);
        let back = img.to_tensor();
        assert_eq!(back.get(0, 0, 0, 2), 255.0);
    }

    #[test]
    fn tensor_round_trip_on_byte_values() {
        let img = Image {
            channels: 3,
            width: 2,
            height: 3,
            data: (0..18).map(|i| (i * 13 % 256) as u8).collect(),
        };
        let round = Image::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(round, img);
    }
}
