//! Binary (P5) 8-bit PGM images.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl PgmImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        if samples.len() != width * height {
            return Err(shape_err!(
                "{}x{} image needs {} samples, got {}",
                width,
                height,
                width * height,
                samples.len()
            ));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(format_err(format!(
                "expected binary PGM magic P5, found {magic:?}"
            )));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            // whitespace and comments before each header number
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(format_err("malformed PGM header"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| format_err("PGM header number out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(format_err(format!(
                "only maxval 255 is supported, got {maxval}"
            )));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(format_err("missing whitespace after PGM header"));
        }
        pos += 1;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| format_err("PGM dimensions overflow"))?;
        let payload = &bytes[pos..];
        if payload.len() < n {
            return Err(format_err(format!(
                "truncated PGM payload: {} of {} bytes",
                payload.len(),
                n
            )));
        }
        Self::new(width, height, payload[..n].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// `[height, width]` tensor of `sample / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.samples.iter().map(|&s| s as f64 / 255.0).collect();
        Tensor::new(vec![self.height, self.width], data).expect("sample count checked")
    }

    /// Quantizes a `[height, width]` tensor as `round(clamp(v, 0, 1) * 255)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = match t.dims() {
            &[h, w] => [h, w],
            d => return Err(shape_err!("image tensor must be [H,W], got {:?}", d)),
        };
        if !t.all_finite() {
            return Err(Error::NonFinite("image tensor".into()));
        }
        let samples = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(w, h, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let img = PgmImage::new(2, 2, vec![0, 64, 128, 255]).unwrap();
        let bytes = img.to_bytes();
        let back = PgmImage::parse(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        img.write(&p).unwrap();
        assert_eq!(PgmImage::read(&p).unwrap(), img);
    }

    #[test]
    fn accepts_comments_and_other_whitespace() {
        let mut bytes = b"P5 # made by hand\n3\t1\r\n255 ".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = PgmImage::parse(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.samples), (3, 1, vec![1, 2, 3]));
    }

    #[test]
    fn format_errors() {
        let ascii = b"P2\n2 2\n255\n0 0 0 0\n";
        assert!(matches!(PgmImage::parse(ascii), Err(Error::Format(_))));
        let mut deep = b"P5\n1 1\n65535\n".to_vec();
        deep.extend_from_slice(&[0, 0]);
        assert!(matches!(PgmImage::parse(&deep), Err(Error::Format(_))));
        let short = b"P5\n2 2\n255\n\x01\x02\x03";
        assert!(matches!(PgmImage::parse(short), Err(Error::Format(_))));
        assert!(matches!(PgmImage::parse(b""), Err(Error::Format(_))));
    }

    #[test]
    fn float_conversion() {
        let img = PgmImage::new(1, 1, vec![128]).unwrap();
        let t = img.to_tensor();
        assert!((t.data()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(PgmImage::from_tensor(&t).unwrap().samples, vec![128]);
        let t = Tensor::new(vec![1, 3], vec![-0.2, 1.7, 0.5]).unwrap();
        assert_eq!(
            PgmImage::from_tensor(&t).unwrap().samples,
            vec![0, 255, 128]
        );
    }
}
