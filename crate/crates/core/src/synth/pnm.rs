use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, Result};

/// Binary PPM (`P6`, maxval 255) of a `3 x H x W` image. Values are quantized
/// as `round(v * 255)`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => return Err(DataError::Shape(image.shape().to_vec())),
    };
    let plane = h * w;
    let header = format!("P6\n{w} {h}\n255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * plane);
    out.extend_from_slice(header.as_bytes());
    let data = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            let index = ch * plane + p;
            let v = data[index];
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::OutOfRange { index, value: v });
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn malformed(&self, msg: impl Into<String>) -> DataError {
        DataError::Malformed {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Malformed {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parses a binary PPM (`P6`) or PGM (`P5`); grayscale is replicated to three
/// channels. Values are de-quantized as `v / maxval`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut hd = Header { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(hd.malformed("expected magic P6 or P5")),
    };
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    hd.skip_space();
    let maxval_at = hd.pos;
    let maxval = hd.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(DataError::Malformed {
            offset: maxval_at,
            msg: format!("zero image dimension {w}x{h}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Malformed {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(hd.malformed("expected a single whitespace byte before the payload"));
    }
    hd.pos += 1;
    let plane = w * h;
    let need = plane * channels;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            expected: need - payload.len(),
        });
    }
    let maxval = maxval as f32;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let src = if channels == 3 { payload[p * 3 + ch] } else { payload[p] };
            data[ch * plane + p] = src as f32 / maxval;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pnm(&bytes).map_err(|e| DataError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}
