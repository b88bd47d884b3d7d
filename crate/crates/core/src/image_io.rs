//! Binary PPM (P6) encoding of `[H, W, 3]` images in `[0, 1]`.

use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::engine::{Real, Tensor};
use crate::{Error, Result};

pub fn encode_ppm<R: Real>(image: &Tensor<R>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("PPM needs [H, W, 3], got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported image magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {max}")));
    }
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM payload has {} bytes, expected {}", data.len(), w * h * 3)));
    }
    Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm<R: Real>(path: &Path, image: &Tensor<R>) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_8_bits() {
        let img = Tensor::<f32>::from_fn(&[2, 3, 3], |i| i as f32 / 17.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# note\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        assert_eq!(decode_ppm(&bytes).unwrap().data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00").is_err());
        assert!(encode_ppm(&Tensor::<f32>::zeros(&[2, 2])).is_err());
    }
}
