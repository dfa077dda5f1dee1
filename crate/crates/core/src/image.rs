//! Minimal PPM (P3/P6) reader for demo inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PPM into a `1×H×W×3` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
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
            return Err(bad("truncated PPM header"));
        }
        header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad PPM header"))?);
    }
    let magic = header[0];
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(header[1])?, num(header[2])?, num(header[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PPM size or maxval"));
    }
    let n = w * h * 3;
    let raw: Vec<f64> = match magic {
        "P6" => {
            let body = bytes.get(pos + 1..).ok_or_else(|| bad("truncated PPM body"))?;
            if body.len() < n {
                return Err(bad("truncated PPM body"));
            }
            body[..n].iter().map(|&b| b as f64).collect()
        }
        "P3" => {
            let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("bad P3 body"))?;
            let vals: Vec<f64> = text
                .split_ascii_whitespace()
                .take(n)
                .map(|t| t.parse::<u32>().map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad P3 value"))?;
            if vals.len() < n {
                return Err(bad("truncated PPM body"));
            }
            vals
        }
        _ => return Err(bad("not a P3/P6 PPM")),
    };
    let scale = maxval as f64;
    Tensor::new(vec![1, h, w, 3], raw.into_iter().map(|v| v / scale).collect())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p3_and_p6_agree() {
        let p3 = b"P3\n# c\n2 1\n255\n0 51 255 255 0 102\n";
        let mut p6 = b"P6 2 1 255\n".to_vec();
        p6.extend_from_slice(&[0, 51, 255, 255, 0, 102]);
        let a = decode_ppm(p3, Path::new("a")).unwrap();
        let b = decode_ppm(&p6, Path::new("b")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 1, 2, 3]);
        assert_eq!(a.data()[1], 0.2);
    }

    #[test]
    fn malformed_rejected() {
        assert!(decode_ppm(b"P5 1 1 255\n\0", Path::new("x")).is_err());
        assert!(decode_ppm(b"P6 2 2 255\n\0\0", Path::new("x")).is_err());
    }
}
