//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Values in `[0, 1]` map to bytes by `round(255·v)` after clamping; reading
//! divides by 255, so any tensor on the `k/255` lattice round-trips exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps values onto the 8-bit lattice the image formats store.
pub fn quantize_image(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}

fn encode(img: &Tensor, channels: usize, magic: &str) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(Error::shape("image encode", format!("{s:?} as {magic}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(channels * h * w);
    let d = img.data();
    for p in 0..h * w {
        for c in 0..channels {
            out.push(quantize(d[c * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    encode(img, 3, "P6")
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    encode(img, 1, "P5")
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err(Error::Corrupt("image header truncated".into())),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() {
        return Err(Error::Corrupt("image raster missing".into()));
    }
    Ok((tokens, i + 1))
}

fn decode(bytes: &[u8], channels: usize, magic: &str) -> Result<Tensor> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != magic {
        return Err(Error::Corrupt(format!("expected {magic} image, found {:?}", tok[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Corrupt(format!("bad image header field {s:?}")))
    };
    let (w, h, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval != 255 {
        return Err(Error::Corrupt(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Corrupt("zero-sized image".into()));
    }
    let raster = &bytes[start..];
    if raster.len() != channels * h * w {
        return Err(Error::Corrupt(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            channels * h * w
        )));
    }
    let mut data = vec![0.0; channels * h * w];
    for p in 0..h * w {
        for c in 0..channels {
            data[c * h * w + p] = raster[p * channels + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, 3, "P6")
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, 1, "P5")
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_and_round_trip() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| ((i[0] * 6 + i[1] * 3 + i[2]) * 13) as f64 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        // Interleaved RGB: first pixel is (c0, c1, c2) at (0, 0).
        assert_eq!(&bytes[11..14], &[0, 78, 156]);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_quantizes_and_clamps() {
        let img = Tensor::new(&[1, 1, 4], vec![-0.5, 0.5, 1.0, 2.0]).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0, 1.0]);
        assert_eq!(back, quantize_image(&img));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend([0, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap().data(), &[0.0, 1.0]);
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(&bytes).is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
