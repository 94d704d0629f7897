//! Binary portable pixmaps (`P6`), the lossless image container used for
//! dataset directories.

use std::io::{self, Read, Write};

use thiserror::Error;
use tlnet_core::Tensor4;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("not a binary PPM (magic {0:?})")]
    BadMagic(String),
    #[error("malformed PPM header")]
    BadHeader,
    #[error("unsupported maximum value {0}")]
    MaxValue(u32),
    #[error("pixel data truncated")]
    Truncated,
    #[error("image tensor must be (1, 3, h, w), got {0:?}")]
    Shape([usize; 4]),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
}

/// Reads whitespace-separated header tokens, skipping `#` comments. The
/// single whitespace byte after the last token is consumed.
fn header(bytes: &[u8]) -> Result<(Header, usize), PpmError> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
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
            return Err(PpmError::BadHeader);
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| PpmError::BadHeader)?);
    }
    if tokens[0] != "P6" {
        return Err(PpmError::BadMagic(tokens[0].to_string()));
    }
    let num = |t: &str| t.parse::<u32>().map_err(|_| PpmError::BadHeader);
    let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(PpmError::MaxValue(maxval));
    }
    if pos >= bytes.len() {
        return Err(PpmError::Truncated);
    }
    Ok((
        Header {
            width: width as usize,
            height: height as usize,
            maxval,
        },
        pos + 1,
    ))
}

/// `(width, height)` from the header alone.
pub fn read_size<R: Read>(mut r: R) -> Result<(usize, usize), PpmError> {
    let mut buf = vec![0u8; 512];
    let n = r.read(&mut buf)?;
    let (h, _) = header(&buf[..n])?;
    Ok((h.width, h.height))
}

/// Decodes to a `(1, 3, h, w)` tensor with values `v / maxval`.
pub fn decode(bytes: &[u8]) -> Result<Tensor4, PpmError> {
    let (h, start) = header(bytes)?;
    let wide = h.maxval > 255;
    let sample = if wide { 2 } else { 1 };
    let plane = h.width * h.height;
    let data = &bytes[start..];
    if data.len() < plane * 3 * sample {
        return Err(PpmError::Truncated);
    }
    let scale = h.maxval as f64;
    let mut t = Tensor4::zeros([1, 3, h.height, h.width]);
    let out = t.data_mut();
    for p in 0..plane {
        for c in 0..3 {
            let k = (p * 3 + c) * sample;
            let v = if wide {
                u16::from_be_bytes([data[k], data[k + 1]]) as f64
            } else {
                data[k] as f64
            };
            out[c * plane + p] = v / scale;
        }
    }
    Ok(t)
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor4, PpmError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Encodes with 8-bit samples, rounding `v·255` after clamping to `[0, 1]`.
pub fn encode(img: &Tensor4) -> Result<Vec<u8>, PpmError> {
    let d = img.dims();
    if d[0] != 1 || d[1] != 3 {
        return Err(PpmError::Shape(d));
    }
    let (h, w) = (d[2], d[3]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(plane * 3);
    let src = img.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((src[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write<W: Write>(mut w: W, img: &Tensor4) -> Result<(), PpmError> {
    w.write_all(&encode(img)?)?;
    Ok(())
}
