//! Binary PPM (P6) images and PGM (P5) label masks.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labelspace::SemanticMap;
use crate::tensor::Tensor;

/// Encodes image `[1, 3, H, W]` in `[-1, 1]` as P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape("encode_ppm", image.shape(), &[1, 3, h, w]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + i) * w + j].clamp(-1.0, 1.0);
                out.push(((v + 1.0) * 127.5).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Encodes a mask with one byte per pixel (the continual class id).
pub fn encode_pgm(map: &SemanticMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &l in &map.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Validation(format!("class id {l} does not fit in a PGM byte")))?;
        out.push(b);
    }
    Ok(out)
}

fn header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
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
            return Err(Error::Parse {
                row: 1,
                msg: "truncated PNM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Parse {
            row: 1,
            msg: format!("expected {magic}, found {}", fields[0]),
        });
    }
    let num = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            row: 1,
            msg: format!("bad header field `{s}`"),
        })
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Parse {
            row: 1,
            msg: format!("unsupported maxval {max}"),
        });
    }
    Ok((w, h, pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SemanticMap> {
    let (w, h, start) = header(bytes, "P5")?;
    let body = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Parse {
            row: 1,
            msg: "truncated PGM body".into(),
        })?;
    SemanticMap::new(h, w, body.iter().map(|&b| b as u16).collect())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = header(bytes, "P6")?;
    let body = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| Error::Parse {
            row: 1,
            msg: "truncated PPM body".into(),
        })?;
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in body.chunks(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + p] = px[ch] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(image)?)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &SemanticMap) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(map)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<SemanticMap> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
