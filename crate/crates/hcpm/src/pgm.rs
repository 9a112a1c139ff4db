//! Binary PGM (P5) images. Pixels map to `[0, 1]` by `v / maxval`.

use std::io::{Read, Write};
use std::path::Path;

use hcpm_core::Tensor;

use crate::error::{at, IoError, Result};

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape.as_slice() {
        [h, w] => (*h, *w),
        s => return Err(IoError::Pgm(format!("image must be 2-D, got shape {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::Pgm("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Pgm(format!("bad {what}: {:?}", String::from_utf8_lossy(t))))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P5" {
        return Err(IoError::Pgm("missing P5 magic".into()));
    }
    let w = number(bytes, &mut pos, "width")?;
    let h = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(IoError::Pgm(format!("invalid header {w}×{h} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bpp;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| IoError::Pgm(format!("raster holds {} bytes, expected {need}", bytes.len().saturating_sub(pos))))?;
    let m = maxval as f64;
    let data = if bpp == 1 {
        raster.iter().map(|&v| f64::from(v) / m).collect()
    } else {
        raster.chunks_exact(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / m).collect()
    };
    Ok(Tensor::new(&[h, w], data)?)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode(image)?;
    let mut f = std::fs::File::create(path).map_err(at(path))?;
    f.write_all(&bytes).map_err(at(path))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(at(path))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment_and_16_bit() {
        let mut b = b"P5\n# made by hand\n2 1\n65535\n".to_vec();
        b.extend([0xff, 0xff, 0x00, 0x00]);
        let t = decode(&b).unwrap();
        assert_eq!(t.shape, vec![1, 2]);
        assert_eq!(t.data, vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
    }
}
