//! Binary PGM (P5, maxval 255) images; pixel bytes map to [0, 1] by /255.

use std::fs;
use std::io::Write;
use std::path::Path;

use echoray_core::Image;

use crate::IoError;

pub fn write_pgm(img: &Image, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)
        .expect("in-memory write cannot fail");
    for &v in &img.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| IoError::io(format!("writing {}", path.display()), e))
}

pub fn read_pgm(path: &Path) -> Result<Image, IoError> {
    let bytes =
        fs::read(path).map_err(|e| IoError::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&bytes).map_err(|msg| IoError::format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates header and raster.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::from_data(width, height, data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_byte_stable() {
        let dir = tempdir().unwrap();
        let mut img = Image::zeros(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 17.0 % 256.0) / 255.0;
        }
        let p1 = dir.path().join("a.pgm");
        write_pgm(&img, &p1).unwrap();
        let loaded = read_pgm(&p1).unwrap();
        let p2 = dir.path().join("b.pgm");
        write_pgm(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
