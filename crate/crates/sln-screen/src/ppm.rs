//! Binary PPM (P6, maxval 255) reading and writing. The format is
//! self-describing and codec-free, which keeps patch files parseable
//! from any language.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Pull the next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(bytes[start..*pos].to_vec())
}

pub fn read(path: &Path) -> Result<PpmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| malformed(path, "empty file"))?;
    if magic != b"P6" {
        return Err(malformed(path, "missing P6 magic"));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(&bytes, &mut pos).ok_or_else(|| malformed(path, format!("missing {name}")))?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| malformed(path, format!("unreadable {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(malformed(path, format!("maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from pixel data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing header terminator"));
    }
    pos += 1;
    let want = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() != want {
        return Err(malformed(
            path,
            format!("expected {want} pixel bytes, found {}", pixels.len()),
        ));
    }
    Ok(PpmImage {
        width,
        height,
        rgb: pixels.to_vec(),
    })
}

pub fn write(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P6\n{width} {height}\n255\n");
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(rgb))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        write(&path, 3, 2, &rgb).unwrap();
        let img = read(&path).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.rgb, rgb);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\0").unwrap();
        assert!(matches!(read(&path), Err(Error::MalformedImage { .. })));
    }

    #[test]
    fn rejects_truncated_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\nabc").unwrap();
        let err = read(&path).unwrap_err();
        assert!(err.to_string().contains("expected 12 pixel bytes"), "{err}");
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        std::fs::write(&path, b"P6\n# a comment\n1 1\n255\nxyz").unwrap();
        let img = read(&path).unwrap();
        assert_eq!(img.rgb, b"xyz");
    }
}
