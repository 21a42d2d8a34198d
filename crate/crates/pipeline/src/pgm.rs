//! Binary (P5) 8-bit greymap files.

use std::fs;
use std::path::Path;

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match {width}x{height}");
        Self { width, height, pixels }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| PipelineError::Data(format!("not a P5 greymap: {why}"));
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("missing P5 magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() < width * height {
            return Err(bad("truncated raster"));
        }
        Ok(Self::new(width, height, body[..width * height].to_vec()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 32, 9, 13]);
        assert_eq!(GrayImage::from_bytes(&img.to_bytes()).unwrap(), img);
        let mut with_comment = b"P5 # note\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(&img.pixels);
        assert_eq!(GrayImage::from_bytes(&with_comment).unwrap(), img);
    }

    #[test]
    fn malformed_inputs() {
        assert!(GrayImage::from_bytes(b"P2\n1 1\n255\n\x00").is_err());
        assert!(GrayImage::from_bytes(b"P5\n2 2\n255\n\x00").is_err());
        assert!(GrayImage::from_bytes(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(GrayImage::from_bytes(b"P5\n1").is_err());
    }
}
