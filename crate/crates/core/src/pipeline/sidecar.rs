//! Raw BEV tensor sidecar: the exact encoder output with its grid, so later
//! stages never depend on PNG decoding.
//!
//! ```text
//! magic "TBEV0001" | u32 LE header length | grid as TOML | H*W*3 bytes (HWC)
//! ```

use std::fs;
use std::path::Path;

use crate::bev::{BevImage, GridConfig};

use super::PipelineError;

pub const SIDECAR_MAGIC: &[u8; 8] = b"TBEV0001";

pub fn sidecar_bytes(img: &BevImage) -> Vec<u8> {
    let header = img.grid.to_toml();
    let mut out = SIDECAR_MAGIC.to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.pixels());
    out
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<BevImage, PipelineError> {
    let bad = |m: &str| PipelineError::Sidecar(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not utf-8"))?;
    let grid = GridConfig::from_toml(header).map_err(|e| PipelineError::Sidecar(e.to_string()))?;
    BevImage::from_pixels(grid, bytes[12 + len..].to_vec()).map_err(|e| PipelineError::Sidecar(e.to_string()))
}

pub fn write_sidecar(img: &BevImage, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, sidecar_bytes(img)).map_err(|e| PipelineError::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<BevImage, PipelineError> {
    parse_sidecar(&fs::read(path).map_err(|e| PipelineError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejects_damage() {
        let g = GridConfig::with_roi((0.0, 1.0), (0.0, 0.5), 0.1).unwrap();
        let mut img = BevImage::zeros(g);
        img.set(3, 2, 1, 77);
        let bytes = sidecar_bytes(&img);
        assert_eq!(parse_sidecar(&bytes).unwrap(), img);
        assert!(parse_sidecar(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_sidecar(b"TBEV0001\xff\xff\xff\xff").is_err());
        assert!(parse_sidecar(b"nope").is_err());
    }
}
