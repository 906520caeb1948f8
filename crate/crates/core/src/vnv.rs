//! The `VNV1` volume container.
//!
//! Layout: magic `VNV1`, little-endian `u32` H, W, D, C, then `H*W*D*C`
//! little-endian `f32` values with the channel index fastest, then k, j, i.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VncaError};
use crate::grid::{Dims, Grid};

pub const MAGIC: &[u8; 4] = b"VNV1";

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + grid.data().len() * 4);
    out.extend_from_slice(MAGIC);
    let dims = grid.dims();
    for v in [dims.h, dims.w, dims.d, grid.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: String| VncaError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(word(4), word(8), word(12));
    let channels = word(16);
    let count = dims
        .cells()
        .checked_mul(channels)
        .ok_or_else(|| bad("dimension overflow".into()))?;
    let payload = &bytes[20..];
    if payload.len() != count * 4 {
        return Err(bad(format!(
            "expected {} payload bytes for {dims}x{channels}, found {}",
            count * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_vec(dims, channels, data)
}

pub fn write(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| VncaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(grid))
        .and_then(|_| w.flush())
        .map_err(|e| VncaError::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VncaError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| VncaError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = Grid::from_fn(Dims::new(2, 1, 3), 2, |i, _, k, c| (i * 10 + k) as f32 + c as f32 * 0.5);
        let bytes = encode(&g);
        assert_eq!(&bytes[..4], b"VNV1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        // element (i=0, j=0, k=1, c=1) is the 4th float: c fastest, then k
        assert_eq!(&bytes[20 + 3 * 4..20 + 4 * 4], &1.5f32.to_le_bytes());
        assert_eq!(decode(&bytes, Path::new("mem")).unwrap(), g);
    }

    #[test]
    fn rejects_malformed() {
        let p = Path::new("mem");
        assert!(decode(b"VNV", p).is_err());
        assert!(decode(b"XXXX\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0", p).is_err());
        let mut bytes = encode(&Grid::zeros(Dims::cube(2), 1));
        bytes.pop();
        assert!(decode(&bytes, p).is_err());
    }
}
