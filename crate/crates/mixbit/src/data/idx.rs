//! IDX file format: big-endian magic (2051 images / 2049 labels), big-endian
//! dimension sizes, unsigned-byte payload.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Raw unsigned-byte image stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Raw label vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels(pub Vec<u8>);

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("truncated IDX file: missing {what}")));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad IDX magic: expected {IMAGE_MAGIC}, got {magic}")));
    }
    let n = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() < want {
        return Err(Error::Format(format!(
            "truncated IDX payload: want {want} bytes, got {}",
            payload.len()
        )));
    }
    if payload.len() > want {
        return Err(Error::Format(format!(
            "trailing bytes in IDX file: want {want} payload bytes, got {}",
            payload.len()
        )));
    }
    Ok(IdxImages { n, rows, cols, pixels: payload.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<IdxLabels> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("bad IDX magic: expected {LABEL_MAGIC}, got {magic}")));
    }
    let n = read_u32_be(bytes, 4, "label count")? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() < n {
        return Err(Error::Format(format!("truncated IDX payload: want {n} bytes, got {}", payload.len())));
    }
    if payload.len() > n {
        return Err(Error::Format(format!("trailing bytes in IDX file: want {n} payload bytes, got {}", payload.len())));
    }
    Ok(IdxLabels(payload.to_vec()))
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.n as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &IdxLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.0.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.0.len() as u32).to_be_bytes());
    out.extend_from_slice(&labels.0);
    out
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&fs::read(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<IdxLabels> {
    parse_idx_labels(&fs::read(path)?)
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    Ok(fs::write(path, encode_idx_images(images))?)
}

pub fn write_idx_labels(path: &Path, labels: &IdxLabels) -> Result<()> {
    Ok(fs::write(path, encode_idx_labels(labels))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_byte_file_is_a_format_error() {
        assert!(matches!(parse_idx_images(&[0, 0, 8, 3]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8, 1]), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_names_expected_and_actual() {
        let mut bytes = vec![0u8; 16];
        bytes[3] = 99;
        match parse_idx_images(&bytes) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("2051"), "{msg}");
                assert!(msg.contains("99"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_payloads_rejected() {
        let img = IdxImages { n: 2, rows: 2, cols: 2, pixels: vec![1, 2, 3, 4, 5, 6, 7, 8] };
        let mut bytes = encode_idx_images(&img);
        let full = bytes.clone();
        bytes.pop();
        assert!(parse_idx_images(&bytes).is_err());
        let mut extended = full.clone();
        extended.push(0);
        assert!(parse_idx_images(&extended).is_err());
        assert_eq!(parse_idx_images(&full).unwrap(), img);
    }

    #[test]
    fn fixture_pixels_recovered_exactly() {
        // 2 images of 2x2, bytes chosen by hand.
        let img = IdxImages { n: 2, rows: 2, cols: 2, pixels: vec![0, 64, 128, 255, 10, 20, 30, 40] };
        let bytes = encode_idx_images(&img);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = parse_idx_images(&bytes).unwrap();
        assert_eq!(back, img);
        let labels = IdxLabels(vec![7, 3]);
        let back = parse_idx_labels(&encode_idx_labels(&labels)).unwrap();
        assert_eq!(back, labels);
    }
}
