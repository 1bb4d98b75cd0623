//! IDX binary format: big-endian magic, dimension sizes, then raw bytes.
//!
//! Only the two layouts used for glyph pools are supported: unsigned-byte
//! 3-dimensional image tensors (magic `0x00000803`) and unsigned-byte label
//! vectors (magic `0x00000801`). Encoders for both layouts are provided so
//! fixtures and exports stay bit-exact.

use std::path::Path;

use crate::{Error, Result};

/// Magic for a 3-dimensional unsigned-byte tensor (images).
pub const IMAGES_MAGIC: u32 = 0x0000_0803;

/// Magic for a 1-dimensional unsigned-byte tensor (labels).
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed image tensor: `images.len()` bitmaps of `rows x cols` bytes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
}

fn be32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            needed: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an image tensor from raw bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be32(bytes, 4)? as usize;
    let rows = be32(bytes, 8)? as usize;
    let cols = be32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            needed,
            found: bytes.len(),
        });
    }
    let images = (0..count)
        .map(|n| {
            let start = 16 + n * rows * cols;
            bytes[start..start + rows * cols].to_vec()
        })
        .collect();
    Ok(IdxImages { rows, cols, images })
}

/// Parses a label vector from raw bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..8 + count].to_vec())
}

pub fn read_idx_images<P: AsRef<Path>>(path: P) -> Result<IdxImages> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn read_idx_labels<P: AsRef<Path>>(path: P) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// Encodes an image tensor; every image must be `rows * cols` bytes.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for (n, image) in images.iter().enumerate() {
        if image.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "image {n} has {} bytes, expected {rows}*{cols}",
                image.len()
            )));
        }
        out.extend_from_slice(image);
    }
    Ok(out)
}

/// Encodes a label vector.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_image_fixture() -> Vec<u8> {
        let images: Vec<Vec<u8>> = (0..3).map(|n| vec![n as u8; 4]).collect();
        encode_idx_images(2, 2, &images).unwrap()
    }

    #[test]
    fn images_round_trip() {
        let bytes = three_image_fixture();
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        let parsed = parse_idx_images(&bytes).unwrap();
        assert_eq!((parsed.rows, parsed.cols), (2, 2));
        assert_eq!(parsed.images.len(), 3);
        assert_eq!(parsed.images[2], vec![2u8; 4]);
    }

    #[test]
    fn labels_round_trip() {
        let bytes = encode_idx_labels(&[7, 0, 9]);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x01]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = three_image_fixture();
        bytes[2] = 0xff;
        match parse_idx_images(&bytes) {
            Err(Error::IdxBadMagic { expected, found }) => {
                assert_eq!(expected, IMAGES_MAGIC);
                assert_eq!(found, 0x0000_ff03);
            }
            other => panic!("expected bad magic, got {other:?}"),
        }
        // An image magic fed to the label parser is also a magic error.
        assert!(matches!(
            parse_idx_labels(&three_image_fixture()),
            Err(Error::IdxBadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = three_image_fixture();
        match parse_idx_images(&bytes[..bytes.len() - 2]) {
            Err(Error::IdxTruncated { needed, found }) => {
                assert_eq!(needed, 16 + 12);
                assert_eq!(found, 26);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        // Header shorter than the dimension block.
        assert!(matches!(
            parse_idx_images(&bytes[..7]),
            Err(Error::IdxTruncated { .. })
        ));
        let labels = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_labels(&labels[..labels.len() - 1]),
            Err(Error::IdxTruncated { .. })
        ));
    }

    #[test]
    fn encoder_rejects_misshapen_images() {
        assert!(encode_idx_images(2, 2, &[vec![0; 3]]).is_err());
    }
}
