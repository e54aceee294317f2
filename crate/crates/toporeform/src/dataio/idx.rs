//! IDX binary format: big-endian magic + dims header, raw u8 payload.
//!
//! The parsers are total over arbitrary bytes: any truncation, bad magic,
//! dimension lie, or overflowing header yields a typed error and never a
//! panic or an oversized allocation.

use super::{DataError, Result, IMAGE_SIDE};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw parse result for an image file: `count` images of 28x28 u8 pixels.
#[derive(Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

/// Decodes an IDX image file (magic 0x00000803, dims `[n, 28, 28]`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic { got: magic, want: IMAGES_MAGIC });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::DimMismatch(format!("image dims {rows}x{cols}, want {IMAGE_SIDE}x{IMAGE_SIDE}")));
    }
    let payload = count
        .checked_mul(IMAGE_SIDE * IMAGE_SIDE)
        .ok_or_else(|| DataError::DimMismatch(format!("image count {count} overflows")))?;
    let want = 16usize
        .checked_add(payload)
        .ok_or_else(|| DataError::DimMismatch(format!("image count {count} overflows")))?;
    if bytes.len() != want {
        return Err(DataError::TruncatedFile { got: bytes.len(), want });
    }
    Ok(RawImages { count, pixels: bytes[16..].to_vec() })
}

/// Decodes an IDX label file (magic 0x00000801, dims `[n]`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic { got: magic, want: LABELS_MAGIC });
    }
    let count = read_u32(bytes, 4)? as usize;
    let want = 8usize
        .checked_add(count)
        .ok_or_else(|| DataError::DimMismatch(format!("label count {count} overflows")))?;
    if bytes.len() != want {
        return Err(DataError::TruncatedFile { got: bytes.len(), want });
    }
    Ok(bytes[8..].to_vec())
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::TruncatedFile { got: bytes.len(), want: end });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4-byte slice")))
}

/// Serializes images into IDX bytes; test fixtures and fuzz seeds only.
pub fn encode_idx_images(images: &[[u8; IMAGE_SIDE * IMAGE_SIDE]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_SIDE * IMAGE_SIDE);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

/// Serializes labels into IDX bytes; test fixtures and fuzz seeds only.
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

    #[test]
    fn handcrafted_fixture_roundtrips_exactly() {
        let mut a = [0u8; IMAGE_SIDE * IMAGE_SIDE];
        a[0] = 255;
        a[29] = 128;
        let mut b = [0u8; IMAGE_SIDE * IMAGE_SIDE];
        b[783] = 255;
        let bytes = encode_idx_images(&[a, b]);
        let parsed = parse_idx_images(&bytes).unwrap();
        assert_eq!(parsed.count, 2);
        assert_eq!(parsed.pixels[0], 255);
        assert_eq!(parsed.pixels[29], 128);
        assert_eq!(parsed.pixels[784 + 783], 255);
    }

    #[test]
    fn image_magic_on_label_file_is_rejected() {
        let mut bytes = encode_idx_labels(&[1, 2, 3]);
        bytes[..4].copy_from_slice(&IMAGES_MAGIC.to_be_bytes());
        match parse_idx_labels(&bytes) {
            Err(DataError::BadMagic { got, want }) => {
                assert_eq!(got, IMAGES_MAGIC);
                assert_eq!(want, LABELS_MAGIC);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncations_yield_typed_errors() {
        let full = encode_idx_images(&[[7u8; IMAGE_SIDE * IMAGE_SIDE]]);
        for cut in [0, 3, 4, 8, 15, 16, 100, full.len() - 1] {
            match parse_idx_images(&full[..cut]) {
                Err(DataError::TruncatedFile { .. }) | Err(DataError::BadMagic { .. }) => {}
                other => panic!("cut {cut}: expected a typed error, got {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_dims_are_rejected() {
        let mut bytes = encode_idx_images(&[[0u8; IMAGE_SIDE * IMAGE_SIDE]]);
        bytes[8..12].copy_from_slice(&27u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::DimMismatch(_))));
    }

    #[test]
    fn huge_count_header_fails_before_allocating() {
        let mut bytes = encode_idx_images(&[[0u8; IMAGE_SIDE * IMAGE_SIDE]]);
        bytes[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::TruncatedFile { .. })));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode_idx_labels(&[0, 1]);
        bytes.push(9);
        assert!(matches!(parse_idx_labels(&bytes), Err(DataError::TruncatedFile { .. })));
    }
}
