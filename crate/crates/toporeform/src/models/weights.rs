//! Named-tensor weight container.
//!
//! Layout, all integers little-endian:
//!   magic "TRFM" | version u32 (= 1) | count u32
//!   per tensor: name_len u16 | UTF-8 name | rank u8 | dims u32 x rank |
//!               payload f32 x prod(dims)
//!
//! Values are stored as 32-bit floats; in-memory tensors stay 64-bit.
//! The decoder is total over arbitrary bytes: every malformed input maps to
//! a typed error, and payload lengths are validated before any allocation.

use crate::autodiff::Tensor;

pub const MAGIC: [u8; 4] = *b"TRFM";
pub const VERSION: u32 = 1;

pub type Result<T> = std::result::Result<T, WeightsError>;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("bad magic {0:02x?}, want \"TRFM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated at {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Serializes named tensors in iteration order.
pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        assert!(tensor.shape().len() <= u8::MAX as usize, "tensor rank too large");
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| WeightsError::Malformed(format!("{what} length overflows")))?;
        if end > self.bytes.len() {
            return Err(WeightsError::Truncated(what.to_string()));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a container into named tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let count = cur.u32("count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| WeightsError::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for d in 0..rank {
            let dim = cur.u32(&format!("dim {d} of {name}"))? as usize;
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| WeightsError::Malformed(format!("{name} shape overflows")))?;
            shape.push(dim);
        }
        // Length check precedes the allocation so a lying header cannot
        // reserve gigabytes.
        let payload = cur.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| WeightsError::Malformed(format!("{name} payload overflows")))?,
            &format!("payload of {name}"),
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| WeightsError::Malformed(format!("{name}: {e}")))?;
        entries.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(WeightsError::Malformed(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn save_file(path: &std::path::Path, entries: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load_file(path: &std::path::Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(name: &str, shape: Vec<usize>, fill: f32) -> (String, Tensor) {
        let n = shape.iter().product();
        (name.to_string(), Tensor::from_vec(shape, vec![fill as f64; n]).unwrap())
    }

    #[test]
    fn header_layout_is_exact() {
        let (name, t) = entry("w", vec![2], 1.0);
        let bytes = encode(&[(name, &t)]);
        assert_eq!(&bytes[..4], b"TRFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 8);
    }

    #[test]
    fn bad_magic_and_version_are_typed() {
        let (name, t) = entry("w", vec![1], 0.0);
        let mut bytes = encode(&[(name, &t)]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(WeightsError::BadMagic(_))));
        let (name, t) = entry("w", vec![1], 0.0);
        let mut bytes = encode(&[(name, &t)]);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(WeightsError::UnsupportedVersion(9))));
    }

    #[test]
    fn lying_shape_header_cannot_allocate() {
        let (name, t) = entry("w", vec![4], 0.5);
        let mut bytes = encode(&[(name, &t)]);
        // Claim a 4-billion-element payload.
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        match decode(&bytes) {
            Err(WeightsError::Truncated(_)) | Err(WeightsError::Malformed(_)) => {}
            other => panic!("expected typed failure, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_names_shapes_and_f32_values(
            names in proptest::collection::vec("[a-z.]{1,12}", 0..4),
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream_rng(seed, 96);
            let tensors: Vec<(String, Tensor)> = names
                .iter()
                .map(|n| {
                    let shape = vec![rng.gen_range(1..4usize), rng.gen_range(1..5usize)];
                    let numel = shape.iter().product();
                    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-2.0..2.0f32) as f64).collect();
                    (n.clone(), Tensor::from_vec(shape, data).unwrap())
                })
                .collect();
            let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            let decoded = decode(&encode(&refs)).unwrap();
            prop_assert_eq!(decoded.len(), tensors.len());
            for ((dn, dt), (on, ot)) in decoded.iter().zip(&tensors) {
                prop_assert_eq!(dn, on);
                prop_assert_eq!(dt.shape(), ot.shape());
                for (a, b) in dt.data().iter().zip(ot.data()) {
                    // Values survive the f32 storage round trip exactly
                    // because they started as f32-representable.
                    prop_assert_eq!(*a, *b);
                }
            }
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }
    }
}
