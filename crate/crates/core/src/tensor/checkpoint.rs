//! Flat binary parameter files.
//!
//! Layout: the magic bytes `GLAB1`, then one record per parameter until end
//! of file: name length (u32 LE), UTF-8 name, rank (u32 LE), each dimension
//! (u32 LE), then the values as f64 LE.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"GLAB1";

pub fn encode_checkpoint(params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&[("w".into(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap())]);
        assert_eq!(&bytes[..5], b"GLAB1");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(bytes[9], b'w');
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &2u32.to_le_bytes());
        assert_eq!(&bytes[18..26], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 34);
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = encode_checkpoint(&[("w".into(), Tensor::ones(&[3, 3]))]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"GLAB2").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            entries in prop::collection::vec(
                ("[a-z._0-9]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let params: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(name, shape, bits)| {
                    let t = Tensor::from_fn(&shape, |i| f64::from_bits(bits.rotate_left(i as u32) & !(0x7ff << 52)));
                    (name, t)
                })
                .collect();
            let bytes = encode_checkpoint(&params);
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), params.len());
            for ((n1, t1), (n2, t2)) in params.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
            prop_assert_eq!(encode_checkpoint(&back), bytes);
        }
    }
}
