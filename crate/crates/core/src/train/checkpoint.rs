//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: magic `RBLK`, format version `u32`, tensor
//! count `u32`, then for each parameter tensor in declaration order its
//! element count `u64` followed by that many `f64`.

use std::path::Path;

use crate::error::{Error, Result};

use super::model::Network;

pub const MAGIC: &[u8; 4] = b"RBLK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let params = net.params();
    let mut out = Vec::with_capacity(12 + net.param_count() * 8 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads parameters into `net`, which must have the same architecture.
pub fn decode_into(bytes: &[u8], net: &mut Network) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(Error::Format(format!("checkpoint holds {count} tensors, model expects {}", params.len())));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let len = r.u64()? as usize;
        if len != p.len() {
            return Err(Error::Format(format!("tensor {i}: checkpoint length {len}, model expects {}", p.len())));
        }
        for v in p.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_into(path: &Path, net: &mut Network) -> Result<()> {
    decode_into(&std::fs::read(path)?, net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::train::model::ModelSpec;

    fn net(seed: u64) -> Network {
        let spec = ModelSpec::conv_stack([1, 4, 4], 2, &[2, 3], &[]).unwrap();
        Network::new(spec, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&net(1));
        assert_eq!(&bytes[..4], b"RBLK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 18);
    }

    #[test]
    fn restores_parameters() {
        let src = net(1);
        let mut dst = net(2);
        assert_ne!(src, dst);
        decode_into(&encode(&src), &mut dst).unwrap();
        assert_eq!(src, dst);
    }

    #[test]
    fn rejects_corrupt_input() {
        let good = encode(&net(1));
        let mut dst = net(2);
        assert!(decode_into(&good[..good.len() - 3], &mut dst).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_into(&bad, &mut dst).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode_into(&bad, &mut dst).is_err());
        let mut other = Network::new(ModelSpec::conv_stack([1, 4, 4], 2, &[2], &[]).unwrap(), &mut RngStream::new(0, 0)).unwrap();
        assert!(decode_into(&good, &mut other).is_err());
    }
}
