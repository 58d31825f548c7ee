//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SWAC" | u32 version | u32 layer count | per layer: u32 in, u32 out, u8 bn
//! | f64 parameters in flat order | per bn layer: f64 mean[], f64 var[]
//! | u8 activation | f64 l2 coefficient | u32 CRC-32 of everything before it
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, BnStats, MlpSpec, MlpState};
use crate::param::ParamVector;

pub const MAGIC: [u8; 4] = *b"SWAC";
pub const VERSION: u32 = 1;

pub fn encode(state: &MlpState) -> Vec<u8> {
    let spec = state.spec();
    let mut out = Vec::with_capacity(64 + 8 * spec.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let layers = spec.layers();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        out.push(u8::from(l.bn.is_some()));
    }
    for v in state.params().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in state.bn_stats() {
        for v in s.mean.iter().chain(&s.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.push(match spec.activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&spec.l2_coeff().to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn truncated(path: &Path, at: usize) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("checkpoint truncated at byte {at}")),
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(truncated(self.path, self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// `path` only labels I/O errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<MlpState> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    if bytes.len() < 12 {
        return Err(truncated(path, bytes.len()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::BadChecksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8, path };

    let n_layers = r.u32()? as usize;
    let mut dims = Vec::with_capacity(n_layers + 1);
    let mut bn = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (i, o, flag) = (r.u32()? as usize, r.u32()? as usize, r.u8()?);
        if k == 0 {
            dims.push(i);
        } else if dims.last() != Some(&i) {
            return Err(Error::shape(format!("layer {k} input {i} does not match previous output")));
        }
        dims.push(o);
        bn.push(flag != 0);
    }
    if n_layers == 0 || bn.last() == Some(&true) {
        return Err(Error::shape("checkpoint layer table is malformed"));
    }
    bn.pop();
    // Activation and l2 come after the payload and do not affect its size.
    let n_params = MlpSpec::new(dims.clone(), Activation::Relu, bn.clone(), 0.0)?.param_count();
    let params = r.f64s(n_params)?;
    let widths: Vec<usize> = dims[1..dims.len() - 1]
        .iter()
        .zip(&bn)
        .filter(|(_, b)| **b)
        .map(|(w, _)| *w)
        .collect();
    let mut stats = Vec::with_capacity(widths.len());
    for w in widths {
        let mean = r.f64s(w)?;
        let var = r.f64s(w)?;
        stats.push(BnStats { mean, var });
    }
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(Error::shape(format!("unknown activation code {other}"))),
    };
    let l2 = r.f64()?;
    if r.pos != body.len() {
        return Err(Error::shape(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
    }
    let spec = MlpSpec::new(dims, activation, bn, l2)?;
    MlpState::from_parts(spec, ParamVector::from_vec(params), stats)
}

pub fn save_checkpoint(state: &MlpState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Generator};
    use crate::trainer::refresh_bn;

    fn model() -> MlpState {
        let spec = MlpSpec::new(vec![2, 5, 4, 3], Activation::Tanh, vec![true, false], 3e-4).unwrap();
        let data = generate(&Generator::Blobs { classes: 3 }, 30, 0.5, 1).unwrap();
        refresh_bn(&MlpState::init(&spec, 7), &data).unwrap()
    }

    fn bits(s: &MlpState) -> Vec<u64> {
        let mut v: Vec<u64> = s.params().iter().map(|x| x.to_bits()).collect();
        for st in s.bn_stats() {
            v.extend(st.mean.iter().chain(&st.var).map(|x| x.to_bits()));
        }
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swac");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = encode(&model());
        let p = Path::new("mem");
        for i in 8..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x20;
            assert!(matches!(decode(&bad, p), Err(Error::BadChecksum { .. })), "byte {i}");
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = encode(&model());
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad, p), Err(Error::BadVersion(2))));
        // Version is checked before anything else is read.
        assert!(matches!(decode(&bad[..9], p), Err(Error::BadVersion(2))));
        assert!(matches!(decode(&bytes[..6], p), Err(Error::Io { .. })));
        assert!(matches!(decode(&bytes[..10], p), Err(Error::Io { .. }) | Err(Error::BadChecksum { .. })));
    }

    #[test]
    fn truncated_payload_with_matching_crc_is_an_io_error() {
        let bytes = encode(&model());
        let mut cut = bytes[..bytes.len() - 40].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&cut, Path::new("mem")), Err(Error::Io { .. })));
    }
}
