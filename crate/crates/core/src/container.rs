//! Versioned binary envelope for fitted models.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "MLPC"
//! version  u16      currently 1
//! kind     u8       ModelKind tag
//! payload  ...      kind-specific
//! ```
//!
//! A network is encoded as `u32 layer_count` followed by, per layer,
//! `u32 in_dim, u32 out_dim, u8 activation, f64[out*in] weights (row-major),
//! f64[out] bias`. Floats are stored as raw IEEE-754 bits so decoding is
//! bit-exact.

use crate::nn::{Activation, Dense, MlpParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLPC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Mlp = 1,
    Ranker = 2,
    Platt = 3,
    SmoothedIsotonic = 4,
    ConfCalib = 5,
    Mlplatt = 6,
}

impl ModelKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => ModelKind::Mlp,
            2 => ModelKind::Ranker,
            3 => ModelKind::Platt,
            4 => ModelKind::SmoothedIsotonic,
            5 => ModelKind::ConfCalib,
            6 => ModelKind::Mlplatt,
            _ => return None,
        })
    }
}

/// Types that can be stored in the container.
pub trait Persist: Sized {
    const KIND: ModelKind;

    fn encode_payload(&self, enc: &mut Encoder);
    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        enc.buf.extend_from_slice(MAGIC);
        enc.u16(VERSION);
        enc.u8(Self::KIND as u8);
        self.encode_payload(&mut enc);
        enc.buf
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        if dec.take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = dec.u16()?;
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let tag = dec.u8()?;
        match ModelKind::from_tag(tag) {
            Some(kind) if kind == Self::KIND => {}
            Some(kind) => {
                return Err(Error::Container(format!(
                    "expected {:?} payload, found {kind:?}",
                    Self::KIND
                )))
            }
            None => return Err(Error::Container(format!("unknown kind tag {tag}"))),
        }
        let value = Self::decode_payload(&mut dec)?;
        if !dec.is_empty() {
            return Err(Error::Container(format!(
                "{} trailing bytes",
                dec.remaining()
            )));
        }
        Ok(value)
    }

    fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Peeks at the kind tag of an encoded model.
pub fn kind_of(bytes: &[u8]) -> Result<ModelKind> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    ModelKind::from_tag(bytes[6]).ok_or_else(|| Error::Container("unknown kind tag".into()))
}

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn len_prefix(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn mlp(&mut self, net: &MlpParams) {
        self.len_prefix(net.layers().len());
        for layer in net.layers() {
            self.len_prefix(layer.in_dim());
            self.len_prefix(layer.out_dim());
            self.u8(layer.activation().tag());
            self.f64s(layer.weights());
            self.f64s(layer.bias());
        }
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Container(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.array()?)))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() / 8 < n {
            return Err(Error::Container(format!("truncated float block of {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn len_prefix(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn mlp(&mut self) -> Result<MlpParams> {
        let depth = self.len_prefix()?;
        let mut layers = Vec::with_capacity(depth.min(1024));
        for _ in 0..depth {
            let in_dim = self.len_prefix()?;
            let out_dim = self.len_prefix()?;
            let tag = self.u8()?;
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| Error::Container(format!("unknown activation tag {tag}")))?;
            let weights = self.f64s(in_dim.saturating_mul(out_dim))?;
            let bias = self.f64s(out_dim)?;
            layers.push(Dense::new(in_dim, out_dim, weights, bias, activation)?);
        }
        MlpParams::new(layers)
    }
}

impl Persist for MlpParams {
    const KIND: ModelKind = ModelKind::Mlp;

    fn encode_payload(&self, enc: &mut Encoder) {
        enc.mlp(self);
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        dec.mlp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MlpParams::init(
            3,
            &[(4, Activation::Relu), (2, Activation::Identity), (1, Activation::Sigmoid)],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let original = net();
        let bytes = original.to_bytes();
        let back = MlpParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, original);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(kind_of(&bytes).unwrap(), ModelKind::Mlp);
    }

    #[test]
    fn header_layout() {
        let bytes = net().to_bytes();
        assert_eq!(&bytes[..4], b"MLPC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], ModelKind::Mlp as u8);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = net().to_bytes();
        assert!(MlpParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpParams::from_bytes(&bad).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(MlpParams::from_bytes(&wrong_version).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(MlpParams::from_bytes(&trailing).is_err());
    }
}
