//! Versioned binary model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   4 bytes  "SFRG"
//! version u32      currently 1
//! kind    u32      1 = toy CNN, 2 = SRAE explanation network
//! ndims   u32      number of descriptor entries
//! dims    ndims × u32
//! blobs   f32 values of every tensor, concatenated in the kind's fixed order
//! ```
//!
//! Tensor lengths follow from the descriptor, so the blob region carries no
//! framing and the file length is checked exactly.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::cnn::{CnnArchitecture, ToyCnn};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFRG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ToyCnn = 1,
    Srae = 2,
}

impl ModelKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(ModelKind::ToyCnn),
            2 => Ok(ModelKind::Srae),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }
}

/// Decoded container before kind-specific interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ModelKind,
    pub descriptor: Vec<u32>,
    pub values: Vec<f32>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.descriptor.len() + self.values.len()));
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(self.kind as u32).expect("vec write");
        out.write_u32::<LittleEndian>(self.descriptor.len() as u32).expect("vec write");
        for &d in &self.descriptor {
            out.write_u32::<LittleEndian>(d).expect("vec write");
        }
        for &v in &self.values {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header = |r: &mut &[u8]| r.read_u32::<LittleEndian>().map_err(|_| Error::Format("truncated header".into()));
        let version = header(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = ModelKind::from_u32(header(&mut r)?)?;
        let ndims = header(&mut r)? as usize;
        if ndims > 64 {
            return Err(Error::Format(format!("implausible descriptor length {ndims}")));
        }
        let descriptor = (0..ndims).map(|_| header(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.len().is_multiple_of(4) {
            return Err(Error::Format("blob region is not a whole number of f32 values".into()));
        }
        let mut values = vec![0f32; r.len() / 4];
        r.read_f32_into::<LittleEndian>(&mut values).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Container { kind, descriptor, values })
    }

    /// Splits `values` into consecutive tensors of the given lengths; the total must match exactly.
    pub fn split(&self, lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
        let total: usize = lengths.iter().sum();
        if total != self.values.len() {
            return Err(Error::Format(format!(
                "descriptor implies {total} weights, file holds {}",
                self.values.len()
            )));
        }
        let mut out = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &n in lengths {
            out.push(self.values[at..at + n].iter().map(|&v| f64::from(v)).collect());
            at += n;
        }
        Ok(out)
    }
}

pub fn encode_cnn(model: &ToyCnn) -> Vec<u8> {
    let a = model.architecture();
    let descriptor = [a.height, a.width, a.channels, a.conv1_filters, a.conv2_filters, a.hidden, a.classes]
        .iter()
        .map(|&d| d as u32)
        .collect();
    let values = model.tensors().iter().flatten().map(|&v| v as f32).collect();
    Container { kind: ModelKind::ToyCnn, descriptor, values }.encode()
}

pub fn decode_cnn(bytes: &[u8]) -> Result<ToyCnn> {
    let c = Container::decode(bytes)?;
    if c.kind != ModelKind::ToyCnn {
        return Err(Error::Format("file does not hold a toy CNN".into()));
    }
    let d: Vec<usize> = c.descriptor.iter().map(|&v| v as usize).collect();
    let [height, width, channels, conv1_filters, conv2_filters, hidden, classes] = d[..] else {
        return Err(Error::Format(format!("CNN descriptor needs 7 entries, got {}", d.len())));
    };
    let arch = CnnArchitecture { height, width, channels, conv1_filters, conv2_filters, hidden, classes };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    let tensors = c.split(&arch.tensor_lengths())?;
    ToyCnn::from_tensors(arch, tensors).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_cnn(model: &ToyCnn, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_cnn(model))?;
    Ok(())
}

pub fn load_cnn(path: impl AsRef<Path>) -> Result<ToyCnn> {
    decode_cnn(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scorer;

    #[test]
    fn header_layout_is_little_endian() {
        let arch = CnnArchitecture { height: 4, width: 4, channels: 1, conv1_filters: 1, conv2_filters: 1, hidden: 1, classes: 2 };
        let model = ToyCnn::initialize(arch, 1).unwrap();
        let bytes = encode_cnn(&model);
        assert_eq!(&bytes[0..4], b"SFRG");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[7, 0, 0, 0]);
        let total: usize = arch.tensor_lengths().iter().sum();
        assert_eq!(bytes.len(), 16 + 7 * 4 + total * 4);
    }

    #[test]
    fn round_trip_evaluates_identically() {
        let model = ToyCnn::initialize(CnnArchitecture::default(), 42).unwrap();
        let back = decode_cnn(&encode_cnn(&model)).unwrap();
        assert_eq!(back, model);
        let img = crate::image::Image::filled(model.input_shape(), 0.4).unwrap();
        assert_eq!(back.probabilities(&img), model.probabilities(&img));
    }

    #[test]
    fn rejects_corruption() {
        let model = ToyCnn::initialize(CnnArchitecture::default(), 42).unwrap();
        let bytes = encode_cnn(&model);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_cnn(&bad).is_err());
        assert!(decode_cnn(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_cnn(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_cnn(&bad).is_err());
    }
}
