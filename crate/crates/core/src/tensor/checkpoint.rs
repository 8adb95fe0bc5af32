//! Flat little-endian checkpoint container.
//!
//! ```text
//! "GOATCKPT" u32 version, u32 count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, f32 payload (row-major)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GOATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

fn io(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        corrupt("truncated")
    } else {
        corrupt(e.to_string())
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| corrupt(format!("rank too large: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| corrupt(format!("dimension too large: {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(io)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(io)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(vec![1], vec![3.25f32]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), t)]).unwrap();
        assert_eq!(&buf[..8], b"GOATCKPT");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..18], &1u16.to_le_bytes());
        assert_eq!(buf[18], b'w');
        assert_eq!(buf[19], 1);
        assert_eq!(&buf[20..24], &1u32.to_le_bytes());
        assert_eq!(&buf[24..28], &[0x00, 0x00, 0x50, 0x40]);
        assert_eq!(buf.len(), 28);
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_checkpoint(&b"GOATCKPX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".into(), t)]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 0..40),
            name in "[a-z.]{1,12}",
        ) {
            let n = bits.len();
            let t = Tensor::from_vec(vec![n], bits.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
            let scalar = Tensor::scalar(-0.0f32);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[(name.clone(), t), ("s".into(), scalar)]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, &name);
            let got: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(back[1].1.shape(), &[] as &[usize]);
            prop_assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f32).to_bits());
        }
    }
}
