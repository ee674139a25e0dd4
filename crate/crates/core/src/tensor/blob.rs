//! `SRMT` tensor blobs: magic, version, rank, dims, dtype, then
//! little-endian row-major `f32` payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"SRMT";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unsupported dtype {0} (only 1 = f32)")]
    Dtype(u32),
    #[error("payload truncated: expected {expected} values")]
    Truncated { expected: usize },
    #[error("trailing bytes after payload")]
    Trailing,
    #[error("rank {0} is too large")]
    Rank(u32),
}

fn read_u32(r: &mut impl Read) -> Result<u32, BlobError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_blob_to(w: &mut impl Write, t: &Tensor<f32>) -> Result<(), BlobError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_blob_from(r: &mut impl Read) -> Result<Tensor<f32>, BlobError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BlobError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(BlobError::Version(version));
    }
    let ndim = read_u32(r)?;
    if ndim > 16 {
        return Err(BlobError::Rank(ndim));
    }
    let dims = (0..ndim)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let dtype = read_u32(r)?;
    if dtype != DTYPE_F32 {
        return Err(BlobError::Dtype(dtype));
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| BlobError::Truncated { expected: n })?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(BlobError::Trailing);
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(dims, data).expect("length derived from dims"))
}

pub fn write_blob(path: &Path, t: &Tensor<f32>) -> Result<(), BlobError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_blob_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Tensor<f32>, BlobError> {
    read_blob_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_blob_to(&mut buf, &t).unwrap();
        let mut expected = b"SRMT".to_vec();
        for v in [1u32, 2, 1, 2, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_blob_to(&mut buf, &t).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_blob_from(&mut bad.as_slice()),
            Err(BlobError::BadMagic(_))
        ));

        let mut bad = buf.clone();
        bad[16] = 2; // dtype field for rank 1
        assert!(matches!(read_blob_from(&mut bad.as_slice()), Err(BlobError::Dtype(2))));

        let short = &buf[..buf.len() - 1];
        assert!(matches!(
            read_blob_from(&mut &short[..]),
            Err(BlobError::Truncated { .. })
        ));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_blob_from(&mut long.as_slice()), Err(BlobError::Trailing)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_blob_to(&mut buf, &t).unwrap();
            let back = read_blob_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
