//! FOLT dense tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   "FOLT"            magic
//! offset 4   u8 version        = 1
//! offset 5   u8 dtype          = 1 (float32)
//! offset 6   u8 rank r         in 1..=4
//! offset 7   r x u32 dims
//! offset 7+4r                  row-major f32 payload
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{FolError, Result};

pub const MAGIC: &[u8; 4] = b"FOLT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_RANK: usize = 4;

/// Size in bytes of the header for a tensor of the given rank.
pub const fn header_len(rank: usize) -> usize {
    7 + 4 * rank
}

/// A dense row-major float32 tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(FolError::invalid(format!(
                "tensor rank must be in 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(FolError::invalid("tensor dimension exceeds u32"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FolError::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Tensor {
            shape: m.shape().to_vec(),
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Flattens any rank to a float64 vector.
    pub fn to_vector(&self) -> Array1<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    /// Views the tensor as a matrix. Rank 1 becomes a single row; rank 3
    /// `h x w x d` becomes `(h*w) x d`.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (rows, cols) = match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            [h, w, d] => (h * w, *d),
            s => return Err(FolError::dim(format!("cannot view shape {s:?} as a matrix"))),
        };
        let data = self.data.iter().map(|&x| f64::from(x)).collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| FolError::dim(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(FolError::invalid(format!(
                "non-finite value at element {i}"
            )));
        }
        let mut out = Vec::with_capacity(header_len(self.rank()) + 4 * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let load = |offset: usize, reason: &str| FolError::Load {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 7 {
            return Err(load(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(load(0, "bad magic, expected \"FOLT\""));
        }
        if bytes[4] != VERSION {
            return Err(load(4, &format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(load(5, &format!("unsupported dtype {}", bytes[5])));
        }
        let rank = bytes[6] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(load(6, &format!("rank {rank} out of range 1..=4")));
        }
        let payload_start = header_len(rank);
        if bytes.len() < payload_start {
            return Err(load(bytes.len(), "truncated dimension list"));
        }
        let shape: Vec<usize> = bytes[7..payload_start]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| load(7, "element count overflows"))?;
        let payload = &bytes[payload_start..];
        let expected = numel
            .checked_mul(4)
            .ok_or_else(|| load(7, "payload size overflows"))?;
        if payload.len() < expected {
            return Err(load(
                bytes.len(),
                &format!(
                    "truncated payload: expected {expected} bytes, found {}",
                    payload.len()
                ),
            ));
        }
        if payload.len() > expected {
            return Err(load(
                payload_start + expected,
                &format!("{} trailing bytes after payload", payload.len() - expected),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !x.is_finite() {
                return Err(load(payload_start + 4 * i, "non-finite value"));
            }
            data.push(x);
        }
        Ok(Tensor { shape, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FolError::io(path, e))?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.encode()?;
    fs::write(path, bytes).map_err(|e| FolError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_zero_tensor_layout() {
        let t = Tensor::zeros(vec![1, 1]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(header_len(2), 15);
        assert_eq!(bytes.len(), 15 + 4);
        assert_eq!(&bytes[..7], b"FOLT\x01\x01\x02");
        assert_eq!(&bytes[7..15], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[15..], &[0, 0, 0, 0]);
    }

    #[test]
    fn two_by_three_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let back = Tensor::decode(&t.encode().unwrap()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let mut bytes = t.encode().unwrap();
        bytes.truncate(bytes.len() - 4);
        match Tensor::decode(&bytes) {
            Err(FolError::Load { offset, reason }) => {
                assert_eq!(offset, 15 + 20);
                assert!(reason.contains("truncated payload"), "{reason}");
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn header_errors_name_offsets() {
        let good = Tensor::zeros(vec![2]).unwrap().encode().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(FolError::Load { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(Tensor::decode(&bad), Err(FolError::Load { offset: 4, .. })));

        let mut bad = good.clone();
        bad[6] = 5;
        assert!(matches!(Tensor::decode(&bad), Err(FolError::Load { offset: 6, .. })));

        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0]);
        assert!(matches!(Tensor::decode(&bad), Err(FolError::Load { offset: 19, .. })));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = Tensor::zeros(vec![3]).unwrap().encode().unwrap();
        bytes[15..19].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Tensor::decode(&bytes), Err(FolError::Load { offset: 15, .. })));
        let t = Tensor::new(vec![1], vec![f32::INFINITY]).unwrap();
        assert!(t.encode().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eye.folt");
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(matches!(
            read_tensor(dir.path().join("missing.folt")),
            Err(FolError::Io { .. })
        ));
    }

    #[test]
    fn large_random_tensor_round_trips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64 * 64 * 128).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = Tensor::new(vec![64, 64, 128], data).unwrap();
        assert_eq!(Tensor::decode(&t.encode().unwrap()).unwrap(), t);
    }

    fn finite_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                n,
            )
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_bit_exact(t in finite_tensor()) {
            let back = Tensor::decode(&t.encode().unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
