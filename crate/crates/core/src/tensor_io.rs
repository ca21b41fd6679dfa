//! Raw little-endian tensor files with a JSON sidecar.
//!
//! A tensor `foo.bin` holds the payload; `foo.json` holds
//! `{"dtype":"f32","shape":[...],"order":"row-major"}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub order: String,
}

impl TensorHeader {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar types that can be stored in a tensor file.
pub trait Element: Copy + Default + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk size matches dtype"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);
impl_element!(u8, DType::U8);
impl_element!(i32, DType::I32);

/// Path of the JSON sidecar belonging to a payload path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_tensor<T: Element>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::format(
            path,
            format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = TensorHeader {
        dtype: T::DTYPE,
        shape: shape.to_vec(),
        order: "row-major".to_string(),
    };
    let mut payload = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &x in data {
        x.write_le(&mut payload);
    }
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string(&header).expect("header serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<TensorHeader> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: TensorHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    if header.order != "row-major" {
        return Err(Error::format(
            &sidecar,
            format!("unsupported order {:?}", header.order),
        ));
    }
    Ok(header)
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let header = read_header(path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("expected dtype {:?}, found {:?}", T::DTYPE, header.dtype),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let size = T::DTYPE.size();
    let expected = header.len() * size;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "header declares {} bytes for shape {:?}, payload has {}",
                expected,
                header.shape,
                bytes.len()
            ),
        ));
    }
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Ok((header.shape, data))
}

pub fn write_array<T, S, D>(path: &Path, array: &ArrayBase<S, D>) -> Result<()>
where
    T: Element,
    S: Data<Elem = T>,
    D: Dimension,
{
    let data: Vec<T> = array.iter().copied().collect();
    write_tensor(path, array.shape(), &data)
}

pub fn read_array<T: Element>(path: &Path) -> Result<ArrayD<T>> {
    let (shape, data) = read_tensor::<T>(path)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::format(path, e.to_string()))
}

/// Read an array and check its rank.
pub fn read_array_dim<T: Element, D: Dimension>(path: &Path) -> Result<ndarray::Array<T, D>> {
    read_array::<T>(path)?
        .into_dimensionality::<D>()
        .map_err(|e| Error::format(path, format!("unexpected rank: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let data: Vec<f32> = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, -3.25, 1e-30, 7.0, f32::NAN];
        write_tensor(&path, &[3, 3], &data).unwrap();
        let (shape, back) = read_tensor::<f32>(&path).unwrap();
        assert_eq!(shape, vec![3, 3]);
        let a: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sidecar_has_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_tensor(&path, &[2], &[1u8, 2]).unwrap();
        let text = fs::read_to_string(dir.path().join("x.json")).unwrap();
        assert_eq!(text, r#"{"dtype":"u8","shape":[2],"order":"row-major"}"#);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_tensor(&path, &[3, 3], &[1.0f32; 9]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_tensor::<f32>(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_tensor(&path, &[1], &[1.0f32]).unwrap();
        assert!(read_tensor::<f64>(&path).is_err());
    }

    #[test]
    fn shape_mismatch_on_write_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(&dir.path().join("t.bin"), &[2, 2], &[1.0f32; 3]).is_err());
    }

    #[test]
    fn missing_sidecar_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_tensor::<f32>(&dir.path().join("nope.bin")).unwrap_err();
        assert!(err.to_string().contains("nope.json"));
    }

    #[test]
    fn large_feature_tensor_round_trip_matches_checksum() {
        use sha2::{Digest, Sha256};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let arr = Array3::<f32>::from_shape_fn((288, 540, 64), |(r, c, d)| {
            ((r * 31 + c * 17 + d * 7) % 1009) as f32 * 1e-3 - 0.5
        });
        let digest = |a: &Array3<f32>| {
            let mut h = Sha256::new();
            for x in a.iter() {
                h.update(x.to_le_bytes());
            }
            h.finalize()
        };
        let before = digest(&arr);
        write_array(&path, &arr).unwrap();
        let back: Array3<f32> = read_array_dim(&path).unwrap();
        assert_eq!(before, digest(&back));
    }
}
