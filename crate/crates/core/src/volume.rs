//! Dense 3D scalar volumes and the `SIM2PVOL` on-disk format.
//!
//! Voxels are stored z-fastest: the flat index of `(x, y, z)` is
//! `(x * ny + y) * nz + z`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 8] = b"SIM2PVOL";
const VOLUME_VERSION: u8 = 1;
const VOLUME_HEADER_LEN: usize = 8 + 1 + 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Volume {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn cube(side: usize) -> Self {
        Self::zeros([side; 3])
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "{} values for dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume { dims, data })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Side length if the volume is a cube.
    pub fn side(&self) -> Option<usize> {
        let [a, b, c] = self.dims;
        (a == b && b == c).then_some(a)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn check_same_shape(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.push(VOLUME_VERSION);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < VOLUME_HEADER_LEN || &bytes[..8] != VOLUME_MAGIC {
            return Err(bad("missing SIM2PVOL magic".into()));
        }
        if bytes[8] != VOLUME_VERSION {
            return Err(bad(format!("unsupported version {}", bytes[8])));
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 9 + 4 * i;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let payload = &bytes[VOLUME_HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(bad(format!(
                "payload of {} bytes, expected {} for dims {:?}",
                payload.len(),
                4 * n,
                dims
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Volume { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
