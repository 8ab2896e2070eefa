//! Multi-channel voxel grids, label maps and binary masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container};
use super::DataError;

/// A multi-channel volume of 32-bit floats. Layout: channel fastest,
/// then x, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, DataError> {
        let expected = checked_len(dims, channels)?;
        if data.len() != expected {
            return Err(DataError::InvalidVolume(format!(
                "expected {expected} values for {dims:?} x {channels} channels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(DataError::InvalidVolume(format!("bad spacing {spacing:?}")));
        }
        Ok(Volume {
            dims,
            spacing,
            channels,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], channels: usize) -> Result<Self, DataError> {
        let len = checked_len(dims, channels)?;
        Volume::new(dims, spacing, channels, vec![0.0; len])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        c + self.channels * (x + self.dims[0] * (y + self.dims[1] * z))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = value;
    }
}

fn checked_len(dims: [usize; 3], channels: usize) -> Result<usize, DataError> {
    if dims.iter().any(|&d| d == 0) || channels == 0 {
        return Err(DataError::InvalidVolume(format!(
            "zero dimension in {dims:?} x {channels} channels"
        )));
    }
    dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .and_then(|v| v.checked_mul(channels))
        .filter(|&v| v <= (1usize << 40))
        .ok_or_else(|| DataError::InvalidVolume(format!("dimension overflow in {dims:?}")))
}

/// Per-voxel class indices, same spatial layout as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self, DataError> {
        let expected = checked_len(dims, 1)?;
        if data.len() != expected {
            return Err(DataError::InvalidVolume(format!(
                "expected {expected} labels for {dims:?}, got {}",
                data.len()
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, DataError> {
        let len = checked_len(dims, 1)?;
        LabelVolume::new(dims, spacing, vec![0; len])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    /// Boolean mask of one class.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&l| l == class).collect(),
        }
    }

    /// Mask of the union of several classes.
    pub fn union_mask(&self, classes: &[u8]) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|l| classes.contains(l)).collect(),
        }
    }
}

/// A binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Coordinates of set voxels, x-fastest.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [dx, dy, _] = self.dims;
        self.data.iter().enumerate().filter_map(move |(i, &b)| {
            b.then(|| {
                let x = i % dx;
                let y = (i / dx) % dy;
                let z = i / (dx * dy);
                (x, y, z)
            })
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    kind: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    dtype: String,
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<(), DataError> {
    let header = VolumeHeader {
        kind: "volume".into(),
        dims: volume.dims,
        spacing: volume.spacing,
        channels: volume.channels,
        dtype: "f32".into(),
    };
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, &header, &payload)
}

pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    let (header, payload): (VolumeHeader, Vec<u8>) = read_container(path)?;
    if header.kind != "volume" || header.dtype != "f32" {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("kind {:?} dtype {:?}", header.kind, header.dtype),
        });
    }
    let expected = checked_len(header.dims, header.channels).map_err(|_| DataError::BadHeader {
        path: path.to_path_buf(),
        reason: format!("bad dims {:?} x {}", header.dims, header.channels),
    })?;
    if payload.len() != expected * 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: (expected * 4) as u64,
            actual: payload.len() as u64,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Volume::new(header.dims, header.spacing, header.channels, data)
}

pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<(), DataError> {
    let header = VolumeHeader {
        kind: "labels".into(),
        dims: labels.dims,
        spacing: labels.spacing,
        channels: 1,
        dtype: "u8".into(),
    };
    write_container(path, &header, &labels.data)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume, DataError> {
    let (header, payload): (VolumeHeader, Vec<u8>) = read_container(path)?;
    if header.kind != "labels" || header.dtype != "u8" {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("kind {:?} dtype {:?}", header.kind, header.dtype),
        });
    }
    LabelVolume::new(header.dims, header.spacing, payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn volume_round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(107);
        let data: Vec<f32> = (0..3 * 4 * 5 * 2).map(|_| rng.random::<f32>()).collect();
        let vol = Volume::new([3, 4, 5], [1.0, 1.0, 2.0], 2, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        for (a, b) in back.data().iter().zip(vol.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn labels_round_trip_is_bitwise() {
        let labels = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vol");
        write_labels(&labels, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(Volume::zeros([0, 2, 2], [1.0; 3], 1).is_err());
        assert!(Volume::zeros([2, 2, 2], [1.0; 3], 0).is_err());
        assert!(LabelVolume::zeros([2, 0, 2], [1.0; 3]).is_err());
    }

    #[test]
    fn wrong_payload_length_is_truncation() {
        let vol = Volume::zeros([2, 2, 2], [1.0; 3], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        write_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn indexing_is_channel_fastest() {
        let mut vol = Volume::zeros([2, 3, 4], [1.0; 3], 2).unwrap();
        vol.set(1, 2, 3, 1, 9.0);
        assert_eq!(vol.index(0, 0, 0, 0), 0);
        assert_eq!(vol.index(0, 0, 0, 1), 1);
        assert_eq!(vol.index(1, 0, 0, 0), 2);
        assert_eq!(vol.get(1, 2, 3, 1), 9.0);
    }

    #[test]
    fn mask_iteration_and_counting() {
        let mut m = Mask::empty([3, 3, 3]);
        m.set(2, 1, 0, true);
        m.set(0, 0, 2, true);
        assert_eq!(m.count(), 2);
        let pts: Vec<_> = m.iter_set().collect();
        assert_eq!(pts, vec![(2, 1, 0), (0, 0, 2)]);
    }
}
