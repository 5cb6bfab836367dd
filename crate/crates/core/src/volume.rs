//! Dense 3D grids and their on-disk format.
//!
//! Data is stored channel-major, then z, y, x with x fastest:
//! `index = ((c * nz + z) * ny + y) * nx + x`.
//!
//! The MVOL/MSEG format is a 5-byte magic, four little-endian `u32`
//! (channels, nx, ny, nz), three little-endian `f32` spacings and the raw
//! payload (`f32` LE for MVOL1, `u8` for MSEG1). No padding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MVOL_MAGIC: &[u8; 5] = b"MVOL1";
pub const MSEG_MAGIC: &[u8; 5] = b"MSEG1";
const HEADER_LEN: usize = 5 + 4 * 4 + 3 * 4;

/// Spatial grid geometry shared by intensity and label volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Millimeters per voxel along x, y, z.
    pub spacing: [f32; 3],
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize, spacing: [f32; 3]) -> Result<Self> {
        let grid = Grid {
            nx,
            ny,
            nz,
            spacing,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-spacing grid.
    pub fn cube(n: usize) -> Self {
        Grid {
            nx: n,
            ny: n,
            nz: n,
            spacing: [1.0; 3],
        }
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Validation(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Validation(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// A (possibly multi-channel) 32-bit float volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        let vol = Volume {
            grid,
            channels,
            data,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Volume {
            grid,
            channels,
            data: vec![0.0; channels * grid.voxels()],
        }
    }

    /// Builds a volume by evaluating `f(c, x, y, z)` at every voxel.
    pub fn from_fn(
        grid: Grid,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * grid.voxels());
        for c in 0..channels {
            for z in 0..grid.nz {
                for y in 0..grid.ny {
                    for x in 0..grid.nx {
                        data.push(f(c, x, y, z));
                    }
                }
            }
        }
        Volume::new(grid, channels, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The contiguous plane of channel `c`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.grid.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        c * self.grid.voxels() + self.grid.offset(x, y, z)
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    /// Applies `f` elementwise, re-validating finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Volume::new(
            self.grid,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels == 0 {
            return Err(Error::Validation("channel count must be positive".into()));
        }
        let expected = self.channels * self.grid.voxels();
        if self.data.len() != expected {
            return Err(Error::Validation(format!(
                "volume data length {} does not match {} channels x {} voxels",
                self.data.len(),
                self.channels,
                self.grid.voxels()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(format!(
                "value {} at offset {i}",
                self.data[i]
            )));
        }
        Ok(())
    }
}

/// A single-channel map of `u8` labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.voxels() {
            return Err(Error::Validation(format!(
                "label data length {} does not match {} voxels",
                data.len(),
                grid.voxels()
            )));
        }
        Ok(LabelVolume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        LabelVolume {
            grid,
            data: vec![0; grid.voxels()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.grid.offset(x, y, z)]
    }

    /// Sorted distinct non-zero labels.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Either kind of volume stored in an MVOL/MSEG file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Float(Volume),
    Labels(LabelVolume),
}

impl From<Volume> for AnyVolume {
    fn from(v: Volume) -> Self {
        AnyVolume::Float(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Labels(v)
    }
}

fn encode_header(out: &mut Vec<u8>, magic: &[u8; 5], channels: usize, grid: &Grid) {
    out.extend_from_slice(magic);
    for n in [channels, grid.nx, grid.ny, grid.nz] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in grid.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

/// Serializes a volume to the MVOL1/MSEG1 byte layout.
pub fn encode_mvol(vol: &AnyVolume) -> Result<Vec<u8>> {
    match vol {
        AnyVolume::Float(v) => {
            v.validate()?;
            let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data.len());
            encode_header(&mut out, MVOL_MAGIC, v.channels, &v.grid);
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
            Ok(out)
        }
        AnyVolume::Labels(l) => {
            LabelVolume::new(l.grid, l.data.clone())?;
            let mut out = Vec::with_capacity(HEADER_LEN + l.data.len());
            encode_header(&mut out, MSEG_MAGIC, 1, &l.grid);
            out.extend_from_slice(&l.data);
            Ok(out)
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses MVOL1/MSEG1 bytes, dispatching on the magic.
pub fn decode_mvol(bytes: &[u8]) -> Result<AnyVolume> {
    if bytes.len() < 5 {
        return Err(Error::Format(format!(
            "file too short for magic: {} bytes",
            bytes.len()
        )));
    }
    let magic = &bytes[..5];
    let is_float = match magic {
        m if m == MVOL_MAGIC => true,
        m if m == MSEG_MAGIC => false,
        m => {
            return Err(Error::Format(format!(
                "unknown magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: expected {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let channels = read_u32(bytes, 5) as usize;
    let (nx, ny, nz) = (
        read_u32(bytes, 9) as usize,
        read_u32(bytes, 13) as usize,
        read_u32(bytes, 17) as usize,
    );
    let spacing = [
        read_f32(bytes, 21),
        read_f32(bytes, 25),
        read_f32(bytes, 29),
    ];
    let grid = Grid::new(nx, ny, nz, spacing).map_err(|e| Error::Format(e.to_string()))?;
    let elem = if is_float { 4 } else { 1 };
    if !is_float && channels != 1 {
        return Err(Error::Format(format!(
            "label volume must have 1 channel, got {channels}"
        )));
    }
    let expected = HEADER_LEN + elem * channels * grid.voxels();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload size mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    if is_float {
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(AnyVolume::Float(Volume::new(grid, channels, data)?))
    } else {
        Ok(AnyVolume::Labels(LabelVolume::new(grid, payload.to_vec())?))
    }
}

pub fn write_mvol(path: impl AsRef<Path>, vol: impl Into<AnyVolume>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mvol(&vol.into())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes)
}

/// Reads a float volume, rejecting label files.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_mvol(path.as_ref())? {
        AnyVolume::Float(v) => Ok(v),
        AnyVolume::Labels(_) => Err(Error::Format(format!(
            "{} holds labels, expected a float volume",
            path.as_ref().display()
        ))),
    }
}

/// Reads a label volume, rejecting float files.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_mvol(path.as_ref())? {
        AnyVolume::Labels(v) => Ok(v),
        AnyVolume::Float(_) => Err(Error::Format(format!(
            "{} holds a float volume, expected labels",
            path.as_ref().display()
        ))),
    }
}

/// Min-max rescaling to [0, 1]; a constant volume maps to zeros.
pub fn normalize_intensity(vol: &Volume) -> Result<Volume> {
    if vol.channels != 1 {
        return Err(Error::Contract(format!(
            "normalize_intensity expects 1 channel, got {}",
            vol.channels
        )));
    }
    let (lo, hi) = vol.min_max();
    if hi <= lo {
        return Ok(Volume::zeros(vol.grid, 1));
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    vol.map(|v| (((v as f64 - lo) / range) as f32).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(values: &[f32]) -> Volume {
        Volume::new(
            Grid::new(values.len(), 1, 1, [1.0; 3]).unwrap(),
            1,
            values.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn label_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mseg");
        write_mvol(&path, LabelVolume::zeros(Grid::cube(3))).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 60);
    }

    #[test]
    fn small_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let grid = Grid::new(2, 2, 2, [0.5, 1.0, 2.0]).unwrap();
        let v = Volume::from_fn(grid, 1, |_, x, y, z| (x + 2 * y + 4 * z) as f32 * 0.1).unwrap();
        write_mvol(&path, v.clone()).unwrap();
        match read_mvol(&path).unwrap() {
            AnyVolume::Float(r) => {
                assert_eq!(r.grid(), v.grid());
                let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&r), bits(&v));
            }
            other => panic!("wrong kind: {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let grid = Grid::cube(2);
        let mut data = vec![0.0; 8];
        data[3] = f32::NAN;
        assert!(matches!(
            Volume::new(grid, 1, data),
            Err(Error::NonFiniteData(_))
        ));
        // A NaN smuggled past construction is still caught by the writer.
        let mut v = Volume::zeros(grid, 1);
        v.data[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_mvol(dir.path().join("n.mvol"), v),
            Err(Error::NonFiniteData(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_mvol(&Volume::zeros(Grid::cube(2), 1).into()).unwrap();
        let mut bad = bytes.clone();
        bad[..5].copy_from_slice(b"XXXXX");
        assert!(matches!(decode_mvol(&bad), Err(Error::Format(_))));
        bytes.pop();
        match decode_mvol(&bytes) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("expected 65") && msg.contains("got 64"))
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn write_to_missing_dir_names_path() {
        let err =
            write_mvol("/nonexistent/dir/v.mvol", Volume::zeros(Grid::cube(2), 1)).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/v.mvol"));
    }

    #[test]
    fn normalize_examples() {
        let c = normalize_intensity(&vol(&[7.0; 4])).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(
            normalize_intensity(&vol(&[0.0, 5.0, 10.0])).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
        assert_eq!(
            normalize_intensity(&vol(&[-2.0, 0.0, 2.0])).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn layout_is_a_bijection() {
        let grid = Grid::new(3, 4, 5, [1.0; 3]).unwrap();
        let v = Volume::zeros(grid, 2);
        let mut seen = vec![false; v.data().len()];
        for c in 0..2 {
            for z in 0..5 {
                for y in 0..4 {
                    for x in 0..3 {
                        let i = v.index(c, x, y, z);
                        assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn normalize_range_and_idempotence(values in prop::collection::vec(-100.0f32..100.0, 2..64)) {
            let v = vol(&values);
            let n = normalize_intensity(&v).unwrap();
            let (lo, hi) = v.min_max();
            if hi > lo {
                let (nlo, nhi) = n.min_max();
                prop_assert_eq!(nlo, 0.0);
                prop_assert_eq!(nhi, 1.0);
            }
            let nn = normalize_intensity(&n).unwrap();
            for (a, b) in n.data().iter().zip(nn.data()) {
                prop_assert!((a - b).abs() <= f32::EPSILON);
            }
        }
    }
}
