//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Geometry travels through the sform (preferred on read) and an equivalent
//! qform. Writing is always little-endian with a 352-byte data offset.
//! Scalar volumes are written as float32, label maps as int16, vector fields
//! as float32 with a 5th dimension of 3 (`NIFTI_INTENT_VECTOR`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::grid::{orthonormalize, ImageGrid};
use super::image::{LabelMap, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;

pub const INTENT_NONE: i16 = 0;
pub const INTENT_VECTOR: i16 = 1007;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Voxel payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NiftiData {
    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::I8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::U16(v) => v.len(),
            NiftiData::I32(v) => v.len(),
            NiftiData::F32(v) => v.len(),
            NiftiData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn datatype(&self) -> (i16, i16) {
        match self {
            NiftiData::U8(_) => (DT_UINT8, 8),
            NiftiData::I8(_) => (DT_INT8, 8),
            NiftiData::I16(_) => (DT_INT16, 16),
            NiftiData::U16(_) => (DT_UINT16, 16),
            NiftiData::I32(_) => (DT_INT32, 32),
            NiftiData::F32(_) => (DT_FLOAT32, 32),
            NiftiData::F64(_) => (DT_FLOAT64, 64),
        }
    }

    pub fn is_integer(&self) -> bool {
        !matches!(self, NiftiData::F32(_) | NiftiData::F64(_))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NiftiData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::U16(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::F64(v) => v.clone(),
        }
    }
}

/// A decoded NIfTI-1 file: spatial grid, extra dimensions and payload.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub grid: ImageGrid,
    /// Number of 4th-dimension frames (1 for 3D images).
    pub frames: usize,
    /// Number of 5th-dimension components (3 for vector fields).
    pub components: usize,
    pub intent_code: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub data: NiftiData,
}

impl NiftiImage {
    /// Payload with the scaling slope/intercept applied.
    pub fn scaled_values(&self) -> Vec<f64> {
        let raw = self.data.to_f64();
        if self.scl_slope != 0.0 && (self.scl_slope != 1.0 || self.scl_inter != 0.0) {
            let (a, b) = (self.scl_slope as f64, self.scl_inter as f64);
            raw.into_iter().map(|x| a * x + b).collect()
        } else {
            raw
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map_or(false, |e| e.eq_ignore_ascii_case("gz"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut buf = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)?;
    } else {
        BufReader::new(file).read_to_end(&mut buf)?;
    }
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        // default gzip header has mtime 0, so output is byte-reproducible
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
        file.flush()?;
    }
    Ok(())
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(msg) => Error::Nifti(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    let little = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32;
    let big = BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32;
    if !little && !big {
        return Err(Error::Nifti("sizeof_hdr is not 348; not a NIfTI-1 file".into()));
    }
    if little {
        decode_with::<LittleEndian>(bytes)
    } else {
        decode_with::<BigEndian>(bytes)
    }
}

fn decode_with<E: ByteOrder>(b: &[u8]) -> Result<NiftiImage> {
    let magic = &b[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!(
            "unsupported magic {:?}; only single-file NIfTI-1 is supported",
            String::from_utf8_lossy(magic)
        )));
    }
    let i16_at = |off: usize| E::read_i16(&b[off..]);
    let f32_at = |off: usize| E::read_f32(&b[off..]);

    let mut dim = [0i16; 8];
    for (a, d) in dim.iter_mut().enumerate() {
        *d = i16_at(offsets::DIM + 2 * a);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("invalid dim[0] = {ndim}")));
    }
    let intent_code = i16_at(offsets::INTENT_CODE);
    let used = &dim[1..=ndim as usize];
    if let Some(bad) = used.iter().find(|&&d| d <= 0) {
        return Err(Error::Nifti(format!("non-positive dimension {bad} in {used:?}")));
    }
    let size = |a: usize| if a <= ndim as usize { dim[a] as usize } else { 1 };
    let (frames, components) = if ndim <= 4 {
        (size(4), 1)
    } else if ndim == 5 && intent_code == INTENT_VECTOR && size(4) == 1 {
        (1, size(5))
    } else {
        return Err(Error::Nifti(format!(
            "{ndim}-dimensional images are not supported (at most 4 dimensions, or a 3D vector field)"
        )));
    };

    let datatype = i16_at(offsets::DATATYPE);
    let bitpix = i16_at(offsets::BITPIX);
    let (expected_bits, bytes_per) = match datatype {
        DT_UINT8 | DT_INT8 => (8, 1),
        DT_INT16 | DT_UINT16 => (16, 2),
        DT_INT32 | DT_FLOAT32 => (32, 4),
        DT_FLOAT64 => (64, 8),
        other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    };
    if bitpix != expected_bits {
        return Err(Error::Nifti(format!("bitpix {bitpix} inconsistent with datatype {datatype}")));
    }

    let mut pixdim = [0f32; 8];
    for (a, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(offsets::PIXDIM + 4 * a);
    }
    let vox_offset = f32_at(offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Nifti(format!("invalid vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let scl_slope = f32_at(offsets::SCL_SLOPE);
    let scl_inter = f32_at(offsets::SCL_INTER);

    let dims3 = [size(1), size(2), size(3)];
    let qform_code = i16_at(offsets::QFORM_CODE);
    let sform_code = i16_at(offsets::SFORM_CODE);
    let grid = if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = f32_at(offsets::SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        ImageGrid::from_affine(dims3, &m)
    } else if qform_code > 0 {
        let qb = f32_at(offsets::QUATERN_B) as f64;
        let qc = f32_at(offsets::QUATERN_B + 4) as f64;
        let qd = f32_at(offsets::QUATERN_B + 8) as f64;
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(qa, qb, qc, qd));
        let mut r: Matrix3<f64> = *rot.to_rotation_matrix().matrix();
        if pixdim[0] < 0.0 {
            let c = -r.column(2);
            r.set_column(2, &c);
        }
        let origin = [0, 1, 2].map(|a| f32_at(offsets::QOFFSET_X + 4 * a) as f64);
        let spacing = [1, 2, 3].map(|a| (pixdim[a] as f64).abs());
        ImageGrid::new(dims3, spacing, origin, orthonormalize(&r)?)
    } else {
        let spacing = [1, 2, 3].map(|a| {
            let s = (pixdim[a] as f64).abs();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        ImageGrid::new(dims3, spacing, [0.0; 3], Matrix3::identity())
    }
    .map_err(|e| Error::Nifti(format!("invalid geometry: {e}")))?;

    let count = dims3[0] * dims3[1] * dims3[2] * frames * components;
    let need = vox_offset + count * bytes_per;
    if b.len() < need {
        return Err(Error::Nifti(format!(
            "truncated data: need {need} bytes, file has {}",
            b.len()
        )));
    }
    let raw = &b[vox_offset..need];
    let data = match datatype {
        DT_UINT8 => NiftiData::U8(raw.to_vec()),
        DT_INT8 => NiftiData::I8(raw.iter().map(|&x| x as i8).collect()),
        DT_INT16 => {
            let mut v = vec![0i16; count];
            E::read_i16_into(raw, &mut v);
            NiftiData::I16(v)
        }
        DT_UINT16 => {
            let mut v = vec![0u16; count];
            E::read_u16_into(raw, &mut v);
            NiftiData::U16(v)
        }
        DT_INT32 => {
            let mut v = vec![0i32; count];
            E::read_i32_into(raw, &mut v);
            NiftiData::I32(v)
        }
        DT_FLOAT32 => {
            let mut v = vec![0f32; count];
            E::read_f32_into(raw, &mut v);
            NiftiData::F32(v)
        }
        DT_FLOAT64 => {
            let mut v = vec![0f64; count];
            E::read_f64_into(raw, &mut v);
            NiftiData::F64(v)
        }
        _ => unreachable!("datatype validated above"),
    };
    Ok(NiftiImage { grid, frames, components, intent_code, scl_slope, scl_inter, data })
}

/// Encodes and writes a NIfTI-1 image. `frames > 1` writes a 4D series;
/// `components > 1` writes a vector image (requires `frames == 1`).
pub fn write_nifti(
    path: impl AsRef<Path>,
    grid: &ImageGrid,
    frames: usize,
    components: usize,
    data: &NiftiData,
    intent_code: i16,
) -> Result<()> {
    let count = grid.len() * frames * components;
    if data.len() != count {
        return Err(Error::Nifti(format!(
            "payload has {} values, geometry needs {count}",
            data.len()
        )));
    }
    if frames > 1 && components > 1 {
        return Err(Error::Nifti("vector time series are not supported".into()));
    }
    let dims = grid.dims();
    for &d in dims.iter().chain([frames, components].iter()) {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::Nifti(format!("dimension {d} out of range for NIfTI-1")));
        }
    }
    let (datatype, bitpix) = data.datatype();
    let mut h = vec![0u8; VOX_OFFSET];
    type E = LittleEndian;
    E::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = if components > 1 {
        5
    } else if frames > 1 {
        4
    } else {
        3
    };
    dim[1] = dims[0] as i16;
    dim[2] = dims[1] as i16;
    dim[3] = dims[2] as i16;
    dim[4] = frames as i16;
    dim[5] = components as i16;
    for (a, d) in dim.iter().enumerate() {
        E::write_i16(&mut h[offsets::DIM + 2 * a..], *d);
    }
    E::write_i16(&mut h[offsets::INTENT_CODE..], intent_code);
    E::write_i16(&mut h[offsets::DATATYPE..], datatype);
    E::write_i16(&mut h[offsets::BITPIX..], bitpix);

    // qform: rotation quaternion with qfac carrying a reflected third axis
    let mut rot = *grid.direction();
    let qfac = if rot.determinant() < 0.0 {
        let c = -rot.column(2);
        rot.set_column(2, &c);
        -1.0f32
    } else {
        1.0f32
    };
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };

    let spacing = grid.spacing();
    let pixdim = [qfac, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (a, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[offsets::PIXDIM + 4 * a..], *p);
    }
    E::write_f32(&mut h[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    E::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    E::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    h[offsets::XYZT_UNITS] = 2 | 8; // mm, seconds
    let descrip = b"fetaldbm";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    E::write_i16(&mut h[offsets::QFORM_CODE..], 1);
    E::write_i16(&mut h[offsets::SFORM_CODE..], 2);
    E::write_f32(&mut h[offsets::QUATERN_B..], q.i as f32);
    E::write_f32(&mut h[offsets::QUATERN_B + 4..], q.j as f32);
    E::write_f32(&mut h[offsets::QUATERN_B + 8..], q.k as f32);
    let origin: Vector3<f64> = grid.origin();
    for a in 0..3 {
        E::write_f32(&mut h[offsets::QOFFSET_X + 4 * a..], origin[a] as f32);
    }
    let affine = grid.affine();
    for r in 0..3 {
        for c in 0..4 {
            E::write_f32(&mut h[offsets::SROW_X + 16 * r + 4 * c..], affine[(r, c)] as f32);
        }
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut bytes = h;
    let start = bytes.len();
    bytes.resize(start + count * (bitpix as usize / 8), 0);
    let body = &mut bytes[start..];
    match data {
        NiftiData::U8(v) => body.copy_from_slice(v),
        NiftiData::I8(v) => body.iter_mut().zip(v).for_each(|(o, &x)| *o = x as u8),
        NiftiData::I16(v) => E::write_i16_into(v, body),
        NiftiData::U16(v) => E::write_u16_into(v, body),
        NiftiData::I32(v) => E::write_i32_into(v, body),
        NiftiData::F32(v) => E::write_f32_into(v, body),
        NiftiData::F64(v) => E::write_f64_into(v, body),
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a 3D scalar image as intensities (any supported datatype).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let img = read_nifti(path)?;
    if img.frames != 1 || img.components != 1 {
        return Err(Error::Nifti(format!(
            "expected a 3D scalar image, found {} frames × {} components",
            img.frames, img.components
        )));
    }
    let data = match (&img.data, img.scl_slope) {
        (NiftiData::F32(v), s) if s == 0.0 || (s == 1.0 && img.scl_inter == 0.0) => v.clone(),
        _ => img.scaled_values().into_iter().map(|x| x as f32).collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Nifti("image contains non-finite intensities".into()));
    }
    Volume::new(img.grid, data)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(path, vol.grid(), 1, 1, &NiftiData::F32(vol.data().to_vec()), INTENT_NONE)
}

/// Reads a 3D label image; values must be non-negative integers.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let img = read_nifti(path)?;
    if img.frames != 1 || img.components != 1 {
        return Err(Error::Nifti("expected a 3D label image".into()));
    }
    let values = img.scaled_values();
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
            return Err(Error::Nifti(format!("label value {v} is not a non-negative integer")));
        }
        data.push(v as u16);
    }
    LabelMap::with_default_names(img.grid, data)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut data = Vec::with_capacity(labels.data().len());
    for &l in labels.data() {
        data.push(i16::try_from(l).map_err(|_| Error::Nifti(format!("label {l} exceeds int16")))?);
    }
    write_nifti(path, labels.grid(), 1, 1, &NiftiData::I16(data), INTENT_NONE)
}

/// Image read without committing to a kind, decided by the stored datatype.
#[derive(Debug, Clone)]
pub enum AnyImage {
    Scalar(Volume),
    Labels(LabelMap),
}

pub fn read_image(path: impl AsRef<Path>) -> Result<AnyImage> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    let unscaled = img.scl_slope == 0.0 || (img.scl_slope == 1.0 && img.scl_inter == 0.0);
    if img.data.is_integer() && unscaled {
        read_labels(path).map(AnyImage::Labels)
    } else {
        read_volume(path).map(AnyImage::Scalar)
    }
}

/// Writes volumes sharing one grid as a 4D series, in the given order.
pub fn write_4d(frames: &[Volume], path: impl AsRef<Path>) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::InvalidInput("no frames to stack".into()))?;
    let grid = first.grid();
    let mut data = Vec::with_capacity(grid.len() * frames.len());
    for (t, f) in frames.iter().enumerate() {
        if !f.grid().same_as(grid, 1e-6) {
            return Err(Error::GeometryMismatch(format!("frame {t} grid differs from frame 0")));
        }
        data.extend_from_slice(f.data());
    }
    write_nifti(path, grid, frames.len(), 1, &NiftiData::F32(data), INTENT_NONE)
}

pub fn read_4d(path: impl AsRef<Path>) -> Result<Vec<Volume>> {
    let img = read_nifti(path)?;
    if img.components != 1 {
        return Err(Error::Nifti("expected a scalar series".into()));
    }
    let values = img.scaled_values();
    let n = img.grid.len();
    (0..img.frames)
        .map(|t| {
            Volume::new(
                img.grid.clone(),
                values[t * n..(t + 1) * n].iter().map(|&x| x as f32).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::grid::rotation_from_vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ImageGrid::isotropic(16, 1.0).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let v = Volume::new(g, data).unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert!(back.grid().same_as(v.grid(), 1e-5));
        }
    }

    #[test]
    fn geometry_round_trip_with_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let rot = rotation_from_vector(&Vector3::new(0.4, -0.7, 0.25));
        let g = ImageGrid::new([6, 7, 8], [0.5, 0.5, 0.5], [12.5, -3.25, 40.0], rot).unwrap();
        let v = Volume::filled(g.clone(), 1.0);
        let p = dir.path().join("rot.nii.gz");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert!(back.grid().same_as(&g, 1e-5), "{:?} vs {:?}", back.grid(), g);
    }

    #[test]
    fn qform_only_geometry() {
        // zero the sform code so the reader falls back to the quaternion
        let dir = tempfile::tempdir().unwrap();
        let mut rot = rotation_from_vector(&Vector3::new(0.0, 0.3, 0.9));
        let c = -rot.column(2);
        rot.set_column(2, &c); // left-handed, exercises qfac
        let g = ImageGrid::new([4, 5, 6], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], rot).unwrap();
        let p = dir.path().join("q.nii");
        write_volume(&Volume::zeros(g.clone()), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[offsets::SFORM_CODE..], 0);
        std::fs::write(&p, &bytes).unwrap();
        let back = read_volume(&p).unwrap();
        assert!(back.grid().same_as(&g, 1e-5));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::isotropic(8, 0.5).unwrap();
        let data: Vec<u16> = (0..g.len()).map(|i| (i % 3 == 0) as u16).collect();
        let l = LabelMap::with_default_names(g, data).unwrap();
        let p = dir.path().join("l.nii.gz");
        write_labels(&l, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap().data(), l.data());
        assert!(matches!(read_image(&p).unwrap(), AnyImage::Labels(_)));
    }

    #[test]
    fn series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::isotropic(4, 1.0).unwrap();
        let frames: Vec<Volume> = (0..3).map(|t| Volume::filled(g.clone(), t as f32)).collect();
        let p = dir.path().join("s.nii.gz");
        write_4d(&frames, &p).unwrap();
        assert_eq!(read_4d(&p).unwrap(), frames);
        assert!(read_volume(&p).is_err());
    }

    #[test]
    fn malformed_headers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::isotropic(4, 1.0).unwrap();
        let p = dir.path().join("x.nii");
        write_volume(&Volume::zeros(g), &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut zero_dim = good.clone();
        LittleEndian::write_i16(&mut zero_dim[offsets::DIM + 2..], 0);
        std::fs::write(&p, &zero_dim).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Nifti(_))));

        let mut bad_type = good.clone();
        LittleEndian::write_i16(&mut bad_type[offsets::DATATYPE..], 1792);
        std::fs::write(&p, &bad_type).unwrap();
        let err = read_volume(&p).unwrap_err().to_string();
        assert!(err.contains("datatype"), "{err}");

        let mut six_d = good.clone();
        LittleEndian::write_i16(&mut six_d[offsets::DIM..], 6);
        std::fs::write(&p, &six_d).unwrap();
        let err = read_volume(&p).unwrap_err().to_string();
        assert!(err.contains("not supported"), "{err}");

        std::fs::write(&p, &good[..100]).unwrap();
        assert!(read_volume(&p).is_err());
    }
}
