//! Single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only the subset needed by the pipeline is supported: little-endian,
//! three spatial dimensions, no extensions, datatypes uint8/int16/float32/
//! float64. The origin is stored in both the qform offsets (identity
//! quaternion) and the sform translation column so third-party tools agree
//! on the voxel-to-world mapping.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DataType, Grid, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
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
    pub const QOFFSET: usize = 268;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header field `{field}`: {detail}")]
    MalformedHeader { field: &'static str, detail: String },
    #[error("unsupported datatype code {code} in field `datatype`")]
    UnsupportedDatatype { code: i16 },
    #[error("truncated data section: expected {expected} bytes after vox_offset, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dim[{axis}] = {value} exceeds the 16-bit header field")]
    DimsOverflow { axis: usize, value: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn malformed(field: &'static str, detail: impl Into<String>) -> NiftiError {
    NiftiError::MalformedHeader { field, detail: detail.into() }
}

fn get_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}

fn get_i32(buf: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn get_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], at: usize, v: i32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NiftiError::Io { path: path.to_path_buf(), source })?;
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(buf: &[u8]) -> Result<Volume3D, NiftiError> {
    if buf.len() < HEADER_SIZE {
        return Err(malformed("sizeof_hdr", format!("file holds only {} bytes", buf.len())));
    }
    let sizeof_hdr = get_i32(buf, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(malformed("sizeof_hdr", format!("expected 348, found {sizeof_hdr}")));
    }
    if &buf[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(malformed("magic", format!("expected \"n+1\\0\", found {:?}", &buf[344..348])));
    }

    let ndim = get_i16(buf, offsets::DIM);
    if !(3..=7).contains(&ndim) {
        return Err(malformed("dim", format!("dim[0] = {ndim}, expected 3 spatial dimensions")));
    }
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let d = get_i16(buf, offsets::DIM + 2 * (axis + 1));
        if d < 1 {
            return Err(malformed("dim", format!("dim[{}] = {d}", axis + 1)));
        }
        dims[axis] = d as usize;
    }
    for extra in 4..=ndim as usize {
        let d = get_i16(buf, offsets::DIM + 2 * extra);
        if d != 1 {
            return Err(malformed("dim", format!("dim[{extra}] = {d}, only 3D volumes are supported")));
        }
    }

    let code = get_i16(buf, offsets::DATATYPE);
    let dtype = DataType::from_code(code).ok_or(NiftiError::UnsupportedDatatype { code })?;
    let bitpix = get_i16(buf, offsets::BITPIX);
    if bitpix as usize != 8 * dtype.size_bytes() {
        return Err(malformed("bitpix", format!("{bitpix} does not match datatype {code}")));
    }

    let mut spacing = [0.0f64; 3];
    for axis in 0..3 {
        let s = get_f32(buf, offsets::PIXDIM + 4 * (axis + 1));
        if !(s.is_finite() && s > 0.0) {
            return Err(malformed("pixdim", format!("pixdim[{}] = {s}", axis + 1)));
        }
        spacing[axis] = s as f64;
    }

    let vox_offset = get_f32(buf, offsets::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed("vox_offset", format!("{vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    let origin = if get_i16(buf, offsets::QFORM_CODE) > 0 {
        let q = offsets::QOFFSET;
        [get_f32(buf, q) as f64, get_f32(buf, q + 4) as f64, get_f32(buf, q + 8) as f64]
    } else if get_i16(buf, offsets::SFORM_CODE) > 0 {
        [
            get_f32(buf, offsets::SROW_X + 12) as f64,
            get_f32(buf, offsets::SROW_Y + 12) as f64,
            get_f32(buf, offsets::SROW_Z + 12) as f64,
        ]
    } else {
        [0.0; 3]
    };

    let grid = Grid::new(dims, spacing, origin)?;
    let n = grid.len();
    let expected = n * dtype.size_bytes();
    let found = buf.len().saturating_sub(vox_offset);
    if found < expected {
        return Err(NiftiError::Truncated { expected, found });
    }
    let raw = &buf[vox_offset..vox_offset + expected];
    let mut data: Vec<f64> = match dtype {
        DataType::U8 => raw.iter().map(|&b| b as f64).collect(),
        DataType::I16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DataType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DataType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };

    let slope = get_f32(buf, offsets::SCL_SLOPE) as f64;
    let inter = get_f32(buf, offsets::SCL_INTER) as f64;
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let dtype = if scaled {
        for v in &mut data {
            *v = *v * slope + inter;
        }
        DataType::F64
    } else {
        dtype
    };
    Ok(Volume3D::new(grid, dtype, data)?)
}

pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = write_nifti_bytes(vol)?;
    fs::write(path, bytes).map_err(|source| NiftiError::Io { path: path.to_path_buf(), source })
}

pub fn write_nifti_bytes(vol: &Volume3D) -> Result<Vec<u8>, NiftiError> {
    let grid = vol.grid();
    for axis in 0..3 {
        if grid.dims[axis] > i16::MAX as usize {
            return Err(NiftiError::DimsOverflow { axis: axis + 1, value: grid.dims[axis] });
        }
    }
    let dtype = vol.dtype();
    let mut buf = vec![0u8; VOX_OFFSET + vol.len() * dtype.size_bytes()];

    put_i32(&mut buf, offsets::SIZEOF_HDR, HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for axis in 0..3 {
        dim[axis + 1] = grid.dims[axis] as i16;
    }
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut buf, offsets::DIM + 2 * i, *d);
    }
    put_i16(&mut buf, offsets::DATATYPE, dtype.code());
    put_i16(&mut buf, offsets::BITPIX, (8 * dtype.size_bytes()) as i16);

    let mut pixdim = [1.0f32; 8];
    for axis in 0..3 {
        pixdim[axis + 1] = grid.spacing[axis] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut buf, offsets::PIXDIM + 4 * i, *p);
    }
    put_f32(&mut buf, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut buf, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut buf, offsets::SCL_INTER, 0.0);
    // mm + seconds
    buf[offsets::XYZT_UNITS] = 2 | 8;
    let descrip = b"deepstrip";
    buf[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);

    put_i16(&mut buf, offsets::QFORM_CODE, 1);
    put_i16(&mut buf, offsets::SFORM_CODE, 1);
    for axis in 0..3 {
        put_f32(&mut buf, offsets::QOFFSET + 4 * axis, grid.origin[axis] as f32);
    }
    for (axis, row) in [offsets::SROW_X, offsets::SROW_Y, offsets::SROW_Z].into_iter().enumerate() {
        put_f32(&mut buf, row + 4 * axis, grid.spacing[axis] as f32);
        put_f32(&mut buf, row + 12, grid.origin[axis] as f32);
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    let out = &mut buf[VOX_OFFSET..];
    match dtype {
        DataType::U8 => {
            for (o, &v) in out.iter_mut().zip(vol.data()) {
                *o = v as u8;
            }
        }
        DataType::I16 => {
            for (o, &v) in out.chunks_exact_mut(2).zip(vol.data()) {
                o.copy_from_slice(&(v as i16).to_le_bytes());
            }
        }
        DataType::F32 => {
            for (o, &v) in out.chunks_exact_mut(4).zip(vol.data()) {
                o.copy_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DataType::F64 => {
            for (o, &v) in out.chunks_exact_mut(8).zip(vol.data()) {
                o.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_2x2x2() -> Volume3D {
        let g = Grid::unit([2, 2, 2]).unwrap();
        Volume3D::new(g, DataType::U8, vec![0., 1., 1., 0., 1., 1., 0., 0.]).unwrap()
    }

    #[test]
    fn uint8_mask_layout_is_360_bytes() {
        let bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        assert_eq!(bytes.len(), 360);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(&bytes[348..352], &[0, 0, 0, 0]);
        assert_eq!(&bytes[352..], &[0, 1, 1, 0, 1, 1, 0, 0]);
        assert_eq!(get_f32(&bytes, offsets::VOX_OFFSET), 352.0);
    }

    #[test]
    fn spacing_survives_round_trip() {
        let g = Grid::new([3, 2, 2], [1.0, 1.0, 3.0], [-4.0, 2.5, 0.0]).unwrap();
        let v = Volume3D::from_fn(g, |x, y, z| (x + y * 3 + z * 6) as f64);
        let back = read_nifti_bytes(&write_nifti_bytes(&v).unwrap()).unwrap();
        assert_eq!(back.spacing(), [1.0, 1.0, 3.0]);
        assert_eq!(back.origin(), [-4.0, 2.5, 0.0]);
        assert_eq!(back, v);
    }

    #[test]
    fn wrong_header_size_is_malformed() {
        let mut bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        put_i32(&mut bytes, 0, 540);
        match read_nifti_bytes(&bytes) {
            Err(NiftiError::MalformedHeader { field, .. }) => assert_eq!(field, "sizeof_hdr"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_malformed() {
        let mut bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        bytes[345] = b'i';
        assert!(matches!(read_nifti_bytes(&bytes), Err(NiftiError::MalformedHeader { field: "magic", .. })));
    }

    #[test]
    fn unsupported_datatype_is_reported() {
        let mut bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        put_i16(&mut bytes, offsets::DATATYPE, 768);
        assert!(matches!(read_nifti_bytes(&bytes), Err(NiftiError::UnsupportedDatatype { code: 768 })));
    }

    #[test]
    fn truncated_data_is_reported() {
        let bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        assert!(matches!(
            read_nifti_bytes(&bytes[..357]),
            Err(NiftiError::Truncated { expected: 8, found: 5 })
        ));
    }

    #[test]
    fn oversized_dims_overflow() {
        let g = Grid::unit([70000, 1, 1]).unwrap();
        let v = Volume3D::filled(g, 0.0);
        assert!(matches!(write_nifti_bytes(&v), Err(NiftiError::DimsOverflow { axis: 1, value: 70000 })));
    }

    #[test]
    fn scale_slope_is_applied() {
        let mut bytes = write_nifti_bytes(&mask_2x2x2()).unwrap();
        put_f32(&mut bytes, offsets::SCL_SLOPE, 2.0);
        put_f32(&mut bytes, offsets::SCL_INTER, -1.0);
        let v = read_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.dtype(), DataType::F64);
        assert_eq!(v.data(), &[-1., 1., 1., -1., 1., 1., -1., -1.]);
    }
}
