use std::path::PathBuf;

use deepstrip_core::volume::{read_nifti, write_nifti, write_nifti_bytes, read_nifti_bytes};
use deepstrip_core::{DataType, Grid, Volume3D};
use nifti::{NiftiObject, RandomAccessNiftiVolume, ReaderOptions};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn reads_third_party_float_ramp() {
    let v = read_nifti(fixture("ramp_f32_4x4x4.nii")).unwrap();
    assert_eq!(v.dims(), [4, 4, 4]);
    assert_eq!(v.dtype(), DataType::F32);
    let expected: Vec<f64> = (0..64).map(|i| i as f64).collect();
    assert_eq!(v.data(), expected.as_slice());
}

#[test]
fn reads_third_party_mask_with_affine() {
    let v = read_nifti(fixture("mask_u8_3x2x2.nii")).unwrap();
    assert_eq!(v.dims(), [3, 2, 2]);
    assert_eq!(v.dtype(), DataType::U8);
    assert_eq!(v.spacing(), [1.0, 1.0, 3.0]);
    assert_eq!(v.origin(), [-10.0, 5.0, 2.0]);
    assert_eq!(v.count_nonzero(), 2);
    assert_eq!(v.get(1, 1, 0), 1.0);
    assert_eq!(v.get(2, 0, 1), 1.0);
}

#[test]
fn applies_third_party_scaling() {
    let v = read_nifti(fixture("scaled_i16_2x2x2.nii")).unwrap();
    let expected: Vec<f64> = (0..8).map(|i| 10.0 + 0.5 * i as f64).collect();
    assert_eq!(v.data(), expected.as_slice());
}

fn sample_volume(dtype: DataType, seed: u64) -> Volume3D {
    let g = Grid::new([5, 3, 4], [0.75, 1.25, 2.5], [-3.0, 0.5, 7.25]).unwrap();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Volume3D::from_fn(g, |_, _, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let r = (state >> 11) as f64 / (1u64 << 53) as f64;
        match dtype {
            DataType::U8 => (r * 255.0).round(),
            DataType::I16 => (r * 65535.0 - 32768.0).round(),
            DataType::F32 => (r * 1000.0 - 500.0) as f32 as f64,
            DataType::F64 => r * 1e6 - 5e5,
        }
    })
    .with_dtype(dtype)
    .unwrap()
}

#[test]
fn round_trip_is_bit_exact_for_every_dtype() {
    let dir = tempfile::tempdir().unwrap();
    for (i, dtype) in [DataType::U8, DataType::I16, DataType::F32, DataType::F64].into_iter().enumerate() {
        let v = sample_volume(dtype, i as u64);
        let path = dir.path().join(format!("v{i}.nii"));
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back, v, "{dtype:?}");
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(write_nifti_bytes(&back).unwrap(), bytes, "{dtype:?}");
    }
}

#[test]
fn written_files_read_by_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    for (i, dtype) in [DataType::U8, DataType::I16, DataType::F32, DataType::F64].into_iter().enumerate() {
        let v = sample_volume(dtype, 100 + i as u64);
        let path = dir.path().join(format!("v{i}.nii"));
        write_nifti(&v, &path).unwrap();
        let obj = ReaderOptions::new().read_file(&path).unwrap();
        let h = obj.header();
        assert_eq!(&h.dim[..4], &[3, 5, 3, 4]);
        assert_eq!(h.datatype, dtype.code());
        assert_eq!(&h.pixdim[1..4], &[0.75f32, 1.25, 2.5]);
        assert_eq!([h.quatern_x, h.quatern_y, h.quatern_z], [-3.0f32, 0.5, 7.25]);
        let vol = obj.volume();
        for z in 0..4u16 {
            for y in 0..3u16 {
                for x in 0..5u16 {
                    let theirs = vol.get_f64(&[x, y, z]).unwrap();
                    assert_eq!(theirs, v.get(x as usize, y as usize, z as usize), "{dtype:?}");
                }
            }
        }
    }
}

#[test]
fn missing_file_names_path() {
    let err = read_nifti("/nonexistent/dir/missing.nii").unwrap_err();
    assert!(err.to_string().contains("missing.nii"));
}

proptest! {
    #[test]
    fn float32_round_trip_within_one_ulp(values in proptest::collection::vec(-1e6f64..1e6, 24)) {
        let g = Grid::unit([2, 3, 4]).unwrap();
        let v = Volume3D::new(g, DataType::F32, values.clone()).unwrap();
        let back = read_nifti_bytes(&write_nifti_bytes(&v).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(&values) {
            let ulp = (*b as f32).abs().max(f32::MIN_POSITIVE) * f32::EPSILON;
            prop_assert!((a - b).abs() <= ulp as f64);
        }
    }
}
