"""Regenerates the third-party NIfTI fixtures with nibabel."""
import numpy as np
import nibabel as nib

ramp = np.arange(64, dtype=np.float32).reshape((4, 4, 4), order="F")
img = nib.Nifti1Image(ramp, np.diag([1.0, 1.0, 1.0, 1.0]))
img.header.set_data_dtype(np.float32)
nib.save(img, "ramp_f32_4x4x4.nii")

affine = np.diag([1.0, 1.0, 3.0, 1.0])
affine[:3, 3] = [-10.0, 5.0, 2.0]
mask = np.zeros((3, 2, 2), dtype=np.uint8)
mask[1, 1, 0] = 1
mask[2, 0, 1] = 1
img = nib.Nifti1Image(mask, affine)
img.header.set_data_dtype(np.uint8)
nib.save(img, "mask_u8_3x2x2.nii")

scaled = np.arange(8, dtype=np.int16).reshape((2, 2, 2), order="F")
img = nib.Nifti1Image(scaled, np.eye(4))
img.header.set_data_dtype(np.int16)
img.header.set_slope_inter(0.5, 10.0)
nib.save(img, "scaled_i16_2x2x2.nii")
