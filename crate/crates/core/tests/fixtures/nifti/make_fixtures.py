"""Regenerates the NIfTI reader fixtures and their expected values with nibabel.

Run from this directory: python3 make_fixtures.py
"""
import json

import nibabel as nib
import numpy as np

rng = np.random.default_rng(20240917)
expected = {}


def record(name, path=None):
    img = nib.load(path or name)
    hdr = img.header
    aff = img.affine
    data = np.asarray(img.get_fdata(dtype=np.float64)).reshape(img.shape[:3], order="F")
    origin = aff[:3, 3].tolist()
    if hdr["sform_code"] == 0 and hdr["qform_code"] == 0:
        origin = [0.0, 0.0, 0.0]
    expected[name] = {
        "dims": list(img.shape[:3]),
        "spacing": [float(z) for z in hdr.get_zooms()[:3]],
        "origin": origin,
        "direction": [1.0 if aff[a, a] >= 0 else -1.0 for a in range(3)],
        "data": data.ravel(order="F").tolist(),
    }


def save(img, name, endian=None):
    if endian:
        img.header.set_data_dtype(img.get_data_dtype().newbyteorder(endian))
        img = nib.Nifti1Image(np.asanyarray(img.dataobj), img.affine, img.header.as_byteswapped(endian))
    nib.save(img, name)


# uint8, gzipped, sform only
a = np.diag([1.5, 2.0, 2.5, 1.0])
a[:3, 3] = [-10.0, 20.0, 5.5]
img = nib.Nifti1Image(rng.integers(0, 255, (4, 3, 2), dtype=np.uint8), a)
img.header.set_sform(a, code=1)
img.header.set_qform(None, code=0)
save(img, "u8_sform.nii.gz")
record("u8_sform.nii.gz")

# int16 with slope 2, intercept 1; first voxel raw 3 -> 7
raw = rng.integers(-50, 50, (3, 3, 3), dtype=np.int16)
raw[0, 0, 0] = 3
img = nib.Nifti1Image(raw, np.diag([2.0, 2.0, 3.0, 1.0]))
img.header.set_slope_inter(2.0, 1.0)
img.header.set_data_dtype(np.int16)
nib.save(img, "i16_scaled.nii")
record("i16_scaled.nii")

# int32 big-endian, qform rotated 180 degrees about z (x and y flipped)
a = np.diag([-1.2, -0.8, 3.0, 1.0])
a[:3, 3] = [100.0, 80.0, -40.0]
img = nib.Nifti1Image(rng.integers(-1000, 1000, (3, 4, 2), dtype=np.int32), a)
img.header.set_qform(a, code=1)
img.header.set_sform(None, code=0)
be = nib.Nifti1Image(np.asanyarray(img.dataobj).astype(">i4"), None, img.header.as_byteswapped(">"))
be.header.set_qform(a, code=1)
be.header.set_sform(None, code=0)
nib.save(be, "i32_be_qform.nii")
record("i32_be_qform.nii")

# float32, qform with qfac = -1 (z flipped)
a = np.diag([2.0, 2.0, -3.0, 1.0])
a[:3, 3] = [1.0, 2.0, 300.0]
img = nib.Nifti1Image(rng.normal(size=(2, 3, 4)).astype(np.float32), a)
img.header.set_qform(a, code=2)
img.header.set_sform(None, code=0)
nib.save(img, "f32_qfac.nii.gz")
record("f32_qfac.nii.gz")

# float64, sform with x flipped, 4D with a single frame
a = np.diag([-2.5, 1.0, 1.0, 1.0])
a[:3, 3] = [50.0, -5.0, 0.25]
img = nib.Nifti1Image(rng.normal(scale=100.0, size=(3, 2, 2, 1)), a)
img.header.set_sform(a, code=1)
img.header.set_data_dtype(np.float64)
nib.save(img, "f64_4d_sform.nii")
record("f64_4d_sform.nii")

# no sform or qform: pixdim only, origin 0
img = nib.Nifti1Image(rng.normal(size=(2, 2, 2)).astype(np.float32), np.diag([1.5, 2.5, 3.5, 1.0]))
img.header.set_sform(None, code=0)
img.header.set_qform(None, code=0)
nib.save(img, "f32_pixdim_only.nii")
record("f32_pixdim_only.nii")

# detached header/image pair: the .hdr carries magic "ni1"
pair = nib.Nifti1Pair(np.zeros((2, 2, 2), dtype=np.float32), np.eye(4))
nib.save(pair, "pair.img")
expected["pair.hdr"] = {"error": "format"}

# oblique sform: 30 degree rotation about z
t = np.deg2rad(30.0)
a = np.array([[np.cos(t), -np.sin(t), 0, 0], [np.sin(t), np.cos(t), 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
img = nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float32), a)
img.header.set_sform(a, code=1)
nib.save(img, "oblique.nii")
expected["oblique.nii"] = {"error": "orientation"}

with open("expected.json", "w") as f:
    json.dump(expected, f, indent=1)
