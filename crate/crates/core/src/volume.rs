//! Physical-space scalar volumes, resampling and intensity windowing.

use rayon::prelude::*;
use thiserror::Error;

/// Working voxel spacing in millimetres along x, y and z.
pub const TARGET_SPACING: [f64; 3] = [2.0, 2.0, 3.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("volume dimensions must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("axis directions must be +1 or -1, got {0:?}")]
    BadDirection([f64; 3]),
    #[error("volume of dims {dims:?} needs {expected} voxels, data has {found}")]
    DataLength {
        dims: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("{op}: voxel grids differ ({detail})")]
    GridMismatch { op: &'static str, detail: String },
    #[error("intensity window needs min < max, got [{0}, {1}]")]
    BadWindow(f64, f64),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// A single-channel 3D grid with physical geometry.
///
/// Voxel `(i, j, k)` is stored at `i + nx * (j + ny * k)` and its centre lies
/// at `origin + direction * spacing * (i, j, k)` (per axis). Directions are
/// axis signs; oblique orientations are not representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    direction: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::with_direction(dims, spacing, origin, [1.0; 3], data)
    }

    pub fn with_direction(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if direction.iter().any(|&d| d != 1.0 && d != -1.0) {
            return Err(VolumeError::BadDirection(direction));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                dims,
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
            data,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        value: f32,
    ) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; n])
    }

    /// A volume on the same grid as `self` holding `data`.
    pub fn like(&self, data: Vec<f32>) -> Result<Self> {
        Self::with_direction(self.dims, self.spacing, self.origin, self.direction, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    /// Continuous voxel index of a physical point.
    pub fn physical_to_index(&self, point: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (point[a] - self.origin[a]) / (self.direction[a] * self.spacing[a]))
    }

    pub fn index_to_physical(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.direction[a] * self.spacing[a] * index[a])
    }

    /// True when both volumes share dims and geometry (to 1e-6 mm).
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && self.direction == other.direction
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.origin[a] - other.origin[a]).abs() < 1e-6
            })
    }

    pub fn ensure_same_grid(&self, other: &Volume, op: &'static str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch {
                op,
                detail: format!(
                    "dims {:?} vs {:?}, spacing {:?} vs {:?}, origin {:?} vs {:?}",
                    self.dims, other.dims, self.spacing, other.spacing, self.origin, other.origin
                ),
            })
        }
    }

    /// Number of voxels above 0.5.
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Trilinear sample at a continuous index, clamped to the volume edges.
    pub fn sample_linear(&self, index: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let c = index[a].clamp(0.0, max);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            frac[a] = c - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    w *= frac[a];
                    idx[a] = hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx[a] = lo[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]) as f64;
            }
        }
        acc
    }

    /// Nearest-neighbour sample at a continuous index, clamped to the edges.
    pub fn sample_nearest(&self, index: [f64; 3]) -> f32 {
        let idx: [usize; 3] = std::array::from_fn(|a| {
            let max = (self.dims[a] - 1) as f64;
            index[a].clamp(0.0, max).round() as usize
        });
        self.get(idx[0], idx[1], idx[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Extent-preserving output dims: `max(1, round(n * s_in / s_out))`.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Resamples onto a grid with `target` spacing covering the same physical
/// box: the outer voxel corners of both grids coincide.
pub fn resample(v: &Volume, target: [f64; 3], mode: Interpolation) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::BadSpacing(target));
    }
    if v.spacing == target {
        return Ok(v.clone());
    }
    let dims = resampled_dims(v.dims, v.spacing, target);
    let origin: [f64; 3] =
        std::array::from_fn(|a| v.origin[a] + v.direction[a] * (target[a] - v.spacing[a]) / 2.0);
    let out = Volume::with_direction(
        dims,
        target,
        origin,
        v.direction,
        vec![0.0; dims.iter().product()],
    )?;
    resample_onto(v, &out, mode)
}

/// Samples `v` at the voxel centres of `reference`'s grid.
pub fn resample_onto(v: &Volume, reference: &Volume, mode: Interpolation) -> Result<Volume> {
    if v.same_grid(reference) {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = reference.dims;
    let mut data = vec![0f32; nx * ny * nz];
    data.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = reference.index_to_physical([i as f64, j as f64, k as f64]);
                    let idx = v.physical_to_index(p);
                    slice[i + nx * j] = match mode {
                        Interpolation::Trilinear => v.sample_linear(idx) as f32,
                        Interpolation::Nearest => v.sample_nearest(idx),
                    };
                }
            }
        });
    reference.like(data)
}

/// Linear intensity window mapped onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityWindow {
    vmin: f64,
    vmax: f64,
}

impl IntensityWindow {
    /// CT window in Hounsfield units.
    pub const CT: IntensityWindow = IntensityWindow {
        vmin: -100.0,
        vmax: 250.0,
    };
    /// SUV window.
    pub const SUV: IntensityWindow = IntensityWindow {
        vmin: 0.0,
        vmax: 15.0,
    };

    pub fn new(vmin: f64, vmax: f64) -> Result<Self> {
        if !(vmin < vmax) || !vmin.is_finite() || !vmax.is_finite() {
            return Err(VolumeError::BadWindow(vmin, vmax));
        }
        Ok(Self { vmin, vmax })
    }

    pub fn vmin(&self) -> f64 {
        self.vmin
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn apply(&self, x: f64) -> f64 {
        ((x - self.vmin) / (self.vmax - self.vmin)).clamp(0.0, 1.0)
    }
}

/// `clamp((x - min) / (max - min), 0, 1)` voxelwise.
pub fn window_normalize(v: &Volume, w: IntensityWindow) -> Volume {
    let data = v.data.iter().map(|&x| w.apply(x as f64) as f32).collect();
    v.like(data).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Volume {
        let mut data = Vec::new();
        for _k in 0..dims[2] {
            for _j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push((origin[0] + spacing[0] * i as f64) as f32);
                }
            }
        }
        Volume::new(dims, spacing, origin, data).unwrap()
    }

    #[test]
    fn rejects_invalid_geometry() {
        assert!(matches!(
            Volume::new([0, 1, 1], [1.0; 3], [0.0; 3], vec![]),
            Err(VolumeError::EmptyDims(_))
        ));
        assert!(matches!(
            Volume::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0]),
            Err(VolumeError::BadSpacing(_))
        ));
        assert!(matches!(
            Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0]),
            Err(VolumeError::DataLength {
                expected: 2,
                found: 1,
                ..
            })
        ));
    }

    #[test]
    fn identity_resample_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..5 * 4 * 3).map(|_| rng.random::<f32>()).collect();
        let v = Volume::new([5, 4, 3], TARGET_SPACING, [3.0, -2.0, 7.5], data).unwrap();
        let r = resample(&v, TARGET_SPACING, Interpolation::Trilinear).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn constant_survives_resampling() {
        let v = Volume::filled([7, 9, 5], [1.3, 0.8, 2.5], [1.0, 2.0, 3.0], 7.0).unwrap();
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample(&v, TARGET_SPACING, mode).unwrap();
            assert!(r.data().iter().all(|&x| x == 7.0));
        }
    }

    #[test]
    fn ramp_is_reproduced_at_output_centres() {
        let v = ramp([8, 8, 8], [1.0; 3], [0.0; 3]);
        let r = resample(&v, TARGET_SPACING, Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), [4, 4, 3]);
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..4 {
                    let x = r.index_to_physical([i as f64, j as f64, k as f64])[0];
                    assert!((r.get(i, j, k) as f64 - x).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dims_round_half_away_from_zero() {
        // 5 * 1 / 2 = 2.5 -> 3, 3 * 1 / 3 = 1, 1 * 1 / 3 -> max(1, 0)
        assert_eq!(
            resampled_dims([5, 3, 1], [1.0; 3], [2.0, 3.0, 3.0]),
            [3, 1, 1]
        );
    }

    #[test]
    fn physical_index_examples() {
        let v = Volume::filled([4, 4, 4], [2.0, 2.0, 3.0], [0.0; 3], 0.0).unwrap();
        assert_eq!(v.physical_to_index([0.0; 3]), [0.0; 3]);
        assert_eq!(v.physical_to_index([4.0, 2.0, 3.0]), [2.0, 1.0, 1.0]);
    }

    #[test]
    fn physical_index_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Volume::with_direction(
            [3, 3, 3],
            [0.7, 1.9, 3.3],
            [-12.5, 40.25, 3.0],
            [1.0, -1.0, 1.0],
            vec![0.0; 27],
        )
        .unwrap();
        for _ in 0..100 {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-500.0..500.0));
            let q = v.index_to_physical(v.physical_to_index(p));
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn window_examples() {
        let ct = IntensityWindow::CT;
        assert_eq!(ct.apply(-100.0), 0.0);
        assert_eq!(ct.apply(250.0), 1.0);
        assert!((ct.apply(75.0) - 0.5).abs() < 1e-15);
        assert_eq!(IntensityWindow::SUV.apply(40.0), 1.0);
        assert!(IntensityWindow::new(1.0, 1.0).is_err());
    }

    #[test]
    fn nearest_mask_stays_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..10 * 10 * 10)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        let v = Volume::new([10, 10, 10], [1.1, 0.9, 1.7], [0.0; 3], data).unwrap();
        let r = resample(&v, TARGET_SPACING, Interpolation::Nearest).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn round_trip_is_not_identity_for_random_data() {
        // Resampling loses information: down then up only recovers constants.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..12 * 12 * 12).map(|_| rng.random::<f32>()).collect();
        let v = Volume::new([12, 12, 12], [1.0; 3], [0.0; 3], data).unwrap();
        let coarse = resample(&v, TARGET_SPACING, Interpolation::Trilinear).unwrap();
        let back = resample(&coarse, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(back.dims(), v.dims());
        let err: f32 = back
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(err > 1.0);

        let c = Volume::filled([12, 12, 12], [1.0; 3], [0.0; 3], 0.25).unwrap();
        let coarse = resample(&c, TARGET_SPACING, Interpolation::Trilinear).unwrap();
        let back = resample(&coarse, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert!(back.data().iter().all(|&x| x == 0.25));
    }

    proptest! {
        #[test]
        fn window_output_bounded_and_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let w = IntensityWindow::CT;
            let (fa, fb) = (w.apply(a), w.apply(b));
            prop_assert!((0.0..=1.0).contains(&fa));
            if a <= b {
                prop_assert!(fa <= fb);
            }
        }
    }
}
