//! Class-balanced patch extraction.
//!
//! Patch tensors are laid out `[.., X, Y, Z]` with z fastest, so a
//! `48 x 48 x 32` patch feeds the network as `[B, C, 48, 48, 32]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::tensor::{Tensor, TensorError};
use crate::volume::{Volume, VolumeError};

/// Rejection-sampling budget per negative patch.
pub const NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Grid(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub patches_per_volume: usize,
    /// Positive : negative patch ratio for lesion-bearing volumes.
    pub pos_neg_ratio: (usize, usize),
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: [48, 48, 32],
            patches_per_volume: 12,
            pos_neg_ratio: (3, 1),
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(SamplerError::InvalidSpec(format!(
                "patch size {:?} has a zero extent",
                self.size
            )));
        }
        if self.patches_per_volume == 0 {
            return Err(SamplerError::InvalidSpec(
                "patches_per_volume must be >= 1".into(),
            ));
        }
        if self.pos_neg_ratio == (0, 0) {
            return Err(SamplerError::InvalidSpec(
                "pos_neg_ratio cannot be 0:0".into(),
            ));
        }
        Ok(())
    }

    /// Positive patches drawn from a lesion-bearing volume.
    pub fn positive_count(&self) -> usize {
        let (p, n) = self.pos_neg_ratio;
        (self.patches_per_volume * p + (p + n) / 2) / (p + n)
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }
}

/// 2-channel input patches (`[B, 2, X, Y, Z]`, CT then SUV) with binary
/// labels (`[B, 1, X, Y, Z]`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub inputs: Tensor<f32>,
    pub labels: Tensor<f32>,
    /// Window corner of each patch in the padded volume.
    pub origins: Vec<[usize; 3]>,
    /// Zeros added before the first voxel along each axis.
    pub padding: [usize; 3],
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Foreground voxel count of each label patch.
    pub fn foreground_counts(&self) -> Vec<usize> {
        let per = self.labels.numel() / self.len().max(1);
        self.labels
            .data()
            .chunks(per)
            .map(|c| c.iter().filter(|&&v| v > 0.5).count())
            .collect()
    }

    /// Concatenates batches along the patch axis.
    pub fn concat(parts: &[PatchBatch]) -> Result<PatchBatch> {
        let inputs: Vec<_> = parts.iter().map(|p| p.inputs.clone()).collect();
        let labels: Vec<_> = parts.iter().map(|p| p.labels.clone()).collect();
        Ok(PatchBatch {
            inputs: Tensor::stack_batch(&inputs)?,
            labels: Tensor::stack_batch(&labels)?,
            origins: parts
                .iter()
                .flat_map(|p| p.origins.iter().copied())
                .collect(),
            padding: parts.first().map_or([0; 3], |p| p.padding),
        })
    }
}

/// Zero-pads `v` symmetrically so every axis is at least `size`; returns the
/// padded volume and the leading pad per axis.
pub fn pad_to(v: &Volume, size: [usize; 3]) -> (Volume, [usize; 3]) {
    let dims = v.dims();
    if (0..3).all(|a| dims[a] >= size[a]) {
        return (v.clone(), [0; 3]);
    }
    let out_dims: [usize; 3] = std::array::from_fn(|a| dims[a].max(size[a]));
    let lo: [usize; 3] = std::array::from_fn(|a| (out_dims[a] - dims[a]) / 2);
    let mut data = vec![0f32; out_dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = v.index(0, y, z);
            let dst = lo[0] + out_dims[0] * ((y + lo[1]) + out_dims[1] * (z + lo[2]));
            data[dst..dst + dims[0]].copy_from_slice(&v.data()[src..src + dims[0]]);
        }
    }
    let (sp, dir) = (v.spacing(), v.direction());
    let origin: [f64; 3] = std::array::from_fn(|a| v.origin()[a] - dir[a] * sp[a] * lo[a] as f64);
    let padded =
        Volume::with_direction(out_dims, sp, origin, dir, data).expect("valid padded grid");
    (padded, lo)
}

/// Copies the window at `origin` into z-fastest `[X, Y, Z]` order.
pub fn extract_patch(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Vec<f32> {
    let [px, py, pz] = size;
    let mut out = Vec::with_capacity(px * py * pz);
    for x in 0..px {
        for y in 0..py {
            for z in 0..pz {
                out.push(v.get(origin[0] + x, origin[1] + y, origin[2] + z));
            }
        }
    }
    out
}

/// Stacks a CT and an SUV patch (`[X, Y, Z]`) into one `[2, X, Y, Z]` patch.
pub fn concat_channels(ct: &Tensor<f32>, suv: &Tensor<f32>) -> Result<Tensor<f32>> {
    crate::tensor::check_same_shape("concat_channels", ct.shape(), suv.shape())?;
    let mut shape = vec![2];
    shape.extend_from_slice(ct.shape());
    let mut data = Vec::with_capacity(2 * ct.numel());
    data.extend_from_slice(ct.data());
    data.extend_from_slice(suv.data());
    Ok(Tensor::new(shape, data)?)
}

fn foreground_in_window(label: &Volume, origin: [usize; 3], size: [usize; 3]) -> usize {
    let mut n = 0;
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            let row = label.index(origin[0], y, z);
            n += label.data()[row..row + size[0]]
                .iter()
                .filter(|&&v| v > 0.5)
                .count();
        }
    }
    n
}

/// Samples `spec.patches_per_volume` patches from one preprocessed case.
///
/// Lesion-bearing volumes give exactly `spec.positive_count()` windows
/// containing a foreground voxel (centred on one, clamped to the volume)
/// followed by background-only windows found by rejection sampling. Volumes
/// without foreground give uniformly placed windows.
pub fn sample_patches(
    ct: &Volume,
    suv: &Volume,
    label: &Volume,
    spec: &PatchSpec,
    seed: u64,
) -> Result<PatchBatch> {
    spec.validate()?;
    ct.ensure_same_grid(suv, "sample_patches (ct vs suv)")?;
    ct.ensure_same_grid(label, "sample_patches (ct vs label)")?;
    let size = spec.size;
    let (ct, padding) = pad_to(ct, size);
    let (suv, _) = pad_to(suv, size);
    let (label, _) = pad_to(label, size);
    let dims = label.dims();
    let max_start: [usize; 3] = std::array::from_fn(|a| dims[a] - size[a]);

    let mut rng = rng_for(seed, &[]);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| -> [usize; 3] {
        std::array::from_fn(|a| rng.random_range(0..=max_start[a]))
    };

    let foreground: Vec<usize> = (0..label.len())
        .filter(|&i| label.data()[i] > 0.5)
        .collect();
    let mut origins = Vec::with_capacity(spec.patches_per_volume);
    if foreground.is_empty() {
        for _ in 0..spec.patches_per_volume {
            origins.push(uniform(&mut rng));
        }
    } else {
        let positives = spec.positive_count();
        for _ in 0..positives {
            let i = foreground[rng.random_range(0..foreground.len())];
            let centre = [
                i % dims[0],
                (i / dims[0]) % dims[1],
                i / (dims[0] * dims[1]),
            ];
            origins.push(std::array::from_fn(|a| {
                centre[a].saturating_sub(size[a] / 2).min(max_start[a])
            }));
        }
        for _ in positives..spec.patches_per_volume {
            let mut best: Option<([usize; 3], usize)> = None;
            for _ in 0..NEGATIVE_ATTEMPTS {
                let o = uniform(&mut rng);
                let fg = foreground_in_window(&label, o, size);
                if best.map_or(true, |(_, b)| fg < b) {
                    best = Some((o, fg));
                }
                if fg == 0 {
                    break;
                }
            }
            origins.push(best.expect("at least one attempt").0);
        }
    }

    let b = origins.len();
    let vox = spec.voxels();
    let mut inputs = Vec::with_capacity(b * 2 * vox);
    let mut labels = Vec::with_capacity(b * vox);
    for &o in &origins {
        inputs.extend(extract_patch(&ct, o, size));
        inputs.extend(extract_patch(&suv, o, size));
        labels.extend(extract_patch(&label, o, size).into_iter().map(|v| {
            if v > 0.5 {
                1.0
            } else {
                0.0
            }
        }));
    }
    Ok(PatchBatch {
        inputs: Tensor::new([b, 2, size[0], size[1], size[2]], inputs)?,
        labels: Tensor::new([b, 1, size[0], size[1], size[2]], labels)?,
        origins,
        padding,
    })
}
