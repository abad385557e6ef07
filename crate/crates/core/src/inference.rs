//! Sliding-window prediction, ensemble averaging and mapping back to the
//! acquisition grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{preprocess_images, CaseError, Preprocessing};
use crate::network::{Network, NetworkError};
use crate::sampler::{extract_patch, pad_to};
use crate::tensor::{Tensor, TensorError};
use crate::volume::{resample_onto, Interpolation, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid sliding-window spec: {0}")]
    Spec(String),
    #[error("ensemble needs at least one likelihood volume")]
    EmptyEnsemble,
    #[error("model returned shape {found:?}, expected {expected:?}")]
    ModelOutput {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Grid(#[from] VolumeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Preprocess(#[from] CaseError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowSpec {
    pub patch: [usize; 3],
    /// Fraction of the patch shared by neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
}

impl Default for SlidingWindowSpec {
    fn default() -> Self {
        Self {
            patch: [48, 48, 32],
            overlap: 0.5,
        }
    }
}

impl SlidingWindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch.contains(&0) {
            return Err(InferenceError::Spec(format!(
                "patch {:?} has a zero extent",
                self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(InferenceError::Spec(format!(
                "overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        Ok(())
    }

    /// `max(1, floor(patch * (1 - overlap)))` per axis.
    pub fn stride(&self) -> [usize; 3] {
        self.patch
            .map(|p| ((p as f64 * (1.0 - self.overlap)).floor() as usize).max(1))
    }
}

/// Window starts along one axis; the last window is shifted back so it ends
/// at the volume edge. Requires `dim >= patch`.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(dim >= patch && patch > 0 && stride > 0);
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        let start = s.min(dim - patch);
        if out.last() != Some(&start) {
            out.push(start);
        }
        if s + patch >= dim {
            break;
        }
        s += stride;
    }
    out
}

/// Anything that maps `[B, 2, X, Y, Z]` inputs to `[B, 1, X, Y, Z]`
/// probabilities.
pub trait PatchPredictor {
    fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for Network<f32> {
    fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(input)?)
    }
}

/// Averages per-window probabilities over every window that covers a voxel.
/// `ct` and `suv` must already be on the working grid.
pub fn predict_volume<P: PatchPredictor + ?Sized>(
    model: &P,
    ct: &Volume,
    suv: &Volume,
    spec: &SlidingWindowSpec,
) -> Result<Volume> {
    spec.validate()?;
    ct.ensure_same_grid(suv, "predict_volume")?;
    let size = spec.patch;
    let (pct, lo) = pad_to(ct, size);
    let (psuv, _) = pad_to(suv, size);
    let dims = pct.dims();
    let stride = spec.stride();
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], size[a], stride[a]))
        .collect();

    let n: usize = dims.iter().product();
    let mut sum = vec![0f64; n];
    let mut hits = vec![0u32; n];
    let vox: usize = size.iter().product();
    let expected = vec![1, 1, size[0], size[1], size[2]];
    for &x0 in &starts[0] {
        for &y0 in &starts[1] {
            for &z0 in &starts[2] {
                let o = [x0, y0, z0];
                let mut input = extract_patch(&pct, o, size);
                input.extend(extract_patch(&psuv, o, size));
                let input = Tensor::new([1, 2, size[0], size[1], size[2]], input)?;
                let prob = model.predict_patch(&input)?;
                if prob.shape() != expected.as_slice() {
                    return Err(InferenceError::ModelOutput {
                        expected,
                        found: prob.shape().to_vec(),
                    });
                }
                // patch order is z fastest
                let mut k = 0;
                for x in 0..size[0] {
                    for y in 0..size[1] {
                        let row = pct.index(x0 + x, y0 + y, z0);
                        let step = dims[0] * dims[1];
                        for z in 0..size[2] {
                            let i = row + z * step;
                            sum[i] += prob.data()[k] as f64;
                            hits[i] += 1;
                            k += 1;
                        }
                    }
                }
                debug_assert_eq!(k, vox);
            }
        }
    }
    let [nx, ny, nz] = ct.dims();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = pct.index(x + lo[0], y + lo[1], z + lo[2]);
                debug_assert!(hits[i] > 0);
                data.push((sum[i] / hits[i] as f64) as f32);
            }
        }
    }
    Ok(ct.like(data)?)
}

/// Voxelwise mean of likelihood volumes on one grid.
pub fn ensemble_average(likelihoods: &[Volume]) -> Result<Volume> {
    let first = likelihoods.first().ok_or(InferenceError::EmptyEnsemble)?;
    for v in &likelihoods[1..] {
        first.ensure_same_grid(v, "ensemble_average")?;
    }
    let k = likelihoods.len() as f64;
    let data = (0..first.len())
        .map(|i| (likelihoods.iter().map(|v| v.data()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    Ok(first.like(data)?)
}

/// Trilinearly resamples a likelihood onto `reference`'s grid and keeps
/// voxels strictly above `threshold`.
pub fn to_original_mask(likelihood: &Volume, reference: &Volume, threshold: f64) -> Result<Volume> {
    let on_ref = resample_onto(likelihood, reference, Interpolation::Trilinear)?;
    let data = on_ref
        .data()
        .iter()
        .map(|&p| if p as f64 > threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(on_ref.like(data)?)
}

/// Outputs of [`predict_case`].
#[derive(Clone, Debug, PartialEq)]
pub struct CasePrediction {
    /// Ensemble likelihood on the working grid.
    pub likelihood: Volume,
    /// Binary mask on the SUV acquisition grid.
    pub mask: Volume,
}

/// Preprocesses raw CT/SUV, averages the models' sliding-window likelihoods
/// and thresholds the result on the SUV grid.
pub fn predict_case<P: PatchPredictor>(
    id: &str,
    models: &[P],
    ct: &Volume,
    suv: &Volume,
    prep: &Preprocessing,
    spec: &SlidingWindowSpec,
    threshold: f64,
) -> Result<CasePrediction> {
    let (wct, wsuv) = preprocess_images(id, ct, suv, prep)?;
    let members = models
        .iter()
        .map(|m| predict_volume(m, &wct, &wsuv, spec))
        .collect::<Result<Vec<_>>>()?;
    let likelihood = ensemble_average(&members)?;
    let mask = to_original_mask(&likelihood, suv, threshold)?;
    Ok(CasePrediction { likelihood, mask })
}
