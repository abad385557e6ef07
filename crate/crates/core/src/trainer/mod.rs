//! Adam with cosine annealing, best-validation checkpoint selection and
//! k-fold ensemble training.

mod checkpoint;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    CheckpointError, ModelCheckpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION,
};

use crate::case::Case;
use crate::network::{total_loss, LossWeights, Network, NetworkConfig, NetworkError};
use crate::sampler::{sample_patches, PatchBatch, PatchSpec, SamplerError};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("cannot split {cases} cases into {folds} folds")]
    Folds { cases: usize, folds: usize },
    #[error("adam: {0}")]
    Optimizer(String),
    #[error("case {case}: {source}")]
    Sampling {
        case: String,
        #[source]
        source: SamplerError,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_min: 0.0,
            epochs: 60,
            batch_size: 2,
            folds: 5,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return fail("need lr0 > 0 and 0 <= lr_min <= lr0");
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.folds == 0 {
            return fail("folds must be >= 1");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    let t = epoch.min(total_epochs) as f64 / total_epochs.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(cfg: AdamConfig, params: &[Arc<Tensor<T>>]) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update `theta -= lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        params: &[Arc<Tensor<T>>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<Vec<Tensor<T>>> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Optimizer(format!(
                "{} moment slots, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(TrainError::Optimizer(format!(
                    "tensor {i}: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&theta, &gi), (mi, vi))| {
                    *mi = b1 * *mi + one_b1 * gi;
                    *vi = b2 * *vi + one_b2 * gi * gi;
                    let m_hat = mi.as_f64() / c1;
                    let v_hat = vi.as_f64() / c2;
                    T::of(theta.as_f64() - lr * m_hat / (v_hat.sqrt() + eps))
                })
                .collect();
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

/// Losses recorded after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
}

/// Index of the first minimum; NaN entries never win.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.map_or(true, |b| l < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

fn sample_set(cases: &[&Case], spec: &PatchSpec, seed: u64, path: &[u64]) -> Result<PatchBatch> {
    let parts = cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut p = path.to_vec();
            p.push(i as u64);
            sample_patches(&c.ct, &c.suv, &c.label, spec, derive_seed(seed, &p)).map_err(|source| {
                TrainError::Sampling {
                    case: c.id.clone(),
                    source,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PatchBatch::concat(&parts).map_err(|source| TrainError::Sampling {
        case: "<batch>".into(),
        source,
    })
}

fn gather(batch: &PatchBatch, order: &[usize]) -> Result<(Tensor<f32>, Arc<Tensor<f32>>)> {
    let x: Vec<_> = order
        .iter()
        .map(|&i| batch.inputs.batch_slice(i..i + 1))
        .collect::<std::result::Result<_, _>>()?;
    let y: Vec<_> = order
        .iter()
        .map(|&i| batch.labels.batch_slice(i..i + 1))
        .collect::<std::result::Result<_, _>>()?;
    Ok((Tensor::stack_batch(&x)?, Arc::new(Tensor::stack_batch(&y)?)))
}

/// Composite loss of `net` on `batch`, averaged over patches.
pub fn evaluate_loss(
    net: &Network<f32>,
    batch: &PatchBatch,
    batch_size: usize,
    w: &LossWeights,
) -> Result<f64> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size) {
        let (x, y) = gather(batch, chunk)?;
        let g = Graph::new();
        let out = net.forward(&g, g.constant(x), false)?;
        let l = total_loss(out.main, &out.deep, &y, w)?;
        total += l.value().item()?.as_f64() * chunk.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Seed stream for validation patches; identical in every epoch.
const VALIDATION_STREAM: u64 = u64::MAX;

/// Trains one model and returns the parameters of the epoch with the lowest
/// validation loss. `fold` only namespaces random streams and progress records.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    train: &[&Case],
    val: &[&Case],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    patch: &PatchSpec,
    fold: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FoldResult> {
    cfg.validate()?;
    net_cfg.validate_patch(patch.size)?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let fold_seed = derive_seed(cfg.seed, &[fold as u64]);
    let mut net = Network::<f32>::build(*net_cfg, fold_seed)?;
    let mut adam = Adam::new(cfg.adam, net.params().values());
    let val_patches = sample_set(val, patch, fold_seed, &[VALIDATION_STREAM])?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        let patches = sample_set(train, patch, fold_seed, &[epoch as u64])?;
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng_for(
            fold_seed,
            &[epoch as u64, VALIDATION_STREAM - 1],
        ));

        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = gather(&patches, chunk)?;
            let g = Graph::new();
            let out = net.forward(&g, g.constant(x), true)?;
            let loss = total_loss(out.main, &out.deep, &y, &cfg.loss)?;
            train_total += loss.value().item()?.as_f64() * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = out
                .params
                .iter()
                .map(|p| p.grad().expect("parameters require gradients"))
                .collect();
            let updated = adam.step(net.params().values(), &grads, lr)?;
            net.set_params(updated)?;
        }
        let val_loss = evaluate_loss(&net, &val_patches, cfg.batch_size, &cfg.loss)?;
        let record = EpochRecord {
            fold,
            epoch,
            lr,
            train_loss: train_total / patches.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
        if best
            .as_ref()
            .map_or(!val_loss.is_nan(), |(_, b, _)| val_loss < *b)
        {
            best = Some((epoch, val_loss, net.clone()));
        }
    }
    // All-NaN validation falls back to the final parameters.
    let (epoch, val_loss, network) = best.unwrap_or((cfg.epochs - 1, f64::NAN, net));
    Ok(FoldResult {
        checkpoint: ModelCheckpoint {
            network,
            epoch: epoch as u32,
            val_loss,
        },
        history,
    })
}

/// Round-robin split: case `i` validates in fold `i % folds`.
pub fn fold_partition(cases: usize, folds: usize) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || folds > cases {
        return Err(TrainError::Folds { cases, folds });
    }
    let mut out = vec![Vec::new(); folds];
    for i in 0..cases {
        out[i % folds].push(i);
    }
    Ok(out)
}

/// Trains `cfg.folds` models; model `k` validates on fold `k` and trains on
/// the remaining cases. With a single fold, the one model validates on the
/// training cases.
pub fn train_ensemble(
    cases: &[Case],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    patch: &PatchSpec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    let folds = fold_partition(cases.len(), cfg.folds)?;
    let mut out = Vec::with_capacity(folds.len());
    for (k, val_idx) in folds.iter().enumerate() {
        let val: Vec<&Case> = val_idx.iter().map(|&i| &cases[i]).collect();
        let train: Vec<&Case> = if folds.len() == 1 {
            cases.iter().collect()
        } else {
            (0..cases.len())
                .filter(|i| !val_idx.contains(i))
                .map(|i| &cases[i])
                .collect()
        };
        out.push(train_fold(&train, &val, net_cfg, cfg, patch, k, on_epoch)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_closed_forms() {
        assert!((cosine_lr(0, 300, 1e-3, 0.0) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(150, 300, 1e-3, 0.0) - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(300, 300, 1e-3, 0.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_monotone_and_symmetric() {
        let t = 37;
        for e in 0..t {
            assert!(cosine_lr(e + 1, t, 1e-3, 1e-5) <= cosine_lr(e, t, 1e-3, 1e-5));
            let s = cosine_lr(e, t, 1e-3, 1e-5) + cosine_lr(t - e, t, 1e-3, 1e-5);
            assert!((s - (1e-3 + 1e-5)).abs() < 1e-15);
        }
    }

    fn scalar(v: f64) -> Vec<Arc<Tensor<f64>>> {
        vec![Arc::new(Tensor::new([1], vec![v]).unwrap())]
    }

    #[test]
    fn adam_first_step() {
        let p = scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let out = adam
            .step(&p, &[Tensor::new([1], vec![1.0]).unwrap()], 1e-3)
            .unwrap();
        let d = out[0].data()[0];
        assert!((d - -0.000999999).abs() < 1e-9);
        assert!((d - -1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar(0.3);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            p = adam
                .step(&p, &[Tensor::zeros([1])], 1e-3)
                .unwrap()
                .into_iter()
                .map(Arc::new)
                .collect();
        }
        assert_eq!(p[0].data()[0], 0.3);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut theta = 1.0f64;
        let mut adam = Adam::new(AdamConfig::default(), &scalar(theta));
        for _ in 0..10 {
            let before = theta * theta;
            let out = adam
                .step(
                    &scalar(theta),
                    &[Tensor::new([1], vec![2.0 * theta]).unwrap()],
                    0.1,
                )
                .unwrap();
            theta = out[0].data()[0];
            assert!(theta * theta < before);
        }
    }

    #[test]
    fn adam_is_odd_at_first_step() {
        let p = scalar(0.5);
        let g = 0.37;
        let up = Adam::new(AdamConfig::default(), &p)
            .step(&p, &[Tensor::new([1], vec![g]).unwrap()], 1e-2)
            .unwrap();
        let down = Adam::new(AdamConfig::default(), &p)
            .step(&p, &[Tensor::new([1], vec![-g]).unwrap()], 1e-2)
            .unwrap();
        let (a, b) = (up[0].data()[0] - 0.5, down[0].data()[0] - 0.5);
        assert!(a < 0.0 && b > 0.0);
        assert!((a + b).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let p = scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(matches!(
            adam.step(&p, &[Tensor::zeros([2])], 1e-3),
            Err(TrainError::Optimizer(_))
        ));
    }

    #[test]
    fn best_epoch_is_first_minimum() {
        assert_eq!(select_best_epoch(&[0.9, 0.4, 0.6]), Some(1));
        assert_eq!(select_best_epoch(&[0.5, 0.4, 0.4]), Some(1));
        assert_eq!(select_best_epoch(&[f64::NAN, 0.7]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn fold_partition_round_robin() {
        let f = fold_partition(10, 5).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.iter().all(|v| v.len() == 2));
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(f[1], vec![1, 6]);
        assert!(matches!(
            fold_partition(3, 5),
            Err(TrainError::Folds { .. })
        ));
        assert!(fold_partition(3, 0).is_err());
    }
}
