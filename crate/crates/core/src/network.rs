//! Residual U-Net with deep supervision and the Dice + cross-entropy loss.
//!
//! Encoder level `l` has `min(base * 2^l, max_channels)` channels. Level 0
//! keeps full resolution, every later level halves it with a stride-2
//! convolution, and the last level is the bottleneck. Each decoder level
//! projects the coarser features with a 1x1x1 convolution, upsamples them
//! trilinearly, concatenates the encoder skip and applies a residual block.
//! Deep-supervision head `k` reads the level-`k` decoder features (the
//! bottleneck for the coarsest level) and is upsampled `k` times.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Conv3dParams, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not fit the network: {reason}")]
    InputShape { found: Vec<usize>, reason: String },
    #[error("loss target must be binary, found {0}")]
    NonBinaryTarget(f64),
    #[error("no parameter named {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub ds_heads: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            max_channels: 128,
            ds_heads: 2,
            in_channels: 2,
            out_channels: 1,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    /// Spatial extents must be divisible by this factor.
    pub fn downsampling(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.levels < 2 {
            return fail(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.levels > 8 {
            return fail(format!("levels must be <= 8, got {}", self.levels));
        }
        if self.ds_heads >= self.levels {
            return fail(format!(
                "ds_heads ({}) must be below levels ({})",
                self.ds_heads, self.levels
            ));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return fail(format!(
                "need 1 <= base_channels <= max_channels, got {} and {}",
                self.base_channels, self.max_channels
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.out_channels != 1 {
            return fail(format!(
                "only a single sigmoid output channel is supported, got {}",
                self.out_channels
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.norm_eps > 0.0) {
            return fail("leaky_slope must be >= 0 and norm_eps > 0".into());
        }
        Ok(())
    }

    /// Checks that a patch of this size survives every downsampling step.
    pub fn validate_patch(&self, size: [usize; 3]) -> Result<()> {
        self.validate()?;
        let f = self.downsampling();
        if size.iter().any(|&s| s % f != 0) {
            return Err(NetworkError::Config(format!(
                "patch {size:?} is not divisible by 2^(levels-1) = {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_dice: f64,
    pub w_ce: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dice: 1.0,
            w_ce: 0.5,
            dice_smooth: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    kernel: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    skip: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
struct UpLevel {
    project: Conv,
    block: ResBlock,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<ResBlock>,
    /// Indexed by target level `0..levels-1`.
    decoder: Vec<UpLevel>,
    head: Conv,
    deep_heads: Vec<Conv>,
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arc<Tensor<T>>] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &*self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

struct Builder<'r, T> {
    store: ParamStore<T>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.store.names.push(name);
        self.store.values.push(Arc::new(t));
        self.store.values.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        let fan_in = cin * kernel.pow(3);
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::randn([cout, cin, kernel, kernel, kernel], std, self.rng);
        Conv {
            weight: self.push(format!("{name}.weight"), w),
            bias: self.push(format!("{name}.bias"), Tensor::zeros([cout])),
            kernel,
            stride,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), Tensor::ones([c])),
            beta: self.push(format!("{name}.beta"), Tensor::zeros([c])),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, stride);
        let norm1 = self.norm(&format!("{name}.norm1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let skip = (cin != cout || stride != 1)
            .then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, stride));
        ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            skip,
        }
    }
}

/// Outputs of one forward pass.
pub struct ForwardOutput<'g, T> {
    /// Full-resolution logits `[B, 1, X, Y, Z]`.
    pub main: Var<'g, T>,
    /// Deep-supervision logits upsampled to full resolution, finest first.
    pub deep: Vec<Var<'g, T>>,
    /// Graph handles of the parameters, in [`ParamStore`] order.
    pub params: Vec<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Real> Network<T> {
    /// Builds a network with He-normal convolution weights, zero biases and
    /// unit/zero normalization affines.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore {
                names: Vec::new(),
                values: Vec::new(),
            },
            rng: &mut rng,
        };
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            let c = config.channels(l);
            encoder.push(b.block(&format!("enc{l}"), cin, c, if l == 0 { 1 } else { 2 }));
            cin = c;
        }
        let mut decoder = Vec::new();
        for l in 0..config.levels - 1 {
            let (c, coarse) = (config.channels(l), config.channels(l + 1));
            let project = b.conv(&format!("dec{l}.project"), coarse, c, 1, 1);
            let block = b.block(&format!("dec{l}"), 2 * c, c, 1);
            decoder.push(UpLevel { project, block });
        }
        let head = b.conv("head", config.channels(0), config.out_channels, 1, 1);
        let deep_heads = (1..=config.ds_heads)
            .map(|k| {
                b.conv(
                    &format!("deep{k}"),
                    config.channels(k),
                    config.out_channels,
                    1,
                    1,
                )
            })
            .collect();
        let params = b.store;
        Ok(Self {
            config,
            layout: Layout {
                encoder,
                decoder,
                head,
                deep_heads,
            },
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Replaces a parameter tensor; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .params
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| NetworkError::UnknownParam(name.to_string()))?;
        crate::tensor::check_same_shape("set_param", self.params.values[i].shape(), value.shape())?;
        self.params.values[i] = Arc::new(value);
        Ok(())
    }

    /// Replaces all parameters at once (same order and shapes).
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NetworkError::Config(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (old, new) in self.params.values.iter().zip(&values) {
            crate::tensor::check_same_shape("set_params", old.shape(), new.shape())?;
        }
        self.params.values = values.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Same architecture with parameters cast to another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config,
            layout: self.layout.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                values: self
                    .params
                    .values
                    .iter()
                    .map(|v| Arc::new(v.cast()))
                    .collect(),
            },
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let bad = |reason: String| {
            Err(NetworkError::InputShape {
                found: shape.to_vec(),
                reason,
            })
        };
        let [_, c, x, y, z] = match shape {
            &[b, c, x, y, z] if b > 0 => [b, c, x, y, z],
            _ => return bad("expected [B >= 1, C, X, Y, Z]".into()),
        };
        if c != self.config.in_channels {
            return bad(format!(
                "expected {} input channels",
                self.config.in_channels
            ));
        }
        let f = self.config.downsampling();
        if [x, y, z].iter().any(|&s| s == 0 || s % f != 0) {
            return bad(format!("spatial extents must be positive multiples of {f}"));
        }
        Ok(())
    }

    /// Runs the network on `input`. With `trainable` set, parameters enter the
    /// graph as gradient-requiring leaves; otherwise as constants, so no
    /// backward state is retained.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        input: Var<'g, T>,
        trainable: bool,
    ) -> Result<ForwardOutput<'g, T>> {
        self.check_input(&input.shape())?;
        let p: Vec<Var<'g, T>> = self
            .params
            .values
            .iter()
            .map(|v| g.leaf(v.clone(), trainable))
            .collect();
        let slope = T::of(self.config.leaky_slope);
        let eps = T::of(self.config.norm_eps);
        let cx = Ctx { p: &p, slope, eps };

        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = input;
        for block in &self.layout.encoder {
            h = cx.block(block, h)?;
            skips.push(h);
        }
        // features[l] holds the decoder output at level l
        let mut features = vec![None; self.config.levels];
        features[self.config.levels - 1] = Some(h);
        for l in (0..self.config.levels - 1).rev() {
            let up = &self.layout.decoder[l];
            let coarse = cx.conv(&up.project, h)?.upsample2x()?;
            h = cx.block(&up.block, coarse.channel_concat(skips[l])?)?;
            features[l] = Some(h);
        }
        let main = cx.conv(&self.layout.head, h)?;
        let mut deep = Vec::with_capacity(self.layout.deep_heads.len());
        for (k, head) in self.layout.deep_heads.iter().enumerate() {
            let level = k + 1;
            let mut out = cx.conv(head, features[level].expect("decoder level"))?;
            for _ in 0..level {
                out = out.upsample2x()?;
            }
            deep.push(out);
        }
        Ok(ForwardOutput {
            main,
            deep,
            params: p,
        })
    }

    /// Sigmoid probabilities of the main head for a constant input batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let out = self.forward(&g, g.constant(input.clone()), false)?;
        Ok(out.main.sigmoid().value().as_ref().clone())
    }
}

struct Ctx<'a, 'g, T> {
    p: &'a [Var<'g, T>],
    slope: T,
    eps: T,
}

impl<'g, T: Real> Ctx<'_, 'g, T> {
    fn conv(&self, c: &Conv, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let pad = c.kernel / 2;
        let params = Conv3dParams::new([c.stride; 3], [pad; 3]);
        Ok(x.conv3d(self.p[c.weight], Some(self.p[c.bias]), params)?)
    }

    fn norm(&self, n: &Norm, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.instance_norm(self.p[n.gamma], self.p[n.beta], self.eps)?)
    }

    /// `lrelu(norm2(conv2(lrelu(norm1(conv1(x)))))) + skip(x)`.
    fn block(&self, b: &ResBlock, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self
            .norm(&b.norm1, self.conv(&b.conv1, x)?)?
            .leaky_relu(self.slope);
        let y = self
            .norm(&b.norm2, self.conv(&b.conv2, h)?)?
            .leaky_relu(self.slope);
        let skip = match &b.skip {
            Some(s) => self.conv(s, x)?,
            None => x,
        };
        Ok(y.add(skip)?)
    }
}

/// `w_dice * DiceLoss(sigmoid(logits), target) + w_ce * BCE(logits, target)`.
pub fn head_loss<'g, T: Real>(
    logits: Var<'g, T>,
    target: &Arc<Tensor<T>>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    let dice = logits
        .sigmoid()
        .soft_dice_loss(target, T::of(w.dice_smooth))?;
    let bce = logits.bce_with_logits(target)?;
    Ok(dice.scale(T::of(w.w_dice)).add(bce.scale(T::of(w.w_ce)))?)
}

/// Unweighted mean of [`head_loss`] over the main and deep-supervision heads.
pub fn total_loss<'g, T: Real>(
    main: Var<'g, T>,
    deep: &[Var<'g, T>],
    target: &Arc<Tensor<T>>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    if let Some(&bad) = target
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(NetworkError::NonBinaryTarget(bad.as_f64()));
    }
    let mut total = head_loss(main, target, w)?;
    for &d in deep {
        total = total.add(head_loss(d, target, w)?)?;
    }
    Ok(total.scale(T::of(1.0 / (1 + deep.len()) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            levels: 3,
            base_channels: 2,
            ..NetworkConfig::default()
        }
    }

    fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k * k + cout
    }

    fn block_count(cin: usize, cout: usize, stride: usize) -> usize {
        let skip = if cin != cout || stride != 1 {
            conv_count(cin, cout, 1)
        } else {
            0
        };
        conv_count(cin, cout, 3) + 2 * cout + conv_count(cout, cout, 3) + 2 * cout + skip
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [small(), NetworkConfig::default()] {
            let net = Network::<f32>::build(cfg, 0).unwrap();
            let c = |l| cfg.channels(l);
            let mut want = 0;
            let mut cin = cfg.in_channels;
            for l in 0..cfg.levels {
                want += block_count(cin, c(l), if l == 0 { 1 } else { 2 });
                cin = c(l);
            }
            for l in 0..cfg.levels - 1 {
                want += conv_count(c(l + 1), c(l), 1) + block_count(2 * c(l), c(l), 1);
            }
            want += conv_count(c(0), 1, 1);
            for k in 1..=cfg.ds_heads {
                want += conv_count(c(k), 1, 1);
            }
            assert_eq!(net.param_count(), want);
        }
        // levels 4 / base 16: 16, 32, 64, 128 channels
        assert_eq!(NetworkConfig::default().channels(3), 128);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut NetworkConfig)| {
            let mut c = NetworkConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.levels = 1));
        assert!(bad(|c| c.ds_heads = 4));
        assert!(bad(|c| c.out_channels = 2));
        let c = NetworkConfig::default();
        assert!(c.validate_patch([48, 48, 32]).is_ok());
        assert!(c.validate_patch([48, 48, 36]).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f32>::build(small(), 9).unwrap();
        let b = Network::<f32>::build(small(), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Network::<f32>::build(small(), 10).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn initialization_scales() {
        let net = Network::<f64>::build(NetworkConfig::default(), 1).unwrap();
        let w = net.params().get("enc1.conv2.weight").unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
        let want = 2.0 / (32.0 * 27.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(net
            .params()
            .get("enc1.conv2.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(net
            .params()
            .get("enc1.norm1.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn output_shapes() {
        let net = Network::<f64>::build(small(), 0).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 2, 8, 8, 4]));
        let out = net.forward(&g, x, false).unwrap();
        assert_eq!(out.main.shape(), vec![2, 1, 8, 8, 4]);
        assert_eq!(out.deep.len(), 2);
        for d in &out.deep {
            assert_eq!(d.shape(), vec![2, 1, 8, 8, 4]);
        }
        let err = net.forward(&g, g.constant(Tensor::zeros([1, 2, 8, 8, 6])), false);
        assert!(matches!(err, Err(NetworkError::InputShape { .. })));
    }

    #[test]
    fn zero_heads_emit_their_bias() {
        let mut net = Network::<f64>::build(small(), 3).unwrap();
        let heads = ["head", "deep1", "deep2"];
        for (k, h) in heads.iter().enumerate() {
            let w = net
                .params()
                .get(&format!("{h}.weight"))
                .unwrap()
                .shape()
                .to_vec();
            net.set_param(&format!("{h}.weight"), Tensor::zeros(w))
                .unwrap();
            net.set_param(
                &format!("{h}.bias"),
                Tensor::full([1], 0.25 * (k as f64 + 1.0)),
            )
            .unwrap();
        }
        let g = Graph::new();
        let out = net
            .forward(&g, g.constant(Tensor::zeros([1, 2, 8, 8, 4])), false)
            .unwrap();
        assert!(out.main.value().data().iter().all(|&v| v == 0.25));
        for (k, d) in out.deep.iter().enumerate() {
            let want = 0.25 * (k as f64 + 2.0);
            assert!(d.value().data().iter().all(|&v| (v - want).abs() < 1e-15));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::<f32>::build(small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn([1, 2, 8, 8, 8], |_| rng.random());
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn zeroed_second_conv_reduces_block_to_skip() {
        let mut net = Network::<f64>::build(small(), 4).unwrap();
        let shape = net
            .params()
            .get("enc1.conv2.weight")
            .unwrap()
            .shape()
            .to_vec();
        net.set_param("enc1.conv2.weight", Tensor::zeros(shape))
            .unwrap();
        let block = net.layout.encoder[1];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([1, 2, 4, 4, 4], 1.0, &mut rng);
        let g = Graph::new();
        let p: Vec<_> = net
            .params
            .values
            .iter()
            .map(|v| g.constant(v.clone()))
            .collect();
        let cx = Ctx {
            p: &p,
            slope: 0.01,
            eps: 1e-5,
        };
        let xv = g.constant(x);
        let out = cx.block(&block, xv).unwrap().value();
        let skip = cx.conv(&block.skip.unwrap(), xv).unwrap().value();
        assert_eq!(out.shape(), &[1, 4, 2, 2, 2]);
        for (a, b) in out.data().iter().zip(skip.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let w = LossWeights::default();
        let g = Graph::<f64>::new();
        let shape = [2, 1, 4, 4, 4];
        let zeros = Arc::new(Tensor::zeros(shape));
        let neg = g.constant(Tensor::full(shape, -40.0));
        let l = total_loss(neg, &[neg, neg], &zeros, &w)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!(l.abs() < 1e-9);

        let ones = Arc::new(Tensor::ones(shape));
        let zero = g.constant(Tensor::zeros(shape));
        let l = total_loss(zero, &[zero, zero], &ones, &w)
            .unwrap()
            .value()
            .item()
            .unwrap();
        let v = 64.0;
        let dice = 1.0 - (2.0 * 0.5 * v + 1e-5) / (0.5 * v + v + 1e-5);
        let want = dice + 0.5 * std::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.6799).abs() < 1e-4);
    }

    #[test]
    fn non_binary_target_rejected() {
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::full([1, 1, 2, 2, 2], 0.5));
        let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
        assert!(matches!(
            total_loss(x, &[], &t, &LossWeights::default()),
            Err(NetworkError::NonBinaryTarget(_))
        ));
    }

    #[test]
    fn loss_is_batch_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [3, 1, 2, 2, 2];
        let logits = Tensor::<f64>::randn(shape, 2.0, &mut rng);
        let target = Tensor::<f64>::from_fn(shape, |_| rng.random_range(0..2) as f64);
        let swap = |t: &Tensor<f64>| {
            let parts: Vec<_> = [2, 0, 1]
                .iter()
                .map(|&i| t.batch_slice(i..i + 1).unwrap())
                .collect();
            Tensor::stack_batch(&parts).unwrap()
        };
        let eval = |l: Tensor<f64>, t: Tensor<f64>| {
            let g = Graph::new();
            let x = g.constant(l);
            total_loss(x, &[x], &Arc::new(t), &LossWeights::default())
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        let a = eval(logits.clone(), target.clone());
        let b = eval(swap(&logits), swap(&target));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_prediction_without_ce() {
        let w = LossWeights {
            w_ce: 0.0,
            ..LossWeights::default()
        };
        let t = Tensor::<f64>::from_fn([1, 1, 4, 4, 2], |i| (i % 3 == 0) as u8 as f64);
        let logits = t.map(|v| if v == 1.0 { 40.0 } else { -40.0 });
        let g = Graph::new();
        let x = g.constant(logits);
        let l = total_loss(x, &[x, x], &Arc::new(t), &w)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!(l < 1e-3);
    }
}
