use std::sync::Arc;

use super::graph::Var;
use super::ops::sigmoid_scalar;
use super::{check_same_shape, Real, Result, Tensor, TensorError};

impl<'g, T: Real> Var<'g, T> {
    /// Mean binary cross-entropy between `sigmoid(self)` and `target`,
    /// evaluated from logits as `max(x, 0) - x t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(self, target: &Arc<Tensor<T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        check_same_shape("bce_with_logits", x.shape(), target.shape())?;
        let n = x.numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                reason: "empty input".into(),
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| {
                let (l, t) = (l.as_f64(), t.as_f64());
                l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor::scalar(T::of(total / n as f64));
        let target = target.clone();
        Ok(self.graph().record(
            "bce_with_logits",
            out,
            &[self],
            Box::new(move |g, _| {
                let scale = g.data()[0] / T::of(n as f64);
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&l, &t)| (sigmoid_scalar(l) - t) * scale)
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
            }),
        ))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`, computed
    /// per sample along the leading axis and averaged over the batch.
    pub fn soft_dice_loss(self, target: &Arc<Tensor<T>>, smooth: T) -> Result<Var<'g, T>> {
        let p = self.value();
        check_same_shape("soft_dice_loss", p.shape(), target.shape())?;
        let batch = *p.shape().first().ok_or(TensorError::RankMismatch {
            op: "soft_dice_loss",
            expected: 1,
            found: 0,
        })?;
        if batch == 0 {
            return Err(TensorError::InvalidArgument {
                op: "soft_dice_loss",
                reason: "empty batch".into(),
            });
        }
        let per = p.numel() / batch;
        let s = smooth.as_f64();
        // (intersection, union) per sample
        let stats: Vec<(f64, f64)> = p
            .data()
            .chunks(per)
            .zip(target.data().chunks(per))
            .map(|(pc, gc)| {
                pc.iter().zip(gc).fold((0.0, 0.0), |(i, u), (&pv, &gv)| {
                    let (pv, gv) = (pv.as_f64(), gv.as_f64());
                    (i + pv * gv, u + pv + gv)
                })
            })
            .collect();
        let loss = stats
            .iter()
            .map(|&(i, u)| 1.0 - (2.0 * i + s) / (u + s))
            .sum::<f64>()
            / batch as f64;
        let target = target.clone();
        Ok(self.graph().record(
            "soft_dice_loss",
            Tensor::scalar(T::of(loss)),
            &[self],
            Box::new(move |g, _| {
                let up = g.data()[0].as_f64() / batch as f64;
                let mut data = Vec::with_capacity(p.numel());
                for (b, gc) in target.data().chunks(per).enumerate() {
                    let (i, u) = stats[b];
                    let den = u + s;
                    let num = 2.0 * i + s;
                    for &gv in gc {
                        let d = -(2.0 * gv.as_f64() * den - num) / (den * den);
                        data.push(T::of(d * up));
                    }
                }
                vec![Some(Tensor::new(p.shape().to_vec(), data).expect("shape"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn bce_of_confident_correct_logits_is_near_zero() {
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::zeros([1, 1, 2, 2, 2]));
        let l = g.constant(Tensor::full([1, 1, 2, 2, 2], -40.0));
        let v = l.bce_with_logits(&t).unwrap().value().item().unwrap();
        assert!(v >= 0.0 && v < 1e-15);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::ones([2, 1, 2, 2, 2]));
        let l = g.constant(Tensor::zeros([2, 1, 2, 2, 2]));
        let v = l.bce_with_logits(&t).unwrap().value().item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_stays_finite_for_extreme_logits() {
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let l = g.constant(Tensor::new([2], vec![1000.0, -1000.0]).unwrap());
        let v = l.bce_with_logits(&t).unwrap().value().item().unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn dice_is_per_sample_mean() {
        // sample 0 perfect (loss 0 up to smoothing), sample 1 disjoint (loss ~1)
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let p = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = p.soft_dice_loss(&t, 1e-5).unwrap().value().item().unwrap();
        let s1 = 1.0 - 1e-5 / (2.0 + 1e-5);
        assert!((v - s1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dice_of_empty_prediction_and_target_is_zero() {
        let g = Graph::<f64>::new();
        let t = Arc::new(Tensor::zeros([1, 4]));
        let p = g.constant(Tensor::zeros([1, 4]));
        assert_eq!(
            p.soft_dice_loss(&t, 1e-5).unwrap().value().item().unwrap(),
            0.0
        );
    }
}
