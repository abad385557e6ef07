use super::graph::Var;
use super::{check_same_shape, Real, Result, Tensor, TensorError};

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.graph().record(
            "add",
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.graph().record(
            "mul",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| zip_map(g, &b, |d, y| d * y)),
                    needs[1].then(|| zip_map(g, &a, |d, x| d * x)),
                ]
            }),
        ))
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let out = self.value().map(|x| x * factor);
        self.graph().record(
            "scale",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|d| d * factor))]),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().record(
            "sum",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph().record(
            "leaky_relu",
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(zip_map(g, &x, |d, v| {
                    if v > T::zero() {
                        d
                    } else {
                        d * slope
                    }
                }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(sigmoid_scalar);
        let saved = out.clone();
        self.graph().record(
            "sigmoid",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(zip_map(g, &saved, |d, s| d * s * (T::one() - s)))]),
        )
    }

    /// Concatenates two rank-5 tensors along the channel axis.
    pub fn channel_concat(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let [n, ca, d, h, w] = a.dims5("channel_concat")?;
        let [nb, cb, db, hb, wb] = b.dims5("channel_concat")?;
        for (axis, (x, y)) in [(0, (n, nb)), (2, (d, db)), (3, (h, hb)), (4, (w, wb))] {
            if x != y {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_concat",
                    axis,
                    expected: x,
                    found: y,
                });
            }
        }
        let vol = d * h * w;
        let (sa, sb) = (ca * vol, cb * vol);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::new([n, ca + cb, d, h, w], data)?;
        Ok(self.graph().record(
            "channel_concat",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let split = |first: bool| {
                    let (off, len, c) = if first { (0, sa, ca) } else { (sa, sb, cb) };
                    let mut out = Vec::with_capacity(n * len);
                    for i in 0..n {
                        let base = i * (sa + sb) + off;
                        out.extend_from_slice(&g.data()[base..base + len]);
                    }
                    Tensor::new([n, c, d, h, w], out).expect("split shape")
                };
                vec![
                    needs[0].then(|| split(true)),
                    needs[1].then(|| split(false)),
                ]
            }),
        ))
    }
}
