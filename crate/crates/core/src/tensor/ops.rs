//! Forward kernels and their analytic backward rules.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn require_rank2<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `C = A·B` for `A: [m×k]`, `B: [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank2("matmul", a, b)?;
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let da = linear(dc, b).expect("shapes checked in forward");
    let db = matmul(&a.transpose(), dc).expect("shapes checked in forward");
    (da, db)
}

/// `Y = X·Wᵀ` for `X: [m×in]`, `W: [out×in]`. Weight matrices are stored
/// as `[out×in]` so that each output unit's weights are one contiguous row.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank2("linear", x, w)?;
    let (m, k) = x.dims2();
    let (n, k2) = w.dims2();
    if k != k2 {
        return Err(mismatch("linear", x.shape(), w.shape()));
    }
    let (xv, wv) = (x.values(), w.values());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let xr = &xv[i * k..(i + 1) * k];
        for j in 0..n {
            let wr = &wv[j * k..(j + 1) * k];
            out[i * n + j] = xr
                .iter()
                .zip(wr)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
    }
    Tensor::new(&[m, n], out)
}

/// Backward of [`linear`]: `dX = dY·W`, `dW = dYᵀ·X`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let dx = matmul(dy, w).expect("shapes checked in forward");
    let (m, k) = x.dims2();
    let (_, n) = dy.dims2();
    let mut dw = vec![T::zero(); n * k];
    let (xv, dyv) = (x.values(), dy.values());
    for i in 0..m {
        let xr = &xv[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dyv[i * n + j];
            if g == T::zero() {
                continue;
            }
            for (d, &xe) in dw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                *d = *d + g * xe;
            }
        }
    }
    (dx, Tensor::new(&[n, k], dw).expect("consistent"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Mul,
    Add,
}

impl Pointwise {
    pub fn arity(self) -> usize {
        match self {
            Pointwise::Sigmoid | Pointwise::Tanh | Pointwise::Relu => 1,
            Pointwise::Mul | Pointwise::Add => 2,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Elementwise kernels. `Add` also accepts a rank-1 second argument whose
/// length equals the column count of the first; it is added to every row.
pub fn pointwise<T: Scalar>(kind: Pointwise, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if args.len() != kind.arity() {
        return Err(Error::InvalidArgument(format!(
            "{kind:?} takes {} argument(s), got {}",
            kind.arity(),
            args.len()
        )));
    }
    let a = args[0];
    match kind {
        Pointwise::Sigmoid => Ok(a.map(sigmoid)),
        Pointwise::Tanh => Ok(a.map(|v| v.tanh())),
        Pointwise::Relu => Ok(a.map(|v| if v > T::zero() { v } else { T::zero() })),
        Pointwise::Mul => {
            let b = args[1];
            if a.shape() != b.shape() {
                return Err(mismatch("mul", a.shape(), b.shape()));
            }
            let data = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(a.shape(), data)
        }
        Pointwise::Add => {
            let b = args[1];
            if a.shape() == b.shape() {
                let data = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| x + y)
                    .collect();
                return Tensor::new(a.shape(), data);
            }
            if b.rank() == 1 && a.rank() == 2 && a.shape()[1] == b.len() {
                let n = b.len();
                let bv = b.values();
                let data = a
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + bv[i % n])
                    .collect();
                return Tensor::new(a.shape(), data);
            }
            Err(mismatch("add", a.shape(), b.shape()))
        }
    }
}

/// Gradients of a pointwise op with respect to each of its arguments, given
/// the forward output and the upstream gradient.
pub fn pointwise_backward<T: Scalar>(
    kind: Pointwise,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    grad: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let zip_map = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        let data = x
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&v, &g)| f(v, g))
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    };
    match kind {
        Pointwise::Sigmoid => vec![zip_map(out, &|s, g| g * s * (T::one() - s))],
        Pointwise::Tanh => vec![zip_map(out, &|t, g| g * (T::one() - t * t))],
        Pointwise::Relu => vec![zip_map(args[0], &|x, g| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })],
        Pointwise::Mul => vec![
            zip_map(args[1], &|b, g| g * b),
            zip_map(args[0], &|a, g| g * a),
        ],
        Pointwise::Add => {
            let b = args[1];
            if b.shape() == grad.shape() {
                vec![grad.clone(), grad.clone()]
            } else {
                let n = b.len();
                let mut db = vec![T::zero(); n];
                for (i, &g) in grad.values().iter().enumerate() {
                    db[i % n] = db[i % n] + g;
                }
                vec![
                    grad.clone(),
                    Tensor::new(b.shape(), db).expect("bias shape"),
                ]
            }
        }
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Row-wise softmax of `logits / temperature`, computed with row-max
/// subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let (m, v) = logits.dims2();
    let inv = T::from_f64(1.0 / temperature);
    let mut out = logits.values().to_vec();
    for r in 0..m {
        let row = &mut out[r * v..(r + 1) * v];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = ((*x - max) * inv).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Per-row negative log-likelihood of `targets` under
/// `softmax(logits / temperature)`, accumulated in f64.
pub fn row_nll<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let (m, v) = logits.dims2();
    if targets.len() != m {
        return Err(mismatch("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let inv = 1.0 / temperature;
    let mut out = Vec::with_capacity(m);
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
        let lse: f64 = row
            .iter()
            .map(|x| ((x.as_f64() - max) * inv).exp())
            .sum::<f64>()
            .ln();
        out.push(lse - (row[t].as_f64() - max) * inv);
    }
    Ok(out)
}

/// Gradient of `scale · Σ_rows nll` with respect to the logits:
/// `scale · (p − onehot) / temperature`.
pub fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    temperature: f64,
    scale: T,
) -> Tensor<T> {
    let mut p = softmax_rows(logits, temperature).expect("checked in forward");
    let (_, v) = logits.dims2();
    let k = scale / T::from_f64(temperature);
    let pv = p.values_mut();
    for (r, &t) in targets.iter().enumerate() {
        pv[r * v + t] = pv[r * v + t] - T::one();
    }
    pv.iter_mut().for_each(|x| *x = *x * k);
    p
}

/// Row lookup: output row `i` is row `ids[i]` of `table`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, e) = table.dims2();
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), e], out)
}

/// Backward of [`gather_rows`]: scatter-add into the looked-up rows only.
pub fn scatter_rows<T: Scalar>(
    table_shape: &[usize],
    ids: &[usize],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut out = Tensor::zeros(table_shape);
    let e = table_shape[1];
    let ov = out.values_mut();
    for (i, &id) in ids.iter().enumerate() {
        for (o, &g) in ov[id * e..(id + 1) * e].iter_mut().zip(grad.row(i)) {
            *o = *o + g;
        }
    }
    out
}
