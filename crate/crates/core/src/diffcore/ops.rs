//! Differentiable primitives. Every op validates shapes up front, computes its value with
//! sequential row-major loops and registers a backward closure on the tape.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeated along the left operand's leading axis.
    Leading { reps: usize },
}

fn broadcast_rule(op: &str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == b.len() + 1 && a[1..] == *b {
        return Ok(Broadcast::Leading { reps: a[0] });
    }
    Err(Error::shape(format!(
        "{op}: incompatible shapes {a:?} and {b:?}"
    )))
}

fn reduce_leading(g: &Tensor, reps: usize, inner_shape: &[usize]) -> Tensor {
    let inner: usize = inner_shape.iter().product();
    let mut out = vec![0.0; inner];
    for r in 0..reps {
        for (o, &v) in out.iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
            *o += v;
        }
    }
    Tensor::from_parts(inner_shape.to_vec(), out)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, rule: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = match rule {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Leading { .. } => {
            let inner = b.len();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % inner]))
                .collect()
        }
    };
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Softmax over the last axis of `x / temperature`, stabilised by subtracting row maxima.
pub(crate) fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / temperature).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn check_softmax_input(op: &str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::shape(format!(
            "{op} needs a vector or matrix, got {shape:?}"
        )));
    }
    Ok(())
}

fn matrix_dims(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("{op} needs a matrix, got {shape:?}"))),
    }
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl Fn(&Tensor, &Tensor, &Tensor, Broadcast) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let rule = broadcast_rule(op, a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, rule, f);
        self.tape().push(
            out,
            &[self, other],
            Box::new(move |g, p, _| {
                let (ga, gb) = backward(g, &p[0], &p[1], rule);
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |g, _, b, rule| {
            let gb = match rule {
                Broadcast::Same => g.clone(),
                Broadcast::Leading { reps } => reduce_leading(g, reps, b.shape()),
            };
            (g.clone(), gb)
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |g, _, b, rule| {
            let gb = match rule {
                Broadcast::Same => g.clone(),
                Broadcast::Leading { reps } => reduce_leading(g, reps, b.shape()),
            };
            (g.clone(), gb.map(|v| -v))
        })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |g, a, b, rule| {
            let ga = zip_broadcast(g, b, rule, |gv, bv| gv * bv);
            let gb_full = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(a.data())
                    .map(|(gv, av)| gv * av)
                    .collect(),
            );
            let gb = match rule {
                Broadcast::Same => gb_full,
                Broadcast::Leading { reps } => reduce_leading(&gb_full, reps, b.shape()),
            };
            (ga, gb)
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * factor);
        self.tape().push(
            out,
            &[self],
            Box::new(move |g, _, _| vec![g.map(|v| v * factor)]),
        )
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::tanh);
        self.tape().push(
            out,
            &[self],
            Box::new(|g, _, y| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                vec![Tensor::from_parts(g.shape().to_vec(), d)]
            }),
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape().push(
            out,
            &[self],
            Box::new(|g, p, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Tensor::from_parts(g.shape().to_vec(), d)]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape().push(
            Tensor::scalar(total),
            &[self],
            Box::new(|g, p, _| vec![Tensor::filled(p[0].shape(), g.data()[0])]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over the leading axis.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(Error::shape("sum_rows on a scalar"));
        }
        let inner_shape = v.shape()[1..].to_vec();
        let out = reduce_leading(&v, v.shape()[0], &inner_shape);
        self.tape().push(
            out,
            &[self],
            Box::new(|g, p, _| {
                let reps = p[0].shape()[0];
                let mut d = Vec::with_capacity(p[0].len());
                for _ in 0..reps {
                    d.extend_from_slice(g.data());
                }
                vec![Tensor::from_parts(p[0].shape().to_vec(), d)]
            }),
        )
    }

    /// Mean over the leading axis.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let n = self.value().shape().first().copied().unwrap_or(1) as f64;
        self.sum_rows()?.scale(1.0 / n)
    }

    /// Matrix product of two rank-2 operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix_dims("matmul", a.shape())?;
        let (k2, n) = matrix_dims("matmul", b.shape())?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.tape().push(
            out,
            &[self, other],
            Box::new(move |g, p, _| {
                let ga = matmul_bt_raw(g.data(), p[1].data(), m, n, k);
                let gb = matmul_at_raw(p[0].data(), g.data(), m, k, n);
                vec![
                    Tensor::from_parts(vec![m, k], ga),
                    Tensor::from_parts(vec![k, n], gb),
                ]
            }),
        )
    }

    /// `self . other^T` for rank-2 operands sharing their trailing dimension.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix_dims("matmul_t", a.shape())?;
        let (n, k2) = matrix_dims("matmul_t", b.shape())?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_t: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_bt_raw(a.data(), b.data(), m, k, n));
        self.tape().push(
            out,
            &[self, other],
            Box::new(move |g, p, _| {
                let ga = matmul_raw(g.data(), p[1].data(), m, n, k);
                let gb = matmul_at_raw(g.data(), p[0].data(), m, n, k);
                vec![
                    Tensor::from_parts(vec![m, k], ga),
                    Tensor::from_parts(vec![n, k], gb),
                ]
            }),
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape().push(
            out,
            &[self],
            Box::new(|g, _, _| vec![g.transpose().expect("rank checked in forward")]),
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.value();
        let original = v.shape().to_vec();
        let out = (*v).clone().reshape(shape)?;
        self.tape().push(
            out,
            &[self],
            Box::new(move |g, _, _| {
                vec![g.clone().reshape(original.clone()).expect("same element count")]
            }),
        )
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 1 || a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "dot: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let s = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        self.tape().push(
            Tensor::scalar(s),
            &[self, other],
            Box::new(|g, p, _| {
                let gv = g.data()[0];
                vec![p[1].map(|v| v * gv), p[0].map(|v| v * gv)]
            }),
        )
    }

    /// Element `index` of a vector, as a scalar.
    pub fn index(self, index: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 1 {
            return Err(Error::shape(format!(
                "index needs a vector, got {:?}",
                v.shape()
            )));
        }
        if index >= v.len() {
            return Err(Error::Index {
                index,
                size: v.len(),
            });
        }
        self.tape().push(
            Tensor::scalar(v.data()[index]),
            &[self],
            Box::new(move |g, p, _| {
                let mut d = Tensor::zeros(p[0].shape());
                d.data_mut()[index] = g.data()[0];
                vec![d]
            }),
        )
    }

    /// Rows of `self` (a `vocab x d` table) selected by `ids`, giving `ids.len() x d`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let (vocab, d) = matrix_dims("embedding", table.shape())?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(table.row(id));
        }
        let ids = ids.to_vec();
        self.tape().push(
            Tensor::from_parts(vec![ids.len(), d], out),
            &[self],
            Box::new(move |g, _, _| {
                let mut dt = Tensor::zeros(&[vocab, d]);
                let buf = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in buf[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                    {
                        *o += v;
                    }
                }
                vec![dt]
            }),
        )
    }

    /// Temperature softmax over the last axis (row-wise for matrices).
    pub fn softmax_t(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value();
        check_softmax_input("softmax_t", x.shape())?;
        let out = softmax_rows(&x, temperature);
        self.tape().push(
            out,
            &[self],
            Box::new(move |g, _, y| {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - inner) / temperature;
                    }
                }
                vec![Tensor::from_parts(y.shape().to_vec(), d)]
            }),
        )
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.softmax_t(1.0)
    }

    /// Log of the softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        check_softmax_input("log_softmax", x.shape())?;
        let out = log_softmax_rows(&x);
        self.tape().push(
            out,
            &[self],
            Box::new(|g, _, y| {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                vec![Tensor::from_parts(y.shape().to_vec(), d)]
            }),
        )
    }
}

/// Concatenate along `axis`. All operands must agree on every other dimension.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero operands"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape(format!(
            "concat axis {axis} out of range for shape {base:?}"
        )));
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(format!(
                "concat: incompatible shapes {base:?} and {s:?} along axis {axis}"
            )));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total_width: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total_width);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = widths.iter().sum::<usize>() / inner;
    let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    first.tape().push(
        Tensor::from_parts(shape, out),
        parts,
        Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
            for o in 0..outer {
                let mut offset = o * total_width;
                for (buf, &w) in grads.iter_mut().zip(&widths) {
                    buf.extend_from_slice(&g.data()[offset..offset + w]);
                    offset += w;
                }
            }
            grads
                .into_iter()
                .zip(&part_shapes)
                .map(|(d, s)| Tensor::from_parts(s.clone(), d))
                .collect()
        }),
    )
}

/// Stack equal-shaped operands along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("stack of zero operands"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let inner_shape = values[0].shape().to_vec();
    let mut out = Vec::with_capacity(values.len() * values[0].len());
    for v in &values {
        if v.shape() != inner_shape.as_slice() {
            return Err(Error::shape(format!(
                "stack: incompatible shapes {inner_shape:?} and {:?}",
                v.shape()
            )));
        }
        out.extend_from_slice(v.data());
    }
    let mut shape = vec![values.len()];
    shape.extend_from_slice(&inner_shape);
    let inner = values[0].len();
    first.tape().push(
        Tensor::from_parts(shape, out),
        parts,
        Box::new(move |g, _, _| {
            g.data()
                .chunks(inner)
                .map(|c| Tensor::from_parts(inner_shape.clone(), c.to_vec()))
                .collect()
        }),
    )
}
