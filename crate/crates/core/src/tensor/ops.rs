//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when any input is tracked,
//! records a backward function that maps the output gradient to per-input
//! gradients. Backward functions capture plain data (never tensor handles),
//! which keeps the graph acyclic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Node, Tensor};

fn make_output<S: Scalar>(
    shape: Vec<usize>,
    data: Vec<S>,
    inputs: Vec<Tensor<S>>,
    backward: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
) -> Tensor<S> {
    if inputs.iter().any(Tensor::is_tracked) {
        Tensor::from_node(
            shape,
            data,
            Node {
                inputs,
                backward: Box::new(backward),
            },
        )
    } else {
        Tensor::leaf(shape, data)
    }
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

// ── Elementwise ──────────────────────────────────────────────────────

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("add", a, b)?;
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&p, &q)| p + q).collect()));
    Ok(make_output(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.to_vec())],
    ))
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("sub", a, b)?;
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&p, &q)| p - q).collect()));
    Ok(make_output(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        |g| {
            vec![
                Some(g.to_vec()),
                Some(g.iter().map(|&v| -v).collect()),
            ]
        },
    ))
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("mul", a, b)?;
    let a_data = a.data();
    let b_data = b.data();
    let data = a_data.iter().zip(&b_data).map(|(&p, &q)| p * q).collect();
    Ok(make_output(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            vec![
                Some(g.iter().zip(&b_data).map(|(&gv, &bv)| gv * bv).collect()),
                Some(g.iter().zip(&a_data).map(|(&gv, &av)| gv * av).collect()),
            ]
        },
    ))
}

pub fn neg<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x.with_data(|d| d.iter().map(|&v| -v).collect());
    make_output(x.shape(), data, vec![x.clone()], |g| {
        vec![Some(g.iter().map(|&v| -v).collect())]
    })
}

/// Multiply by a compile-time constant (not a graph input).
pub fn scale<S: Scalar>(x: &Tensor<S>, c: S) -> Tensor<S> {
    let data = x.with_data(|d| d.iter().map(|&v| v * c).collect());
    make_output(x.shape(), data, vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|&v| v * c).collect())]
    })
}

/// Divide by a one-element tensor (broadcast); differentiable in both.
pub fn div_scalar<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>> {
    if s.numel() != 1 {
        return Err(Error::Rank {
            op: "div_scalar",
            expected: 0,
            shape: s.shape(),
        });
    }
    let sv = s.item();
    let x_data = x.data();
    let data = x_data.iter().map(|&v| v / sv).collect();
    Ok(make_output(
        x.shape(),
        data,
        vec![x.clone(), s.clone()],
        move |g| {
            let dx: Vec<S> = g.iter().map(|&v| v / sv).collect();
            let ds = -g
                .iter()
                .zip(&x_data)
                .map(|(&gv, &xv)| gv * xv)
                .sum::<S>()
                / (sv * sv);
            vec![Some(dx), Some(vec![ds])]
        },
    ))
}

// ── Linear algebra ───────────────────────────────────────────────────

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Matrix product of rank-2 tensors: `[m×k] × [k×n] → [m×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let a_data = a.data();
    let b_data = b.data();
    let data = matmul_raw(&a_data, &b_data, m, k, n);
    Ok(make_output(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let bt = transpose_raw(&b_data, k, n);
            let da = matmul_raw(g, &bt, m, n, k);
            let at = transpose_raw(&a_data, m, k);
            let db = matmul_raw(&at, g, k, m, n);
            vec![Some(da), Some(db)]
        },
    ))
}

/// Transpose of a rank-2 tensor.
pub fn transpose2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "transpose2",
            expected: 2,
            shape: s,
        });
    }
    let (m, n) = (s[0], s[1]);
    let data = x.with_data(|d| transpose_raw(d, m, n));
    Ok(make_output(vec![n, m], data, vec![x.clone()], move |g| {
        vec![Some(transpose_raw(g, n, m))]
    }))
}

/// Add a `[d]` bias along the last axis of `x`.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let bs = bias.shape();
    let d = *xs.last().unwrap_or(&0);
    if bs.len() != 1 || bs[0] != d || d == 0 {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: xs,
            rhs: bs,
        });
    }
    let b_data = bias.data();
    let data = x.with_data(|xd| {
        xd.chunks(d)
            .flat_map(|row| row.iter().zip(&b_data).map(|(&a, &b)| a + b))
            .collect::<Vec<S>>()
    });
    Ok(make_output(
        x.shape(),
        data,
        vec![x.clone(), bias.clone()],
        move |g| {
            let mut db = vec![S::zero(); d];
            for row in g.chunks(d) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.to_vec()), Some(db)]
        },
    ))
}

/// Scale row `t` of `x[r×c]` by `w[t]`.
pub fn scale_rows<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 1 || ws[0] != xs[0] {
        return Err(Error::ShapeMismatch {
            op: "scale_rows",
            lhs: xs,
            rhs: ws,
        });
    }
    let (r, c) = (xs[0], xs[1]);
    let x_data = x.data();
    let w_data = w.data();
    let data = x_data
        .chunks(c)
        .zip(&w_data)
        .flat_map(|(row, &wv)| row.iter().map(move |&v| v * wv))
        .collect();
    Ok(make_output(
        vec![r, c],
        data,
        vec![x.clone(), w.clone()],
        move |g| {
            let dx: Vec<S> = g
                .chunks(c)
                .zip(&w_data)
                .flat_map(|(row, &wv)| row.iter().map(move |&v| v * wv))
                .collect();
            let dw: Vec<S> = g
                .chunks(c)
                .zip(x_data.chunks(c))
                .map(|(grow, xrow)| grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum())
                .collect();
            vec![Some(dx), Some(dw)]
        },
    ))
}

/// Scale column `j` of `x[...×d]` by `s[j]` (broadcast over leading axes).
pub fn scale_cols<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ss = s.shape();
    let d = *xs.last().unwrap_or(&0);
    if ss.len() != 1 || ss[0] != d || d == 0 {
        return Err(Error::ShapeMismatch {
            op: "scale_cols",
            lhs: xs,
            rhs: ss,
        });
    }
    let x_data = x.data();
    let s_data = s.data();
    let data = x_data
        .chunks(d)
        .flat_map(|row| row.iter().zip(&s_data).map(|(&a, &b)| a * b))
        .collect();
    Ok(make_output(
        x.shape(),
        data,
        vec![x.clone(), s.clone()],
        move |g| {
            let dx: Vec<S> = g
                .chunks(d)
                .flat_map(|row| row.iter().zip(&s_data).map(|(&a, &b)| a * b))
                .collect();
            let mut ds = vec![S::zero(); d];
            for (grow, xrow) in g.chunks(d).zip(x_data.chunks(d)) {
                for j in 0..d {
                    ds[j] += grow[j] * xrow[j];
                }
            }
            vec![Some(dx), Some(ds)]
        },
    ))
}

/// Per-row dot product of two `[r×c]` tensors, returning `[r]`.
pub fn rowwise_dot<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("rowwise_dot", a, b)?;
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "rowwise_dot",
            expected: 2,
            shape: s,
        });
    }
    let (r, c) = (s[0], s[1]);
    let a_data = a.data();
    let b_data = b.data();
    let data = a_data
        .chunks(c)
        .zip(b_data.chunks(c))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect();
    Ok(make_output(
        vec![r],
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let mut da = vec![S::zero(); r * c];
            let mut db = vec![S::zero(); r * c];
            for t in 0..r {
                let gv = g[t];
                for j in 0..c {
                    da[t * c + j] = gv * b_data[t * c + j];
                    db[t * c + j] = gv * a_data[t * c + j];
                }
            }
            vec![Some(da), Some(db)]
        },
    ))
}

// ── Reductions ───────────────────────────────────────────────────────

/// Sum of all elements, as a rank-0 tensor.
pub fn sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let total = x.with_data(|d| d.iter().copied().sum());
    let n = x.numel();
    make_output(vec![], vec![total], vec![x.clone()], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

/// Mean of all elements, as a rank-0 tensor.
pub fn mean<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::EmptyAxis { op: "mean" });
    }
    let inv = S::one() / S::from_f64(n as f64);
    let total: S = x.with_data(|d| d.iter().copied().sum());
    Ok(make_output(
        vec![],
        vec![total * inv],
        vec![x.clone()],
        move |g| vec![Some(vec![g[0] * inv; n])],
    ))
}

// ── Shape ────────────────────────────────────────────────────────────

pub fn reshape<S: Scalar>(x: &Tensor<S>, new_shape: Vec<usize>) -> Result<Tensor<S>> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape(),
            rhs: new_shape,
        });
    }
    let old_shape = x.shape();
    let data = x.data();
    let _ = &old_shape;
    Ok(make_output(new_shape, data, vec![x.clone()], |g| {
        vec![Some(g.to_vec())]
    }))
}

/// Stack equal-shape tensors along a new leading axis.
pub fn stack0<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Config("stack0 of an empty list".into()));
    }
    let part_shape = parts[0].shape();
    for p in parts {
        check_same_shape("stack0", &parts[0], p)?;
    }
    let chunk = parts[0].numel();
    let mut data = Vec::with_capacity(chunk * parts.len());
    for p in parts {
        p.with_data(|d| data.extend_from_slice(d));
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&part_shape);
    let n_parts = parts.len();
    Ok(make_output(shape, data, parts.to_vec(), move |g| {
        (0..n_parts)
            .map(|i| Some(g[i * chunk..(i + 1) * chunk].to_vec()))
            .collect()
    }))
}

/// Select index `i` along the leading axis, dropping that axis.
pub fn slice0<S: Scalar>(x: &Tensor<S>, i: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::Rank {
            op: "slice0",
            expected: 1,
            shape: s,
        });
    }
    if i >= s[0] {
        return Err(Error::AxisOutOfRange {
            op: "slice0",
            axis: i,
            shape: s,
        });
    }
    let chunk: usize = s[1..].iter().product();
    let total = x.numel();
    let data = x.with_data(|d| d[i * chunk..(i + 1) * chunk].to_vec());
    Ok(make_output(
        s[1..].to_vec(),
        data,
        vec![x.clone()],
        move |g| {
            let mut dx = vec![S::zero(); total];
            dx[i * chunk..(i + 1) * chunk].copy_from_slice(g);
            vec![Some(dx)]
        },
    ))
}

// ── Nonlinearities ───────────────────────────────────────────────────

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let x_data = x.data();
    let data = x_data
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    make_output(x.shape(), data, vec![x.clone()], move |g| {
        vec![Some(
            g.iter()
                .zip(&x_data)
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                .collect(),
        )]
    })
}

/// Gaussian error linear unit (tanh approximation).
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let x_data = x.data();
    let data = x_data
        .iter()
        .map(|&v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()))
        .collect();
    make_output(x.shape(), data, vec![x.clone()], move |g| {
        let dx = g
            .iter()
            .zip(&x_data)
            .map(|(&gv, &v)| {
                let t = (c * (v + k * v * v * v)).tanh();
                let dt = (S::one() - t * t) * c * (S::one() + three * k * v * v);
                gv * (half * (S::one() + t) + half * v * dt)
            })
            .collect();
        vec![Some(dx)]
    })
}

// ── Normalization and attention primitives ───────────────────────────

/// Softmax along `axis`, numerically stabilized by max subtraction.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op: "softmax",
            axis,
            shape,
        });
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::EmptyAxis { op: "softmax" });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let x_data = x.data();
    let mut out = vec![S::zero(); x_data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = x_data[at(0)];
            for j in 1..n {
                if x_data[at(j)] > max {
                    max = x_data[at(j)];
                }
            }
            let mut total = S::zero();
            for j in 0..n {
                let e = (x_data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    let y = out.clone();
    Ok(make_output(shape, out, vec![x.clone()], move |g| {
        let mut dx = vec![S::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut dot = S::zero();
                for j in 0..n {
                    dot += g[at(j)] * y[at(j)];
                }
                for j in 0..n {
                    dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Layer normalization over the last axis, then affine scale and shift.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let d = *xs.last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    if gamma.shape() != vec![d] || beta.shape() != vec![d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: xs,
            rhs: gamma.shape(),
        });
    }
    let rows = x.numel() / d;
    let x_data = x.data();
    let g_data = gamma.data();
    let b_data = beta.data();
    let inv_d = S::one() / S::from_f64(d as f64);

    let mut xhat = vec![S::zero(); x_data.len()];
    let mut inv_std = vec![S::zero(); rows];
    let mut out = vec![S::zero(); x_data.len()];
    for t in 0..rows {
        let row = &x_data[t * d..(t + 1) * d];
        let mu: S = row.iter().copied().sum::<S>() * inv_d;
        let var: S = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
        let is = S::one() / (var + eps).sqrt();
        inv_std[t] = is;
        for j in 0..d {
            let xh = (row[j] - mu) * is;
            xhat[t * d + j] = xh;
            out[t * d + j] = g_data[j] * xh + b_data[j];
        }
    }

    let gamma_c = g_data.clone();
    Ok(make_output(
        xs,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dx = vec![S::zero(); g.len()];
            let mut dgamma = vec![S::zero(); d];
            let mut dbeta = vec![S::zero(); d];
            for t in 0..rows {
                let grow = &g[t * d..(t + 1) * d];
                let xrow = &xhat[t * d..(t + 1) * d];
                let mut mean_u = S::zero();
                let mut mean_ux = S::zero();
                for j in 0..d {
                    let u = grow[j] * gamma_c[j];
                    mean_u += u;
                    mean_ux += u * xrow[j];
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                }
                mean_u = mean_u * inv_d;
                mean_ux = mean_ux * inv_d;
                for j in 0..d {
                    let u = grow[j] * gamma_c[j];
                    dx[t * d + j] = inv_std[t] * (u - mean_u - xrow[j] * mean_ux);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

// ── Lookup and loss ──────────────────────────────────────────────────

/// Gather rows of an embedding table: `out[t] = table[ids[t]]`.
pub fn embedding<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let ts = table.shape();
    if ts.len() != 2 {
        return Err(Error::Rank {
            op: "embedding",
            expected: 2,
            shape: ts,
        });
    }
    let (v, d) = (ts[0], ts[1]);
    for &id in ids {
        if id >= v {
            return Err(Error::OutOfVocab { token: id, vocab: v });
        }
    }
    let t_len = ids.len();
    let data = table.with_data(|td| {
        let mut out = Vec::with_capacity(t_len * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        out
    });
    let ids_c = ids.to_vec();
    Ok(make_output(
        vec![t_len, d],
        data,
        vec![table.clone()],
        move |g| {
            let mut dt = vec![S::zero(); v * d];
            for (t, &id) in ids_c.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[t * d + j];
                }
            }
            vec![Some(dt)]
        },
    ))
}

/// Mean negative log-likelihood of `targets` under row-wise log-softmax of
/// `logits[T×K]`. Fused for numerical stability.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "cross_entropy",
            expected: 2,
            shape: s,
        });
    }
    let (t_len, k) = (s[0], s[1]);
    if targets.len() != t_len {
        return Err(Error::Data(format!(
            "cross_entropy: {} logit rows vs {} targets",
            t_len,
            targets.len()
        )));
    }
    if t_len == 0 {
        return Err(Error::EmptyAxis { op: "cross_entropy" });
    }
    for &y in targets {
        if y >= k {
            return Err(Error::Data(format!(
                "cross_entropy: target {y} outside {k} classes"
            )));
        }
    }
    let l_data = logits.data();
    let inv_t = S::one() / S::from_f64(t_len as f64);
    let mut probs = vec![S::zero(); l_data.len()];
    let mut loss = S::zero();
    for t in 0..t_len {
        let row = &l_data[t * k..(t + 1) * k];
        let max = row.iter().copied().fold(row[0], S::max);
        let mut total = S::zero();
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[t * k + j] = e;
            total += e;
        }
        for j in 0..k {
            probs[t * k + j] = probs[t * k + j] / total;
        }
        loss -= (row[targets[t]] - max - total.ln()) * inv_t;
    }
    let targets_c = targets.to_vec();
    Ok(make_output(
        vec![],
        vec![loss],
        vec![logits.clone()],
        move |g| {
            let gv = g[0] * inv_t;
            let mut dl = vec![S::zero(); probs.len()];
            for t in 0..t_len {
                for j in 0..k {
                    dl[t * k + j] = probs[t * k + j] * gv;
                }
                dl[t * k + targets_c[t]] -= gv;
            }
            vec![Some(dl)]
        },
    ))
}

// ── Non-differentiable helpers ───────────────────────────────────────

/// Row-wise argmax of a `[T×K]` tensor.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let s = logits.shape();
    assert_eq!(s.len(), 2, "argmax_rows expects rank 2");
    let (t_len, k) = (s[0], s[1]);
    logits.with_data(|d| {
        (0..t_len)
            .map(|t| {
                let row = &d[t * k..(t + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    })
}

/// Squared Frobenius distance `‖a − b‖²` as a differentiable scalar.
pub fn squared_frobenius_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let d = sub(a, b)?;
    let sq = mul(&d, &d)?;
    Ok(sum(&sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    // Central finite differences for a scalar-valued closure over one leaf.
    fn fd_grad(
        leaf: &Tensor<f64>,
        f: impl Fn() -> Tensor<f64>,
        eps: f64,
    ) -> Vec<f64> {
        let n = leaf.numel();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let orig = leaf.data()[i];
            leaf.update_data(|d| d[i] = orig + eps);
            let plus = f().item();
            leaf.update_data(|d| d[i] = orig - eps);
            let minus = f().item();
            leaf.update_data(|d| d[i] = orig);
            out[i] = (plus - minus) / (2.0 * eps);
        }
        out
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
        assert_eq!(actual.len(), expected.len(), "{what}: length");
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            let denom = a.abs().max(e.abs()).max(1e-6);
            assert!(
                (a - e).abs() / denom < tol,
                "{what}[{i}]: {a} vs {e}"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::eye(2);
        let m = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = matmul(&i2, &m).unwrap();
        assert_eq!(p.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let p = t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let m = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let out = matmul(&p, &m).unwrap();
        assert_eq!(out.data(), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(crate::error::Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = t64(
            &[3, 3],
            &(0..9).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .tracked();
        let b = t64(
            &[3, 3],
            &(0..9).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .tracked();
        // weighted sum keeps the loss sensitive to every element
        let w = t64(&[3, 3], &(1..=9).map(|v| v as f64 / 3.0).collect::<Vec<_>>());
        let loss_fn = || sum(&mul(&matmul(&a, &b).unwrap(), &w).unwrap());
        loss_fn().backward().unwrap();
        let fd_a = fd_grad(&a, &loss_fn, 1e-5);
        let fd_b = fd_grad(&b, &loss_fn, 1e-5);
        assert_close(&a.grad().unwrap(), &fd_a, 1e-6, "dA");
        assert_close(&b.grad().unwrap(), &fd_b, 1e-6, "dB");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let x = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t64(&[3], &[1000.0, 0.0, 0.0]);
        let y = softmax(&big, 0).unwrap().data();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1] < 1e-300 && y[2] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = t64(&[2, 3, 4], &data);
        for axis in 0..3 {
            let y = softmax(&x, axis).unwrap();
            let shape = y.shape();
            let n = shape[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let d = y.data();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n).map(|j| d[(o * n + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12, "axis {axis}: sum {s}");
                }
            }
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t64(&[4], &[0.3, -1.2, 2.0, 0.5]);
        let shifted = t64(&[4], &[0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0, 0.5 + 7.0]);
        let a = softmax(&x, 0).unwrap().data();
        let b = softmax(&shifted, 0).unwrap().data();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_zero() {
        let x = t64(&[2, 4], &[3.0; 8]);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t64(&[1, 2], &[1.0, 3.0]);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &gamma, &beta, 1e-12).unwrap().data();
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let rows = 5;
        let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = t64(&[rows, d], &data);
        let y = layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-12)
            .unwrap()
            .data();
        for t in 0..rows {
            let row = &y[t * d..(t + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            assert!(mu.abs() < 1e-9, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::<f64>::zeros(&[3, 0]);
        let g = Tensor::zeros(&[0]);
        assert!(matches!(
            layer_norm(&x, &g, &g, 1e-5),
            Err(crate::error::Error::EmptyAxis { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones_and_norm_gives_2w() {
        let w = t64(&[3], &[0.5, -2.0, 4.0]).tracked();
        sum(&w).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        w.zero_grad();
        let norm2 = sum(&mul(&w, &w).unwrap());
        norm2.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, -4.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[4, 7]);
        let loss = cross_entropy(&logits, &[0, 3, 6, 2]).unwrap();
        assert!((loss.item() - (7.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_perfect_logits_near_zero() {
        let mut data = vec![-30.0; 3 * 5];
        for (t, &y) in [1usize, 4, 0].iter().enumerate() {
            data[t * 5 + y] = 30.0;
        }
        let logits = t64(&[3, 5], &data);
        let loss = cross_entropy(&logits, &[1, 4, 0]).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn cross_entropy_length_mismatch_is_data_error() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 1]),
            Err(crate::error::Error::Data(_))
        ));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = Tensor::<f64>::zeros(&[4, 2]);
        match embedding(&table, &[1, 4]) {
            Err(crate::error::Error::OutOfVocab { token, vocab }) => {
                assert_eq!((token, vocab), (4, 4));
            }
            other => panic!("expected OutOfVocab, got {other:?}"),
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = t64(
            &[4, 3],
            &(0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .tracked();
        let g = t64(&[3], &[1.1, 0.9, 1.05]).tracked();
        let b = t64(&[3], &[0.1, -0.2, 0.0]).tracked();
        let w = t64(
            &[3, 2],
            &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .tracked();
        let loss_fn = || {
            let normed = layer_norm(&x, &g, &b, 1e-5).unwrap();
            let h = gelu(&matmul(&normed, &w).unwrap());
            let sm = softmax(&h, 1).unwrap();
            mean(&mul(&sm, &h).unwrap()).unwrap()
        };
        loss_fn().backward().unwrap();
        for (leaf, name) in [(&x, "x"), (&g, "gamma"), (&b, "beta"), (&w, "w")] {
            let fd = fd_grad(leaf, &loss_fn, 1e-5);
            assert_close(&leaf.grad().unwrap(), &fd, 1e-4, name);
        }
    }

    #[test]
    fn stack_and_slice_roundtrip_gradients() {
        let a = t64(&[2], &[1.0, 2.0]).tracked();
        let b = t64(&[2], &[3.0, 4.0]).tracked();
        let s = stack0(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        let top = slice0(&s, 1).unwrap();
        sum(&top).backward().unwrap();
        assert_eq!(a.grad_or_zeros(), vec![0.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn rowwise_dot_values_and_grads() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).tracked();
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).tracked();
        let d = rowwise_dot(&a, &b).unwrap();
        assert_eq!(d.data(), vec![17.0, 53.0]);
        sum(&d).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_length_rows_flow_through() {
        let x = Tensor::<f64>::zeros(&[0, 3]);
        let w = Tensor::<f64>::ones(&[3, 2]);
        let y = matmul(&x, &w).unwrap();
        assert_eq!(y.shape(), vec![0, 2]);
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let ln = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(ln.shape(), vec![0, 3]);
    }
}
