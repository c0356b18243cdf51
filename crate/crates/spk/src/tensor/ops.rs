//! Differentiable operations.
//!
//! Each op computes its value eagerly and registers a closure producing one
//! gradient per parent. Ops that can fail on caller input return `Result`;
//! ops that only see framework-shaped data return `Tensor` directly.

use super::Tensor;
use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

fn as2(t: &Tensor, op: &'static str) -> Result<Array2<f64>> {
    t.with_value(|v| {
        v.clone()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(op, format!("expected 2-d tensor, got {:?}", v.shape())))
    })
}

fn as4(t: &Tensor, op: &'static str) -> Result<Array4<f64>> {
    t.with_value(|v| {
        v.clone()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::shape(op, format!("expected 4-d tensor, got {:?}", v.shape())))
    })
}

fn as1(t: &Tensor, op: &'static str) -> Result<Array1<f64>> {
    t.with_value(|v| {
        v.clone()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::shape(op, format!("expected 1-d tensor, got {:?}", v.shape())))
    })
}

fn matmul_raw(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", av.shape(), bv.shape()),
        ));
    }
    let out = &av + &bv;
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

/// Row-broadcast bias add: `(N, D) + (D,)`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xv = as2(x, "add_bias")?;
    let bv = as1(bias, "add_bias")?;
    if xv.ncols() != bv.len() {
        return Err(Error::shape(
            "add_bias",
            format!("{} columns vs bias of {}", xv.ncols(), bv.len()),
        ));
    }
    let out = (&xv + &bv).into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![x.clone(), bias.clone()],
        Box::new(|g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let db = g2.sum_axis(Axis(0)).into_dyn();
            vec![Some(g.clone()), Some(db)]
        }),
    ))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let out = x.value() * c;
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| vec![Some(g * c)]),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let v = x.value();
    let mask = v.mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
    let out = v.mapv(|e| e.max(0.0));
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| vec![Some(g * &mask)]),
    )
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let v = x.value();
    let shape = v.raw_dim();
    let out = ArrayD::from_elem(IxDyn(&[]), v.sum());
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        }),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.len() as f64;
    scale(&sum_all(x), 1.0 / n)
}

/// `a @ b` for `(N, K) x (K, M)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let av = as2(a, "matmul")?;
    let bv = as2(b, "matmul")?;
    if av.ncols() != bv.nrows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", av.shape(), bv.shape()),
        ));
    }
    let out = matmul_raw(&av, &bv).into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let da = matmul_raw(&g2, &bv.t().to_owned());
            let db = matmul_raw(&av.t().to_owned(), &g2);
            vec![Some(da.into_dyn()), Some(db.into_dyn())]
        }),
    ))
}

/// `a @ b.T` for `(N, K) x (M, K)`; the workhorse behind linear layers and
/// similarity matrices. Both parents may be the same tensor; gradients
/// accumulate.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let av = as2(a, "matmul_nt")?;
    let bv = as2(b, "matmul_nt")?;
    if av.ncols() != bv.ncols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", av.shape(), bv.shape()),
        ));
    }
    let out = matmul_raw(&av, &bv.t().to_owned()).into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let da = matmul_raw(&g2, &bv);
            let db = matmul_raw(&g2.t().to_owned(), &av);
            vec![Some(da.into_dyn()), Some(db.into_dyn())]
        }),
    ))
}

/// Rows of `x` selected by `idx`, in order. Backward scatter-adds.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let xv = as2(x, "gather_rows")?;
    let n = xv.nrows();
    for &i in idx {
        if i >= n {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {i} out of bounds for {n} rows"),
            ));
        }
    }
    let mut out = Array2::zeros((idx.len(), xv.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&xv.row(i));
    }
    let idx = idx.to_vec();
    let in_shape = (n, xv.ncols());
    Ok(Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::zeros(in_shape);
            for (r, &i) in idx.iter().enumerate() {
                let mut row = dx.row_mut(i);
                row += &g2.row(r);
            }
            vec![Some(dx.into_dyn())]
        }),
    ))
}

/// Stacks `a` on top of `b` along rows.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let av = as2(a, "concat_rows")?;
    let bv = as2(b, "concat_rows")?;
    if av.ncols() != bv.ncols() {
        return Err(Error::shape(
            "concat_rows",
            format!("{} vs {} columns", av.ncols(), bv.ncols()),
        ));
    }
    let na = av.nrows();
    let out = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
        .expect("concat shapes checked")
        .into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let da = g2.slice(ndarray::s![..na, ..]).to_owned().into_dyn();
            let db = g2.slice(ndarray::s![na.., ..]).to_owned().into_dyn();
            vec![Some(da), Some(db)]
        }),
    ))
}

/// Rows scaled to unit L2 norm (denominator `‖row‖ + eps`).
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let xv = as2(x, "l2_normalize_rows")?;
    let norms: Vec<f64> = xv
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut out = xv.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|e| e / (n + eps));
    }
    Ok(Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::zeros(xv.raw_dim());
            for i in 0..xv.nrows() {
                let n = norms[i];
                let s = n + eps;
                let gr = g2.row(i);
                let xr = xv.row(i);
                let dot = gr.dot(&xr);
                for j in 0..xv.ncols() {
                    let mut v = gr[j] / s;
                    if n > 0.0 {
                        v -= dot * xr[j] / (s * s * n);
                    }
                    dx[(i, j)] = v;
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    ))
}

/// 2-d convolution over `(N, C, H, W)` with weight `(O, C, kh, kw)`,
/// computed as im2col followed by one gemm.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let xv = as4(x, "conv2d")?;
    let wv = as4(weight, "conv2d")?;
    let bv = as1(bias, "conv2d")?;
    let (n, c, h, w) = xv.dim();
    let (o, wc, kh, kw) = wv.dim();
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    if bv.len() != o {
        return Err(Error::shape(
            "conv2d",
            format!("bias of {} for {o} output channels", bv.len()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
        ));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;

    let col = im2col(&xv, kh, kw, stride, padding, oh, ow);
    // (O, C*kh*kw)
    let wmat = wv
        .to_shape((o, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    // (N*OH*OW, O)
    let mut flat = matmul_raw(&col, &wmat.t().to_owned());
    for mut row in flat.rows_mut() {
        row += &bv;
    }
    let out = flat
        .into_shape_with_order((n, oh, ow, o))
        .expect("conv output reshape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn();

    let in_dim = (n, c, h, w);
    Ok(Tensor::from_op(
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            // back to (N*OH*OW, O)
            let gflat = g4
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((n * oh * ow, o))
                .expect("grad reshape");
            let db = gflat.sum_axis(Axis(0));
            let dwmat = matmul_raw(&gflat.t().to_owned(), &col); // (O, C*kh*kw)
            let dw = dwmat
                .into_shape_with_order((o, c, kh, kw))
                .expect("dw reshape");
            let dcol = matmul_raw(&gflat, &wmat); // (N*OH*OW, C*kh*kw)
            let dx = col2im(&dcol, in_dim, kh, kw, stride, padding, oh, ow);
            vec![
                Some(dx.into_dyn()),
                Some(dw.into_dyn()),
                Some(db.into_dyn()),
            ]
        }),
    ))
}

fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::zeros((n * oh * ow, c * kh * kw));
    for ni in 0..n {
        for yo in 0..oh {
            for xo in 0..ow {
                let row = (ni * oh + yo) * ow + xo;
                let mut cidx = 0;
                for ci in 0..c {
                    for i in 0..kh {
                        let hy = (yo * stride + i) as isize - padding as isize;
                        for j in 0..kw {
                            let wx = (xo * stride + j) as isize - padding as isize;
                            if hy >= 0 && (hy as usize) < h && wx >= 0 && (wx as usize) < w {
                                col[(row, cidx)] = x[(ni, ci, hy as usize, wx as usize)];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (n, c, h, w) = in_dim;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for yo in 0..oh {
            for xo in 0..ow {
                let row = (ni * oh + yo) * ow + xo;
                let mut cidx = 0;
                for ci in 0..c {
                    for i in 0..kh {
                        let hy = (yo * stride + i) as isize - padding as isize;
                        for j in 0..kw {
                            let wx = (xo * stride + j) as isize - padding as isize;
                            if hy >= 0 && (hy as usize) < h && wx >= 0 && (wx as usize) < w {
                                dx[(ni, ci, hy as usize, wx as usize)] += dcol[(row, cidx)];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Collapses all trailing dimensions: `(N, ...) -> (N, prod)`.
pub fn flatten_rows(x: &Tensor) -> Result<Tensor> {
    let v = x.value();
    if v.ndim() < 1 {
        return Err(Error::shape("flatten_rows", "needs a leading dimension"));
    }
    let n = v.shape()[0];
    let rest: usize = v.shape()[1..].iter().product();
    let in_shape = v.raw_dim();
    let out = v
        .to_shape((n, rest))
        .expect("contiguous reshape")
        .to_owned()
        .into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let dx = g
                .to_shape(in_shape.clone())
                .expect("gradient reshape")
                .to_owned();
            vec![Some(dx)]
        }),
    ))
}

/// Non-overlapping average pooling with window `k` (spatial dims must divide).
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let xv = as4(x, "avg_pool2d")?;
    let (n, c, h, w) = xv.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("window {k} must divide spatial dims {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += xv[(ni, ci, yo * k + i, xo * k + j)];
                        }
                    }
                    out[(ni, ci, yo, xo)] = acc * inv;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let gv = g4[(ni, ci, yo, xo)] * inv;
                            for i in 0..k {
                                for j in 0..k {
                                    dx[(ni, ci, yo * k + i, xo * k + j)] = gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    ))
}

/// Mean over the spatial dims: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let xv = as4(x, "global_avg_pool")?;
    let (n, c, h, w) = xv.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xi in 0..w {
                    acc += xv[(ni, ci, y, xi)];
                }
            }
            out[(ni, ci)] = acc * inv;
        }
    }
    Ok(Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g2[(ni, ci)] * inv;
                    dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gv);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    ))
}

/// Batch normalization over rows of `(N, D)` using batch statistics.
///
/// Returns the normalized output together with the batch mean and (biased)
/// variance so the caller can maintain running statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Array1<f64>, Array1<f64>)> {
    let xv = as2(x, "batch_norm")?;
    let gv = as1(gamma, "batch_norm")?;
    let bv = as1(beta, "batch_norm")?;
    let (n, d) = xv.dim();
    if gv.len() != d || bv.len() != d {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma/beta of {}/{} for {d} features", gv.len(), bv.len()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("batch_norm", "empty batch"));
    }
    let mean = xv.mean_axis(Axis(0)).unwrap();
    let var = xv.var_axis(Axis(0), 0.0); // biased
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = (&xv - &mean) * &inv_std;
    let out = (&xhat * &gv + &bv).into_dyn();

    let y = Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let dgamma = (&g2.to_owned() * &xhat).sum_axis(Axis(0));
            let dbeta = g2.sum_axis(Axis(0));
            // dxhat = g * gamma
            let dxhat = &g2.to_owned() * &gv;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0));
            let nf = n as f64;
            let mut dx = Array2::zeros((n, d));
            for i in 0..n {
                for j in 0..d {
                    dx[(i, j)] = inv_std[j] / nf
                        * (nf * dxhat[(i, j)] - sum_dxhat[j] - xhat[(i, j)] * sum_dxhat_xhat[j]);
                }
            }
            vec![
                Some(dx.into_dyn()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        }),
    );
    let mean_out = xv.mean_axis(Axis(0)).unwrap();
    let var_out = xv.var_axis(Axis(0), 0.0);
    Ok((y, mean_out, var_out))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
) -> Result<Tensor> {
    let xv = as2(x, "batch_norm")?;
    let gv = as1(gamma, "batch_norm")?;
    let bv = as1(beta, "batch_norm")?;
    let d = xv.ncols();
    if gv.len() != d || mean.len() != d || var.len() != d {
        return Err(Error::shape("batch_norm", "feature width mismatch"));
    }
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = (&xv - mean) * &inv_std;
    let out = (&xhat * &gv + &bv).into_dyn();
    Ok(Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let dgamma = (&g2.to_owned() * &xhat).sum_axis(Axis(0));
            let dbeta = g2.sum_axis(Axis(0));
            let dx = &g2.to_owned() * &gv * &inv_std;
            vec![
                Some(dx.into_dyn()),
                Some(dgamma.into_dyn()),
                Some(dbeta.into_dyn()),
            ]
        }),
    ))
}

/// Mean softmax cross-entropy of integer targets against rows of logits.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let lv = as2(logits, "cross_entropy")?;
    let (n, c) = lv.dim();
    if targets.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows vs {} targets", targets.len()),
        ));
    }
    for &t in targets {
        if t >= c {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
    }
    let mut total = 0.0;
    let mut softmax = Array2::zeros((n, c));
    for i in 0..n {
        let row = lv.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            z += (row[j] - m).exp();
        }
        let lse = m + z.ln();
        total += lse - row[targets[i]];
        for j in 0..c {
            softmax[(i, j)] = (row[j] - m).exp() / z;
        }
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![logits.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().unwrap();
            let mut dl = softmax.clone();
            for (i, &t) in targets.iter().enumerate() {
                dl[(i, t)] -= 1.0;
            }
            dl *= gv / n as f64;
            vec![Some(dl.into_dyn())]
        }),
    ))
}

/// Mean InfoNCE negative log-likelihood over a square similarity matrix.
///
/// Row `i`'s positive is column `positives[i]`; the diagonal entry `(i, i)`
/// is excluded from the denominator. Input is expected to be similarity
/// already divided by temperature.
pub fn paired_softmax_nll(sim: &Tensor, positives: &[usize]) -> Result<Tensor> {
    let sv = as2(sim, "paired_softmax_nll")?;
    let (r, cc) = sv.dim();
    if r != cc {
        return Err(Error::shape(
            "paired_softmax_nll",
            format!("similarity matrix must be square, got {r}x{cc}"),
        ));
    }
    if positives.len() != r {
        return Err(Error::shape(
            "paired_softmax_nll",
            format!("{r} rows vs {} positives", positives.len()),
        ));
    }
    for (i, &p) in positives.iter().enumerate() {
        if p >= r || p == i {
            return Err(Error::invalid(
                "paired_softmax_nll",
                format!("positive index {p} invalid for row {i}"),
            ));
        }
    }
    let mut total = 0.0;
    let mut probs = Array2::zeros((r, r)); // masked softmax rows
    for i in 0..r {
        let row = sv.row(i);
        let mut m = f64::NEG_INFINITY;
        for k in 0..r {
            if k != i {
                m = m.max(row[k]);
            }
        }
        let mut z = 0.0;
        for k in 0..r {
            if k != i {
                z += (row[k] - m).exp();
            }
        }
        let lse = m + z.ln();
        total += lse - row[positives[i]];
        for k in 0..r {
            if k != i {
                probs[(i, k)] = (row[k] - m).exp() / z;
            }
        }
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / r as f64);
    let positives = positives.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![sim.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().unwrap();
            let mut ds = probs.clone();
            for (i, &p) in positives.iter().enumerate() {
                ds[(i, p)] -= 1.0;
            }
            ds *= gv / r as f64;
            vec![Some(ds.into_dyn())]
        }),
    ))
}
