// Forward kernels and vector-Jacobian products for the operator catalog.

use super::Op;
use crate::tensor::Tensor;

pub(super) fn forward(op: &Op, args: &[&Tensor], params: &[Tensor], out_shape: &[usize]) -> Tensor {
    let x = args[0];
    let data = match op {
        Op::Input { .. } => unreachable!("inputs are bound by the caller"),
        Op::Dense { weight, bias } => dense(x, &params[*weight], &params[*bias]),
        Op::Conv2d { kernel, bias } => conv2d(x, &params[*kernel], &params[*bias], out_shape),
        Op::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Op::MaxPool2 => pool(x, out_shape, |w| {
            w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }),
        Op::AvgPool2 => pool(x, out_shape, |w| (w[0] + w[1] + w[2] + w[3]) * 0.25),
        Op::Flatten => x.data().to_vec(),
        Op::Softmax => softmax(x.data()),
        Op::Scale(a) => x.data().iter().map(|&v| a * v).collect(),
        Op::Shift(b) => x.data().iter().map(|&v| v + b).collect(),
        Op::Add => x
            .data()
            .iter()
            .zip(args[1].data())
            .map(|(a, b)| a + b)
            .collect(),
    };
    Tensor::new(out_shape.to_vec(), data).expect("shape inference fixed the output size")
}

fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len();
    w.data()
        .chunks_exact(n)
        .zip(b.data())
        .map(|(row, &bias)| bias + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let (_, w, c) = x.dims3();
    let (kh, kw, nk) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let (xd, kd) = (x.data(), k.data());
    let mut out = Vec::with_capacity(oh * ow * nk);
    for i in 0..oh {
        for j in 0..ow {
            for q in 0..nk {
                let mut acc = b.data()[q];
                for di in 0..kh {
                    for dj in 0..kw {
                        let xbase = ((i + di) * w + (j + dj)) * c;
                        let kbase = (di * kw + dj) * c;
                        for ch in 0..c {
                            acc += xd[xbase + ch] * kd[(kbase + ch) * nk + q];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Offsets of the 2x2 window feeding pooled cell `(i, j, ch)`, in scan order.
pub(super) fn window(i: usize, j: usize, ch: usize, w: usize, c: usize) -> [usize; 4] {
    let at = |r: usize, s: usize| (r * w + s) * c + ch;
    [
        at(2 * i, 2 * j),
        at(2 * i, 2 * j + 1),
        at(2 * i + 1, 2 * j),
        at(2 * i + 1, 2 * j + 1),
    ]
}

fn pool(x: &Tensor, out_shape: &[usize], reduce: impl Fn([f64; 4]) -> f64) -> Vec<f64> {
    let (_, w, c) = x.dims3();
    let xd = x.data();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            for ch in 0..c {
                let idx = window(i, j, ch, w, c);
                out.push(reduce(idx.map(|o| xd[o])));
            }
        }
    }
    out
}

/// Position within the window of the largest value; first in scan order on ties.
pub(super) fn max_slot(vals: [f64; 4]) -> usize {
    let mut best = 0;
    for s in 1..4 {
        if vals[s] > vals[best] {
            best = s;
        }
    }
    best
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradients flowing out of one node.
pub(super) struct Vjp {
    pub inputs: Vec<Vec<f64>>,
    pub params: Vec<(usize, Vec<f64>)>,
}

/// Vector-Jacobian product of `op` at the recorded `args`/`out` for the
/// upstream gradient `g`.
pub(super) fn backward(
    op: &Op,
    args: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    params: &[Tensor],
    want_params: bool,
) -> Vjp {
    let x = args[0];
    let mut param_grads = Vec::new();
    let dx = match op {
        Op::Input { .. } => Vec::new(),
        Op::Dense { weight, bias } => {
            let w = &params[*weight];
            let n = x.len();
            let mut dx = vec![0.0; n];
            for (row, &gi) in w.data().chunks_exact(n).zip(g) {
                for (d, &wij) in dx.iter_mut().zip(row) {
                    *d += wij * gi;
                }
            }
            if want_params {
                let dw: Vec<f64> = g
                    .iter()
                    .flat_map(|&gi| x.data().iter().map(move |&xj| gi * xj))
                    .collect();
                param_grads.push((*weight, dw));
                param_grads.push((*bias, g.to_vec()));
            }
            dx
        }
        Op::Conv2d { kernel, bias } => {
            let k = &params[*kernel];
            let (_, w, c) = x.dims3();
            let (kh, kw, nk) = (k.shape()[0], k.shape()[1], k.shape()[3]);
            let (oh, ow) = (out.shape()[0], out.shape()[1]);
            let (xd, kd) = (x.data(), k.data());
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; if want_params { k.len() } else { 0 }];
            let mut db = vec![0.0; if want_params { nk } else { 0 }];
            for i in 0..oh {
                for j in 0..ow {
                    for q in 0..nk {
                        let gq = g[(i * ow + j) * nk + q];
                        if gq == 0.0 {
                            continue;
                        }
                        if want_params {
                            db[q] += gq;
                        }
                        for di in 0..kh {
                            for dj in 0..kw {
                                let xbase = ((i + di) * w + (j + dj)) * c;
                                let kbase = (di * kw + dj) * c;
                                for ch in 0..c {
                                    let ki = (kbase + ch) * nk + q;
                                    dx[xbase + ch] += gq * kd[ki];
                                    if want_params {
                                        dk[ki] += gq * xd[xbase + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_params {
                param_grads.push((*kernel, dk));
                param_grads.push((*bias, db));
            }
            dx
        }
        Op::Relu => x
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
            .collect(),
        Op::MaxPool2 | Op::AvgPool2 => {
            let (_, w, c) = x.dims3();
            let xd = x.data();
            let mut dx = vec![0.0; x.len()];
            let mut o = 0;
            for i in 0..out.shape()[0] {
                for j in 0..out.shape()[1] {
                    for ch in 0..c {
                        let idx = window(i, j, ch, w, c);
                        if matches!(op, Op::MaxPool2) {
                            dx[idx[max_slot(idx.map(|p| xd[p]))]] += g[o];
                        } else {
                            for p in idx {
                                dx[p] += 0.25 * g[o];
                            }
                        }
                        o += 1;
                    }
                }
            }
            dx
        }
        Op::Flatten | Op::Shift(_) => g.to_vec(),
        Op::Scale(a) => g.iter().map(|&gi| a * gi).collect(),
        Op::Softmax => {
            let y = out.data();
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect()
        }
        Op::Add => {
            return Vjp {
                inputs: vec![g.to_vec(), g.to_vec()],
                params: param_grads,
            }
        }
    };
    Vjp {
        inputs: vec![dx],
        params: param_grads,
    }
}
