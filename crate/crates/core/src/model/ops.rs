//! Row-wise kernels shared by the batched and incremental forward passes.

use super::RopeTable;
use crate::tensor::Scalar;

/// `y = x / rms(x) * g` for every row of `x`; returns the inverse rms per row.
pub fn rmsnorm<F: Scalar>(x: &[F], g: &[F], eps: F, y: &mut [F]) -> Vec<F> {
    let d = g.len();
    let rows = x.len() / d;
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / F::from_usize(d).unwrap();
        let s = F::one() / (ms + eps).sqrt();
        inv.push(s);
        for ((o, &v), &gi) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(g) {
            *o = v * s * gi;
        }
    }
    inv
}

/// Backward of [`rmsnorm`]: accumulates into `dx` and `dg`.
pub fn rmsnorm_backward<F: Scalar>(x: &[F], g: &[F], inv: &[F], dy: &[F], dx: &mut [F], dg: &mut [F]) {
    let d = g.len();
    let df = F::from_usize(d).unwrap();
    for (r, &s) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut dot = F::zero();
        for i in 0..d {
            let xhat = xr[i] * s;
            dg[i] += dyr[i] * xhat;
            dot += dyr[i] * g[i] * xhat;
        }
        let mean = dot / df;
        for i in 0..d {
            let xhat = xr[i] * s;
            dx[r * d + i] += s * (dyr[i] * g[i] - xhat * mean);
        }
    }
}

/// Rotates adjacent pairs of every head of one row in place.
pub fn rope_row<F: Scalar>(row: &mut [F], rope: &RopeTable<F>, pos: usize, inverse: bool) {
    let half = rope.half;
    let cos = &rope.cos[pos * half..(pos + 1) * half];
    let sin = &rope.sin[pos * half..(pos + 1) * half];
    for head in row.chunks_exact_mut(2 * half) {
        for i in 0..half {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Causal softmax of a square score block in place (entries above the
/// diagonal become zero).
pub fn causal_softmax<F: Scalar>(s: &mut [F], len: usize) {
    for i in 0..len {
        let row = &mut s[i * len..(i + 1) * len];
        let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= sum;
        }
        row[i + 1..].iter_mut().for_each(|v| *v = F::zero());
    }
}
