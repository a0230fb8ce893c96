//! Batched forward and backward pass over one packed context row.
//!
//! A row is a concatenation of independent segments. Attention is causal
//! within each segment and rotary positions restart at zero for every segment.

use super::ops::{causal_softmax, rmsnorm, rmsnorm_backward, rope_row, sigmoid};
use super::{ModelState, Params};
use crate::tensor::{gemm, matmul, matmul_at, matmul_bt, MatMut, MatRef, Scalar};
use crate::vocab::{TokenId, PAD};

struct LayerTrace<F> {
    x_in: Vec<F>,
    inv1: Vec<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    x_mid: Vec<F>,
    inv2: Vec<F>,
    h2: Vec<F>,
    gate: Vec<F>,
    up: Vec<F>,
    act: Vec<F>,
}

/// Activations saved by [`forward_row`] for [`backward_row`].
pub struct RowTrace<F> {
    ids: Vec<TokenId>,
    seg_lens: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<LayerTrace<F>>,
    x_final: Vec<F>,
    inv_final: Vec<F>,
    z: Vec<F>,
}

fn segment_positions(seg_lens: &[usize]) -> Vec<usize> {
    seg_lens.iter().flat_map(|&s| 0..s).collect()
}

/// Runs the model over `ids` (`[len, N]` delayed frames, row-major) split
/// into segments of `seg_lens`. Returns logits `[len, N, V]`.
///
/// The caller guarantees that every id is in range and every segment fits
/// the context length.
pub fn forward_row<F: Scalar>(
    m: &ModelState<F>,
    ids: &[TokenId],
    seg_lens: &[usize],
    keep_trace: bool,
) -> (Vec<F>, Option<RowTrace<F>>) {
    let cfg = &m.config;
    let p = &m.params;
    let (d, nh, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
    let dh = cfg.head_dim();
    let ns = m.n_streams();
    let nv = m.vocab_size();
    let len = ids.len() / ns;
    assert_eq!(seg_lens.iter().sum::<usize>(), len, "segments must cover the row");
    let eps = F::from_f64c(cfg.norm_eps);
    let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
    let positions = segment_positions(seg_lens);

    let mut x = vec![F::zero(); len * d];
    for t in 0..len {
        for &id in &ids[t * ns..(t + 1) * ns] {
            if id == PAD {
                continue;
            }
            let row = &p.embedding.data[id as usize * d..(id as usize + 1) * d];
            x[t * d..(t + 1) * d].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
    }

    let mut traces = Vec::new();
    for lp in &p.layers {
        let x_in = if keep_trace { x.clone() } else { Vec::new() };
        let mut h1 = vec![F::zero(); len * d];
        let inv1 = rmsnorm(&x, &lp.attn_norm.data, eps, &mut h1);
        let mut q = vec![F::zero(); len * d];
        let mut k = vec![F::zero(); len * d];
        let mut v = vec![F::zero(); len * d];
        matmul(&h1, &lp.wq.data, &mut q, len, d, d, false);
        matmul(&h1, &lp.wk.data, &mut k, len, d, d, false);
        matmul(&h1, &lp.wv.data, &mut v, len, d, d, false);
        for t in 0..len {
            rope_row(&mut q[t * d..(t + 1) * d], &m.rope, positions[t], false);
            rope_row(&mut k[t * d..(t + 1) * d], &m.rope, positions[t], false);
        }

        let mut attn = vec![F::zero(); len * d];
        let mut probs = Vec::new();
        let mut start = 0;
        for &sl in seg_lens {
            let mut s = vec![F::zero(); sl * sl];
            for head in 0..nh {
                let c0 = start * d + head * dh;
                gemm(
                    scale,
                    MatRef::sub(&q, sl, dh, d, c0),
                    MatRef::sub(&k, sl, dh, d, c0).t(),
                    F::zero(),
                    MatMut::new(&mut s, sl, sl),
                );
                causal_softmax(&mut s, sl);
                gemm(
                    F::one(),
                    MatRef::new(&s, sl, sl),
                    MatRef::sub(&v, sl, dh, d, c0),
                    F::zero(),
                    MatMut::sub(&mut attn, sl, dh, d, c0),
                );
                if keep_trace {
                    probs.extend_from_slice(&s);
                }
            }
            start += sl;
        }
        matmul(&attn, &lp.wo.data, &mut x, len, d, d, true);

        let x_mid = if keep_trace { x.clone() } else { Vec::new() };
        let mut h2 = vec![F::zero(); len * d];
        let inv2 = rmsnorm(&x, &lp.ffn_norm.data, eps, &mut h2);
        let mut gate = vec![F::zero(); len * ff];
        let mut up = vec![F::zero(); len * ff];
        matmul(&h2, &lp.w_gate.data, &mut gate, len, d, ff, false);
        matmul(&h2, &lp.w_up.data, &mut up, len, d, ff, false);
        let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
        matmul(&act, &lp.w_down.data, &mut x, len, ff, d, true);

        if keep_trace {
            traces.push(LayerTrace {
                x_in,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
            });
        }
    }

    let mut hf = vec![F::zero(); len * d];
    let inv_final = rmsnorm(&x, &p.final_norm.data, eps, &mut hf);
    let mut z = vec![F::zero(); len * ns * d];
    for t in 0..len {
        for s in 0..ns {
            let b = &p.level_bias.data[s * d..(s + 1) * d];
            let zr = &mut z[(t * ns + s) * d..(t * ns + s + 1) * d];
            for i in 0..d {
                zr[i] = hf[t * d + i] + b[i];
            }
        }
    }
    let mut logits = vec![F::zero(); len * ns * nv];
    matmul(&z, &p.out_proj.data, &mut logits, len * ns, d, nv, false);

    let trace = keep_trace.then(|| RowTrace {
        ids: ids.to_vec(),
        seg_lens: seg_lens.to_vec(),
        positions,
        layers: traces,
        x_final: x,
        inv_final,
        z,
    });
    (logits, trace)
}

/// Accumulates parameter gradients for upstream logit gradients `dlogits`
/// (`[len, N, V]`). Frozen entries of `grads` are left at zero.
pub fn backward_row<F: Scalar>(m: &ModelState<F>, trace: &RowTrace<F>, dlogits: &[F], grads: &mut Params<F>) {
    let cfg = &m.config;
    let p = &m.params;
    let (d, nh, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
    let dh = cfg.head_dim();
    let ns = m.n_streams();
    let nv = m.vocab_size();
    let len = trace.positions.len();
    let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
    assert_eq!(dlogits.len(), len * ns * nv);

    let mut dz = vec![F::zero(); len * ns * d];
    matmul_bt(dlogits, &p.out_proj.data, &mut dz, len * ns, nv, d, false);
    matmul_at(&trace.z, dlogits, &mut grads.out_proj.data, len * ns, d, nv, true);
    let mut dhf = vec![F::zero(); len * d];
    for t in 0..len {
        for s in 0..ns {
            let src = &dz[(t * ns + s) * d..(t * ns + s + 1) * d];
            for i in 0..d {
                dhf[t * d + i] += src[i];
                grads.level_bias.data[s * d + i] += src[i];
            }
        }
    }
    let mut dx = vec![F::zero(); len * d];
    rmsnorm_backward(
        &trace.x_final,
        &p.final_norm.data,
        &trace.inv_final,
        &dhf,
        &mut dx,
        &mut grads.final_norm.data,
    );

    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &p.layers[li];
        let lg = &mut grads.layers[li];

        // feed-forward
        matmul_at(&lt.act, &dx, &mut lg.w_down.data, len, ff, d, true);
        let mut d_act = vec![F::zero(); len * ff];
        matmul_bt(&dx, &lp.w_down.data, &mut d_act, len, d, ff, false);
        let mut d_gate = vec![F::zero(); len * ff];
        let mut d_up = vec![F::zero(); len * ff];
        for i in 0..len * ff {
            let g = lt.gate[i];
            let sg = sigmoid(g);
            d_up[i] = d_act[i] * g * sg;
            d_gate[i] = d_act[i] * lt.up[i] * sg * (F::one() + g * (F::one() - sg));
        }
        matmul_at(&lt.h2, &d_gate, &mut lg.w_gate.data, len, d, ff, true);
        matmul_at(&lt.h2, &d_up, &mut lg.w_up.data, len, d, ff, true);
        let mut dh2 = vec![F::zero(); len * d];
        matmul_bt(&d_gate, &lp.w_gate.data, &mut dh2, len, ff, d, false);
        matmul_bt(&d_up, &lp.w_up.data, &mut dh2, len, ff, d, true);
        rmsnorm_backward(&lt.x_mid, &lp.ffn_norm.data, &lt.inv2, &dh2, &mut dx, &mut lg.ffn_norm.data);

        // attention
        matmul_at(&lt.attn, &dx, &mut lg.wo.data, len, d, d, true);
        let mut d_attn = vec![F::zero(); len * d];
        matmul_bt(&dx, &lp.wo.data, &mut d_attn, len, d, d, false);
        let mut dq = vec![F::zero(); len * d];
        let mut dk = vec![F::zero(); len * d];
        let mut dv = vec![F::zero(); len * d];
        let mut start = 0;
        let mut poff = 0;
        for &sl in &trace.seg_lens {
            let mut dp = vec![F::zero(); sl * sl];
            for head in 0..nh {
                let c0 = start * d + head * dh;
                let pr = &lt.probs[poff..poff + sl * sl];
                poff += sl * sl;
                gemm(
                    F::one(),
                    MatRef::sub(&d_attn, sl, dh, d, c0),
                    MatRef::sub(&lt.v, sl, dh, d, c0).t(),
                    F::zero(),
                    MatMut::new(&mut dp, sl, sl),
                );
                gemm(
                    F::one(),
                    MatRef::new(pr, sl, sl).t(),
                    MatRef::sub(&d_attn, sl, dh, d, c0),
                    F::zero(),
                    MatMut::sub(&mut dv, sl, dh, d, c0),
                );
                for i in 0..sl {
                    let row = i * sl..i * sl + i + 1;
                    let dot: F = pr[row.clone()].iter().zip(&dp[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        dp[j] = pr[j] * (dp[j] - dot);
                    }
                    dp[i * sl + i + 1..(i + 1) * sl].iter_mut().for_each(|x| *x = F::zero());
                }
                gemm(
                    scale,
                    MatRef::new(&dp, sl, sl),
                    MatRef::sub(&lt.k, sl, dh, d, c0),
                    F::zero(),
                    MatMut::sub(&mut dq, sl, dh, d, c0),
                );
                gemm(
                    scale,
                    MatRef::new(&dp, sl, sl).t(),
                    MatRef::sub(&lt.q, sl, dh, d, c0),
                    F::zero(),
                    MatMut::sub(&mut dk, sl, dh, d, c0),
                );
            }
            start += sl;
        }
        for t in 0..len {
            rope_row(&mut dq[t * d..(t + 1) * d], &m.rope, trace.positions[t], true);
            rope_row(&mut dk[t * d..(t + 1) * d], &m.rope, trace.positions[t], true);
        }
        matmul_at(&lt.h1, &dq, &mut lg.wq.data, len, d, d, true);
        matmul_at(&lt.h1, &dk, &mut lg.wk.data, len, d, d, true);
        matmul_at(&lt.h1, &dv, &mut lg.wv.data, len, d, d, true);
        let mut dh1 = vec![F::zero(); len * d];
        matmul_bt(&dq, &lp.wq.data, &mut dh1, len, d, d, false);
        matmul_bt(&dk, &lp.wk.data, &mut dh1, len, d, d, true);
        matmul_bt(&dv, &lp.wv.data, &mut dh1, len, d, d, true);
        rmsnorm_backward(&lt.x_in, &lp.attn_norm.data, &lt.inv1, &dh1, &mut dx, &mut lg.attn_norm.data);
    }

    for t in 0..len {
        for &id in &trace.ids[t * ns..(t + 1) * ns] {
            if id == PAD {
                continue;
            }
            let row = &mut grads.embedding.data[id as usize * d..(id as usize + 1) * d];
            row.iter_mut().zip(&dx[t * d..(t + 1) * d]).for_each(|(a, &b)| *a += b);
        }
    }
    grads.zero_frozen();
}
