//! A plain single-stream transformer language model, written with explicit
//! loops in `f64`. It shares only the parameter tensors with the multi-stream
//! model and serves as an oracle for the text-only path.

use super::{ModelConfig, Params};
use crate::tensor::Scalar;
use crate::vocab::TokenId;

fn get<F: Scalar>(x: &[F], i: usize) -> f64 {
    x[i].to_f64().unwrap()
}

fn norm<F: Scalar>(x: &[f64], g: &[F], eps: f64) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + eps).sqrt();
    x.iter().enumerate().map(|(i, v)| v / rms * get(g, i)).collect()
}

/// `x · W` for a row vector `x` and `W` stored `[in, out]`.
fn proj<F: Scalar>(x: &[f64], w: &[F], out: usize) -> Vec<f64> {
    (0..out).map(|j| x.iter().enumerate().map(|(i, v)| v * get(w, i * out + j)).sum()).collect()
}

fn rotate(x: &mut [f64], pos: usize, head_dim: usize, base: f64) {
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 / base.powf(2.0 * i as f64 / head_dim as f64);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * theta.cos() - b * theta.sin();
            head[2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Next-token logits `[len, V]` of a standard causal LM over `ids`.
pub fn single_stream_logits<F: Scalar>(cfg: &ModelConfig, params: &Params<F>, ids: &[TokenId]) -> Vec<f64> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let v = params.out_proj.shape[1];
    let len = ids.len();
    let mut hidden: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| (0..d).map(|i| get(&params.embedding.data, id as usize * d + i)).collect())
        .collect();

    for layer in &params.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (t, x) in hidden.iter().enumerate() {
            let h = norm(x, &layer.attn_norm.data, cfg.norm_eps);
            let mut q = proj(&h, &layer.wq.data, d);
            let mut k = proj(&h, &layer.wk.data, d);
            rotate(&mut q, t, dh, cfg.rope_base);
            rotate(&mut k, t, dh, cfg.rope_base);
            qs.push(q);
            ks.push(k);
            vs.push(proj(&h, &layer.wv.data, d));
        }
        for t in 0..len {
            let mut mixed = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        qs[t][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for i in r.clone() {
                        mixed[i] += e / total * vs[j][i];
                    }
                }
            }
            let o = proj(&mixed, &layer.wo.data, d);
            hidden[t].iter_mut().zip(o).for_each(|(a, b)| *a += b);

            let h = norm(&hidden[t], &layer.ffn_norm.data, cfg.norm_eps);
            let gate = proj(&h, &layer.w_gate.data, cfg.d_ff);
            let up = proj(&h, &layer.w_up.data, cfg.d_ff);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = proj(&act, &layer.w_down.data, d);
            hidden[t].iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
    }

    hidden
        .iter()
        .flat_map(|x| proj(&norm(x, &params.final_norm.data, cfg.norm_eps), &params.out_proj.data, v))
        .collect()
}
