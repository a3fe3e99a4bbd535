//! Loop-based reference computations, independent of the library's kernels
//! and tape.

#![allow(clippy::needless_range_loop)]

/// softmax(q kᵀ / sqrt(d)) v with query `i` seeing keys `0..=causal_from + i`.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], causal_from: usize) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let visible = (causal_from + i + 1).min(k.len());
            let scores: Vec<f64> = (0..visible)
                .map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for j in 0..visible {
                for c in 0..out.len() {
                    out[c] += e[j] / z * v[j][c];
                }
            }
            out
        })
        .collect()
}

fn row(t: &ardm_core::Tensor, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

/// `w x + b` with `w` stored out x in.
fn affine(w: &ardm_core::Tensor, b: &ardm_core::Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| b.data()[o] + (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], g: &ardm_core::Tensor, b: &ardm_core::Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Reference transformer over a whole sequence where position `i` is
/// computed entirely with `params[i]` (its role's weights) and attends to the
/// keys and values that earlier positions produced with their own weights.
pub fn transformer_logits(
    params: &[&ardm_core::Params],
    cfg: &ardm_core::ModelConfig,
    tokens: &[u32],
) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let hd = cfg.head_dim();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let p = params[i];
            let te = row(&p.wte, tokens[i] as usize);
            let pe = row(&p.wpe, i);
            te.iter().zip(&pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    for l in 0..cfg.n_layers {
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let lw = &params[i].layers[l];
                layer_norm(&x[i], &lw.ln1_g, &lw.ln1_b)
            })
            .collect();
        let mut attn_out = vec![vec![0.0; cfg.d_model]; n];
        for head in 0..cfg.n_heads {
            let proj = |which: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|i| {
                        let lw = &params[i].layers[l];
                        let (w, b) = match which {
                            0 => (&lw.wq[head], &lw.bq[head]),
                            1 => (&lw.wk[head], &lw.bk[head]),
                            _ => (&lw.wv[head], &lw.bv[head]),
                        };
                        affine(w, b, &h[i])
                    })
                    .collect()
            };
            let (q, k, v) = (proj(0), proj(1), proj(2));
            let a = attention(&q, &k, &v, 0);
            for i in 0..n {
                let wo = &params[i].layers[l].wo[head];
                for o in 0..cfg.d_model {
                    attn_out[i][o] += (0..hd).map(|c| wo.data()[o * hd + c] * a[i][c]).sum::<f64>();
                }
            }
        }
        for i in 0..n {
            let lw = &params[i].layers[l];
            for o in 0..cfg.d_model {
                x[i][o] += attn_out[i][o] + lw.bo.data()[o];
            }
            let h2 = layer_norm(&x[i], &lw.ln2_g, &lw.ln2_b);
            let f: Vec<f64> = affine(&lw.w1, &lw.b1, &h2).into_iter().map(gelu).collect();
            let f = affine(&lw.w2, &lw.b2, &f);
            for o in 0..cfg.d_model {
                x[i][o] += f[o];
            }
        }
    }
    (0..n)
        .map(|i| {
            let p = params[i];
            let hf = layer_norm(&x[i], &p.lnf_g, &p.lnf_b);
            (0..cfg.vocab_size)
                .map(|t| p.wte.row(t).iter().zip(&hf).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Sum over rows of `-log softmax(logits)[target]`.
pub fn nll(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(l, &t)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            -(l[t as usize] - m - z.ln())
        })
        .sum()
}
