//! Scalar f64 re-implementation of the MoC block.

use motif_core::moc::{MoCConfig, MoCParams, TokenInput};
use motif_core::nn::{Linear, ParamTree};
use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(a: ArrayView2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn affine(x: &Mat, l: &Linear<f64>) -> Mat {
    let (d_in, d_out) = l.weight.dim();
    x.iter()
        .map(|r| {
            (0..d_out)
                .map(|o| {
                    let mut s = l.bias.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..d_in {
                        s += r[i] * l.weight[[i, o]];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// End-to-end block output computed with plain loops.
pub fn moc_oracle(p: &MoCParams<f64>, h: &Mat, tokens: &TokenInput<f64>, valid: &[bool]) -> Mat {
    let cfg = p.config;
    let l = h.len();
    let d_m = cfg.d_m;
    let emb = rows(tokens.emb.view());
    let f = affine(h, &p.down);
    let q = affine(&f, &p.cross.wq);
    let k = affine(&emb, &p.cross.wk);
    let v = affine(&emb, &p.cross.wv);
    let n = emb.len();
    let mut a = vec![vec![0.0; n]; l];
    let mut fp = f.clone();
    for t in 0..l {
        let live: Vec<usize> = (0..n).filter(|&i| tokens.valid[i]).collect();
        let logits: Vec<f64> =
            live.iter().map(|&i| (0..d_m).map(|c| q[t][c] * k[i][c]).sum::<f64>() / (d_m as f64).sqrt()).collect();
        let w = softmax(&logits);
        for (j, &i) in live.iter().enumerate() {
            a[t][i] = w[j];
            for c in 0..d_m {
                fp[t][c] += w[j] * v[i][c];
            }
        }
    }
    let eos = vec![emb[tokens.eos].clone()];
    let scale = &affine(&eos, &p.ada_scale)[0];
    let shift = &affine(&eos, &p.ada_shift)[0];
    let nv = valid.iter().filter(|&&m| m).count() as f64;
    let mut u = vec![vec![0.0; d_m]; l];
    for c in 0..d_m {
        let mean = (0..l).filter(|&t| valid[t]).map(|t| fp[t][c]).sum::<f64>() / nv;
        let var = (0..l).filter(|&t| valid[t]).map(|t| (fp[t][c] - mean).powi(2)).sum::<f64>() / nv;
        for t in 0..l {
            u[t][c] = (fp[t][c] - mean) / (var + 1e-5).sqrt() * scale[c] + shift[c];
        }
    }
    let mut r = vec![vec![0.0; d_m]; l];
    for i in (0..n).filter(|&i| tokens.valid[i]) {
        let e = vec![emb[i].clone()];
        let z0: Mat = affine(&e, &p.gate.l0).iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let z1: Mat = affine(&z0, &p.gate.l1).iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let omega = softmax(&affine(&z1, &p.gate.l2)[0]);
        let max = (0..l).filter(|&t| valid[t]).map(|t| a[t][i]).fold(f64::NEG_INFINITY, f64::max);
        for t in 0..l {
            let mut hidden = vec![0.0; 2 * d_m];
            for (o, hv) in hidden.iter_mut().enumerate() {
                let mut s = 0.0;
                for (j, w) in omega.iter().enumerate() {
                    s += w * p.pool.b0[[j, o]];
                    for c in 0..d_m {
                        s += w * p.pool.w0[[j, c, o]] * u[t][c];
                    }
                }
                *hv = gelu(s);
            }
            let m = sigmoid(cfg.gamma * (a[t][i] - cfg.beta * max));
            for c in 0..d_m {
                let mut s = 0.0;
                for (j, w) in omega.iter().enumerate() {
                    s += w * p.pool.b1[[j, c]];
                    for (o, hv) in hidden.iter().enumerate() {
                        s += w * p.pool.w1[[j, o, c]] * hv;
                    }
                }
                r[t][c] += m * s;
            }
        }
    }
    for t in (0..l).filter(|&t| !valid[t]) {
        r[t].iter_mut().for_each(|x| *x = 0.0);
    }
    let mut out = affine(&r, &p.up);
    for t in (0..l).filter(|&t| !valid[t]) {
        out[t].iter_mut().for_each(|x| *x = 0.0);
    }
    out
}

pub fn random_block(rng: &mut ChaCha8Rng) -> MoCParams<f64> {
    let cfg = MoCConfig { d_m: 8, pool_size: 3, d_c: 6, ..Default::default() };
    let mut p = MoCParams::init(cfg, 10, rng).unwrap();
    for (_, mut t) in p.named_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    p
}
