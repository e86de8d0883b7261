//! Shared test oracles: central finite differences and naive reference kernels.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ultravar::tensor::{Tape, Tensor, Var};
use ultravar::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinked ops (relu, clamp) stay
/// differentiable under a finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.05..1.5);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.item(out).unwrap() as f64
}

/// Worst `|analytic − fd| / max(1, |fd|)` over every element of every input,
/// using central differences with step `h`.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, h: f32) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[i]);
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h as f64);
            let err = (analytic[j] as f64 - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights so
/// every output element influences the checked gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let shape = tape.shape(x).to_vec();
    let w = uniform(&shape, -1.0, 1.0, &mut r);
    let wv = tape.leaf(&w)?;
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

/// Direct six-nested-loop cross-correlation, accumulated in f64.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

pub struct GradReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Finite-difference check of every differentiable tape operation on ten
/// random small instances each.
pub fn gradient_suite() -> Vec<GradReport> {
    const H: f32 = 1e-3;
    const N: usize = 10;
    let mut reports = Vec::new();
    let mut run = |op: &'static str, case: &mut dyn FnMut(u64) -> f64| {
        let worst = (0..N as u64).map(|s| case(s)).fold(0.0, f64::max);
        reports.push(GradReport { op, instances: N, worst });
    };

    run("matmul", &mut |s| {
        let mut r = rng(100 + s);
        let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = uniform(&[4, 2], -1.0, 1.0, &mut r);
        grad_check(&[a, b], &|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, s) }, H)
    });
    run("add/sub/mul/scale", &mut |s| {
        let mut r = rng(200 + s);
        let a = uniform(&[2, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[2, 3], -1.0, 1.0, &mut r);
        grad_check(&[a, b], &|t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.sub(x, v[1])?;
            let z = t.mul(y, v[1])?;
            let z = t.scale(z, 1.7)?;
            weighted_sum(t, z, s)
        }, H)
    });
    run("add_row", &mut |s| {
        let mut r = rng(300 + s);
        let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = uniform(&[4], -1.0, 1.0, &mut r);
        grad_check(&[x, b], &|t, v| { let y = t.add_row(v[0], v[1])?; weighted_sum(t, y, s) }, H)
    });
    run("channel_add/channel_mul", &mut |s| {
        let mut r = rng(400 + s);
        let x = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
        let a = uniform(&[2, 3], -1.0, 1.0, &mut r);
        let c = uniform(&[3], -1.0, 1.0, &mut r);
        grad_check(&[x, a, c], &|t, v| {
            let y = t.channel_mul(v[0], v[1])?;
            let y = t.channel_add(y, v[2])?;
            weighted_sum(t, y, s)
        }, H)
    });
    run("conv2d", &mut |s| {
        let mut r = rng(500 + s);
        let stride = 1 + (s as usize % 2);
        let pad = s as usize % 2;
        let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        grad_check(&[x, w], &|t, v| { let y = t.conv2d(v[0], v[1], stride, pad)?; weighted_sum(t, y, s) }, H)
    });
    run("upsample_nearest", &mut |s| {
        let mut r = rng(600 + s);
        let x = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
        grad_check(&[x], &|t, v| { let y = t.upsample_nearest(v[0], 2)?; weighted_sum(t, y, s) }, H)
    });
    run("bilinear_resize", &mut |s| {
        let mut r = rng(700 + s);
        let (oh, ow) = [(7, 5), (2, 3), (1, 1), (8, 8), (3, 6)][s as usize % 5];
        let x = uniform(&[2, 4, 4], -1.0, 1.0, &mut r);
        grad_check(&[x], &|t, v| { let y = t.bilinear_resize(v[0], oh, ow)?; weighted_sum(t, y, s) }, H)
    });
    run("layer_norm", &mut |s| {
        let mut r = rng(800 + s);
        let x = uniform(&[3, 6], -2.0, 2.0, &mut r);
        let g = uniform(&[6], 0.5, 1.5, &mut r);
        let b = uniform(&[6], -0.5, 0.5, &mut r);
        grad_check(&[x, g, b], &|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(t, y, s) }, H)
    });
    run("gelu", &mut |s| {
        let mut r = rng(900 + s);
        let x = uniform(&[10], -3.0, 3.0, &mut r);
        grad_check(&[x], &|t, v| { let y = t.gelu(v[0])?; weighted_sum(t, y, s) }, H)
    });
    run("relu", &mut |s| {
        let mut r = rng(1000 + s);
        let x = away_from_zero(&[10], &mut r);
        grad_check(&[x], &|t, v| { let y = t.relu(v[0])?; weighted_sum(t, y, s) }, H)
    });
    run("sigmoid", &mut |s| {
        let mut r = rng(1100 + s);
        let x = uniform(&[10], -4.0, 4.0, &mut r);
        grad_check(&[x], &|t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y, s) }, H)
    });
    run("clamp", &mut |s| {
        let mut r = rng(1200 + s);
        let x = Tensor::from_fn(&[10], |_| {
            // keep clear of the 0 and 1 boundaries
            let u: f32 = r.random_range(0.0..1.0);
            if u < 0.3 { r.random_range(-1.0..-0.05) } else if u < 0.7 { r.random_range(0.05..0.95) } else { r.random_range(1.05..2.0) }
        });
        grad_check(&[x], &|t, v| { let y = t.clamp(v[0], 0.0, 1.0)?; weighted_sum(t, y, s) }, H)
    });
    run("sum/mean/mse", &mut |s| {
        let mut r = rng(1300 + s);
        let a = uniform(&[2, 5], -1.0, 1.0, &mut r);
        let b = uniform(&[2, 5], -1.0, 1.0, &mut r);
        grad_check(&[a, b], &|t, v| {
            let m = t.mse(v[0], v[1])?;
            let s1 = t.sum(v[0])?;
            let m2 = t.mean(v[1])?;
            let x = t.add(m, s1)?;
            t.add(x, m2)
        }, H)
    });
    run("spatial_mean", &mut |s| {
        let mut r = rng(1400 + s);
        let x = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut r);
        grad_check(&[x], &|t, v| { let y = t.spatial_mean(v[0])?; weighted_sum(t, y, s) }, H)
    });
    run("gather/embedding/reshape/concat", &mut |s| {
        let mut r = rng(1500 + s);
        let table = uniform(&[4, 3], -1.0, 1.0, &mut r);
        let other = uniform(&[2, 3], -1.0, 1.0, &mut r);
        let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        grad_check(&[table, other], &|t, v| {
            let e = t.embedding(v[0], &ids)?;
            let c = t.concat(&[e, v[1]])?;
            let flat = t.reshape(c, &[21])?;
            let map: Vec<Option<usize>> = (0..24).map(|i| if i % 4 == 3 { None } else { Some((i * 5) % 21) }).collect();
            let g = t.gather(flat, map, &[6, 4])?;
            weighted_sum(t, g, s)
        }, H)
    });
    run("softmax_cross_entropy", &mut |s| {
        let mut r = rng(1600 + s);
        let logits = uniform(&[4, 16], -2.0, 2.0, &mut r);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..16)).collect();
        grad_check(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &targets), H)
    });
    run("attention", &mut |s| {
        let mut r = rng(1700 + s);
        let (batch, len, d, heads) = (2, 5, 8, 2);
        let q = uniform(&[batch * len, d], -1.0, 1.0, &mut r);
        let k = uniform(&[batch * len, d], -1.0, 1.0, &mut r);
        let v = uniform(&[batch * len, d], -1.0, 1.0, &mut r);
        let scale_of = [0usize, 1, 1, 2, 2];
        let mask: std::rc::Rc<Vec<bool>> = std::rc::Rc::new(
            (0..len * len).map(|i| scale_of[i / len] >= scale_of[i % len]).collect(),
        );
        grad_check(&[q, k, v], &|t, vv| {
            let y = t.attention(vv[0], vv[1], vv[2], batch, heads, mask.clone())?;
            weighted_sum(t, y, s)
        }, H)
    });
    run("rotary", &mut |s| {
        let mut r = rng(1800 + s);
        let x = uniform(&[4, 8], -1.0, 1.0, &mut r);
        let pos = vec![0, 3, 7, 12];
        grad_check(&[x], &|t, v| { let y = t.rotary(v[0], &pos, 2, 10000.0)?; weighted_sum(t, y, s) }, H)
    });
    run("conv->layer_norm->gelu->sum chain", &mut |s| {
        let mut r = rng(1900 + s);
        let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
        let g = uniform(&[48], 0.5, 1.5, &mut r);
        let b = uniform(&[48], -0.5, 0.5, &mut r);
        grad_check(&[x, w, g, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            // normalize over each sample's full feature map
            let y = t.reshape(y, &[1, 48])?;
            let y = t.layer_norm(y, v[2], v[3], 1e-5)?;
            let y = t.gelu(y)?;
            weighted_sum(t, y, s)
        }, H)
    });
    reports
}

/// Finite-difference check of parameter gradients through a [`Graph`].
/// Checks at most `per_param` evenly spaced entries of each named tensor.
pub fn param_grad_check(
    store: &ultravar::nn::ParamStore,
    names: &[&str],
    f: &dyn Fn(&mut ultravar::nn::Graph) -> Result<Var>,
    h: f32,
    per_param: usize,
) -> f64 {
    use ultravar::nn::Graph;
    let value = |s: &ultravar::nn::ParamStore| -> f64 {
        let mut g = Graph::train(s, 0);
        let out = f(&mut g).unwrap();
        g.tape.item(out).unwrap() as f64
    };
    let mut g = Graph::train(store, 0);
    let out = f(&mut g).unwrap();
    let grads = g.tape.backward(out).unwrap();
    let analytic: std::collections::HashMap<String, Vec<f32>> = g.tape.param_grads(&grads).into_iter().collect();
    let mut worst = 0.0f64;
    for &name in names {
        let n = store.get(name).unwrap().numel();
        let step = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h as f64);
            let a = analytic.get(name).map(|v| v[j] as f64).unwrap_or(0.0);
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

/// Exhaustive nearest codebook row, lowest index on ties.
pub fn brute_nearest(cb: &[f32], c: usize, v: &[f32]) -> usize {
    let k = cb.len() / c;
    let dists: Vec<f64> = (0..k)
        .map(|i| (0..c).map(|j| ((cb[i * c + j] - v[j]) as f64).powi(2)).sum())
        .collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

/// Hand-rolled two-scale residual quantizer with identity φ: the 2→1 resize is
/// the mean of the four positions and the 1→2 resize is a broadcast.
pub fn two_scale_oracle(f: &[f32], cb: &[f32], c: usize) -> (usize, Vec<usize>, Vec<f32>) {
    let mean: Vec<f32> = (0..c)
        .map(|ch| ((0..4).map(|p| f[ch * 4 + p] as f64).sum::<f64>() / 4.0) as f32)
        .collect();
    let k1 = brute_nearest(cb, c, &mean);
    let mut idx2 = Vec::new();
    let mut fhat = vec![0.0f32; c * 4];
    for p in 0..4 {
        let r: Vec<f32> = (0..c).map(|ch| f[ch * 4 + p] - cb[k1 * c + ch]).collect();
        let k2 = brute_nearest(cb, c, &r);
        idx2.push(k2);
        for ch in 0..c {
            fhat[ch * 4 + p] = cb[k1 * c + ch] + cb[k2 * c + ch];
        }
    }
    (k1, idx2, fhat)
}
