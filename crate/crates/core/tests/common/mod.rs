//! Reference implementations shared by the integration tests. Nothing here
//! calls into the optimized kernels.
#![allow(dead_code)]

use lowdose::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values with every entry at least `gap` away from each point in
/// `kinks`.
pub fn away_from(
    rng: &mut impl Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    gap: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect()
}

/// Distinct values spaced by at least `spacing`, in random order, so that no
/// small perturbation can reorder them.
pub fn spaced_distinct(rng: &mut impl Rng, n: usize, spacing: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * spacing - 0.5 * n as f64 * spacing)
        .collect();
    v.shuffle(rng);
    v
}

/// Direct nested-loop cross-correlation with zero padding, NCHW / OIHW.
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, [n, cout, oh, ow])
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`; zero when both vanish.
pub fn rel_err_inf(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Scalar objective: `build` output contracted with fixed random weights, so
/// every Jacobian row is exercised.
fn objective(
    inputs: &[Tensor<f64>],
    weights: &[f64],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> lowdose::Result<Var>,
    track: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let y = build(&mut g, &vars).unwrap();
    let loss = g.weighted_sum(y, weights.to_vec()).unwrap();
    let value = g.value(loss).data()[0];
    if !track {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    (value, grads)
}

/// Worst relative error over all inputs between backprop and central
/// differences with step `eps`.
pub fn gradient_error(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> lowdose::Result<Var>,
    eps: f64,
    seed: u64,
) -> f64 {
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = build(&mut g, &vars).unwrap();
        g.value(y).numel()
    };
    let weights = uniform(&mut rng(seed ^ 0x5eed), out_len, -1.0, 1.0);
    let (_, analytic) = objective(inputs, &weights, &build, true);
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        let mut probe = inputs.to_vec();
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (fp, _) = objective(&probe, &weights, &build, false);
            probe[k].data_mut()[i] = orig - eps;
            let (fm, _) = objective(&probe, &weights, &build, false);
            probe[k].data_mut()[i] = orig;
            *n = (fp - fm) / (2.0 * eps);
        }
        worst = worst.max(rel_err_inf(a, &numeric));
    }
    worst
}

/// A random 4-D shape no larger than 2x4x8x8 with even spatial extents.
pub fn small_shape(rng: &mut impl Rng) -> [usize; 4] {
    [
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        2 * rng.gen_range(1..=4),
        2 * rng.gen_range(1..=4),
    ]
}

pub fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

pub const FD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

/// Gradient error of every differentiable op on fresh random inputs.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let gap = 4.0 * FD_EPS;

    let s = small_shape(&mut r);
    let cout = r.gen_range(1..=4);
    let k = *[1usize, 3, 5].choose(&mut r).unwrap();
    let pad = r.gen_range(0..=k / 2);
    let stride = if s[2] + 2 * pad > k && s[3] + 2 * pad > k {
        r.gen_range(1..=2)
    } else {
        1
    };
    let pad = if s[2] + 2 * pad < k || s[3] + 2 * pad < k {
        k / 2
    } else {
        pad
    };
    let x = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    let ws = [cout, s[1], k, k];
    let w = tensor(&ws, uniform(&mut r, numel(&ws), -1.0, 1.0));
    let b = tensor(&[cout], uniform(&mut r, cout, -1.0, 1.0));
    out.push((
        "conv2d",
        gradient_error(
            &[x, w, b],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
            FD_EPS,
            seed,
        ),
    ));

    let s = small_shape(&mut r);
    let x = tensor(&s, away_from(&mut r, numel(&s), -1.0, 1.0, &[0.0], gap));
    out.push((
        "relu",
        gradient_error(&[x], |g, v| Ok(g.relu(v[0])), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let x = tensor(
        &s,
        away_from(&mut r, numel(&s), -0.5, 1.5, &[0.0, 1.0], gap),
    );
    out.push((
        "clamp01",
        gradient_error(&[x], |g, v| Ok(g.clamp01(v[0])), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let x = tensor(&s, spaced_distinct(&mut r, numel(&s), gap));
    out.push((
        "max_pool2",
        gradient_error(&[x], |g, v| g.max_pool2(v[0]), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let x = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    out.push((
        "upsample2",
        gradient_error(&[x], |g, v| g.upsample2(v[0]), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let x = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    let gamma = tensor(&[s[1]], uniform(&mut r, s[1], 0.5, 1.5));
    let beta = tensor(&[s[1]], uniform(&mut r, s[1], -0.5, 0.5));
    out.push((
        "instance_norm",
        gradient_error(
            &[x, gamma, beta],
            |g, v| g.instance_norm(v[0], v[1], v[2], lowdose::tensor::NORM_EPS),
            FD_EPS,
            seed,
        ),
    ));

    let s = small_shape(&mut r);
    let a = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    let b = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    out.push((
        "add",
        gradient_error(&[a, b], |g, v| g.add(v[0], v[1]), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let s2 = [s[0], r.gen_range(1..=4), s[2], s[3]];
    let a = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    let b = tensor(&s2, uniform(&mut r, numel(&s2), -1.0, 1.0));
    out.push((
        "concat",
        gradient_error(&[a, b], |g, v| g.concat(v[0], v[1]), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let x = tensor(&s, uniform(&mut r, numel(&s), -1.0, 1.0));
    out.push((
        "sum",
        gradient_error(&[x], |g, v| Ok(g.sum(v[0])), FD_EPS, seed),
    ));

    let s = small_shape(&mut r);
    let a = uniform(&mut r, numel(&s), 0.0, 1.0);
    let offsets = away_from(&mut r, numel(&s), -0.5, 0.5, &[0.0], gap);
    let b: Vec<f64> = a.iter().zip(&offsets).map(|(a, o)| a + o).collect();
    out.push((
        "l1_loss",
        gradient_error(
            &[tensor(&s, a), tensor(&s, b)],
            |g, v| g.l1_loss(v[0], v[1]),
            FD_EPS,
            seed,
        ),
    ));

    // smooth encoder/decoder fragment ending in the L1 objective; the target
    // sits far away so no residual changes sign
    let s = [r.gen_range(1..=2), 1, 8, 8];
    let c = r.gen_range(2..=4);
    let x = tensor(&s, uniform(&mut r, numel(&s), 0.0, 1.0));
    let w1 = tensor(&[c, 1, 3, 3], uniform(&mut r, 9 * c, -1.0, 1.0));
    let gm = tensor(&[c], uniform(&mut r, c, 0.5, 1.5));
    let bt = tensor(&[c], uniform(&mut r, c, -0.5, 0.5));
    let w2 = tensor(&[1, c + 1, 3, 3], uniform(&mut r, 9 * (c + 1), -1.0, 1.0));
    let big = [s[0], 1, 16, 16];
    let target = tensor(&big, vec![10.0; numel(&big)]);
    out.push((
        "composition",
        gradient_error(
            &[x, w1, gm, bt, w2, target],
            |g, v| {
                let h = g.conv2d(v[0], v[1], None, 1, 1)?;
                let h = g.instance_norm(h, v[2], v[3], lowdose::tensor::NORM_EPS)?;
                let up = g.upsample2(h)?;
                let skip = g.upsample2(v[0])?;
                let cat = g.concat(up, skip)?;
                let y = g.conv2d(cat, v[4], None, 1, 1)?;
                let y = g.add(y, skip)?;
                g.l1_loss(y, v[5])
            },
            FD_EPS,
            seed,
        ),
    ));
    out
}

/// Max absolute difference between the graph conv and the nested-loop
/// reference on one random geometry, plus that geometry for diagnostics.
pub fn conv_oracle_case(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let big = seed % 5 == 0;
    let n = r.gen_range(1..=2);
    let cin = r.gen_range(1..=if big { 8 } else { 4 });
    let cout = r.gen_range(1..=if big { 8 } else { 5 });
    let (h, w) = if big {
        (r.gen_range(40..=120), r.gen_range(40..=120))
    } else {
        (r.gen_range(1..=12), r.gen_range(1..=12))
    };
    let k = *[1usize, 3, 5].choose(&mut r).unwrap();
    let stride = r.gen_range(1..=3);
    let mut pad = r.gen_range(0..=k / 2);
    if h + 2 * pad < k || w + 2 * pad < k {
        pad = k / 2;
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return conv_oracle_case(seed.wrapping_add(1000));
    }
    let xs = [n, cin, h, w];
    let ws = [cout, cin, k, k];
    let x = uniform(&mut r, numel(&xs), -1.0, 1.0);
    let wv = uniform(&mut r, numel(&ws), -1.0, 1.0);
    let b = uniform(&mut r, cout, -1.0, 1.0);
    let (reference, ys) = naive_conv2d(&x, xs, &wv, ws, Some(&b), stride, pad);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(tensor(&xs, x), false);
    let wvv = g.leaf(tensor(&ws, wv), false);
    let bv = g.leaf(tensor(&[cout], b), false);
    let y = g.conv2d(xv, wvv, Some(bv), stride, pad).unwrap();
    assert_eq!(g.value(y).shape(), &ys[..]);
    let err = g
        .value(y)
        .data()
        .iter()
        .zip(&reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    (err, format!("x {xs:?} w {ws:?} stride {stride} pad {pad}"))
}
