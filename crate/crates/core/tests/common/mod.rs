//! Independent reference implementations and the shared check suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Read;

use modelab_core::cells::{
    convlstm_gates, dcb_forward, modernn_cell, AttnChannels, CellState, DcbDataflow, DcbParams, GateParams, GATE_KERNEL,
};
use modelab_core::model::{Model, ModelConfig, RolloutOptions};
use modelab_core::tensor::gradcheck::grad_check;
use modelab_core::training::{loss_l1_l2, AdamW};
use modelab_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn rand_t(r: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rand_vec(r, n, -bound, bound), shape).unwrap()
}

pub fn rand_p(r: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(rand_vec(r, n, -bound, bound), shape).unwrap()
}

/// Values with magnitude in [0.1, 1] and random sign.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..1.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(v, shape).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- scalar reference implementations ---------------------------------

/// Same-padded cross-correlation, written as the textbook seven-deep loop.
pub fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], bias: Option<&[f64]>) -> Vec<f64> {
    let [b_n, ci_n, h_n, w_n] = xs;
    let [co_n, _, k, _] = ws;
    let p = (k / 2) as isize;
    let mut out = vec![0.0; b_n * co_n * h_n * w_n];
    for b in 0..b_n {
        for co in 0..co_n {
            for i in 0..h_n {
                for j in 0..w_n {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..ci_n {
                        for u in 0..k {
                            for v in 0..k {
                                let y = i as isize + u as isize - p;
                                let z = j as isize + v as isize - p;
                                if y < 0 || z < 0 || y >= h_n as isize || z >= w_n as isize {
                                    continue;
                                }
                                acc += w[((co * ci_n + ci) * k + u) * k + v]
                                    * x[((b * ci_n + ci) * h_n + y as usize) * w_n + z as usize];
                            }
                        }
                    }
                    out[((b * co_n + co) * h_n + i) * w_n + j] = acc;
                }
            }
        }
    }
    out
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn oracle_attention(input: &[f64], shape: [usize; 4], weights: &BTreeMap<usize, Tensor>) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for w in weights.values() {
        let r = naive_conv(input, shape, w.data(), dims4(w), None);
        acc = Some(match acc {
            None => r,
            Some(a) => a.iter().zip(&r).map(|(p, q)| p + q).collect(),
        });
    }
    let n = weights.len() as f64;
    acc.unwrap()
        .into_iter()
        .map(|v| sigmoid(if weights.len() > 1 { v * (1.0 / n) } else { v }))
        .collect()
}

fn oracle_reweight(attn: &[f64], attn_ch: usize, target: &[f64], shape: [usize; 4], s: f64) -> Vec<f64> {
    let [b_n, c_n, h, w] = shape;
    let plane = h * w;
    let mut out = vec![0.0; target.len()];
    for b in 0..b_n {
        for c in 0..c_n {
            let ac = if attn_ch == 1 { 0 } else { c };
            for i in 0..plane {
                out[(b * c_n + c) * plane + i] =
                    attn[(b * attn_ch + ac) * plane + i] * target[(b * c_n + c) * plane + i] * s;
            }
        }
    }
    out
}

/// `(x_hat, h_hat, attn_h, attn_x)` of one block, from scalar loops.
pub fn oracle_dcb(x: &Tensor, h: &Tensor, p: &DcbParams) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let shape = dims4(x);
    let ac = p.attn_channels.out_channels(shape[1]);
    let attn_h = oracle_attention(h.data(), shape, &p.w_h);
    let (x_hat, h_hat, attn_x) = match p.dataflow {
        DcbDataflow::Coupled => {
            let x_hat = oracle_reweight(&attn_h, ac, x.data(), shape, p.scale);
            let attn_x = oracle_attention(&x_hat, shape, &p.w_x);
            let h_hat = oracle_reweight(&attn_x, ac, h.data(), shape, p.scale);
            (x_hat, h_hat, attn_x)
        }
        DcbDataflow::Literal => {
            let x_hat = oracle_reweight(&attn_h, ac, h.data(), shape, p.scale);
            let attn_x = oracle_attention(&x_hat, shape, &p.w_x);
            let h_hat = oracle_reweight(&attn_x, ac, &x_hat, shape, p.scale);
            (x_hat, h_hat, attn_x)
        }
    };
    (x_hat, h_hat, attn_h, attn_x)
}

/// `(h, c)` from eight separate convolutions and the scalar gate formulas.
pub fn oracle_gates(x: &[f64], h: &[f64], c_prev: &[f64], shape: [usize; 4], p: &GateParams) -> (Vec<f64>, Vec<f64>) {
    let pre: Vec<Vec<f64>> = (0..4)
        .map(|g| {
            let a = naive_conv(x, shape, p.w_x[g].data(), dims4(&p.w_x[g]), Some(p.bias[g].data()));
            let b = naive_conv(h, shape, p.w_h[g].data(), dims4(&p.w_h[g]), None);
            a.iter().zip(&b).map(|(u, v)| u + v).collect()
        })
        .collect();
    let n = x.len();
    let (mut h_out, mut c_out) = (vec![0.0; n], vec![0.0; n]);
    for e in 0..n {
        let g = pre[0][e].tanh();
        let i = sigmoid(pre[1][e]);
        let f = sigmoid(pre[2][e]);
        let o = sigmoid(pre[3][e]);
        c_out[e] = f * c_prev[e] + i * g;
        h_out[e] = o * c_out[e].tanh();
    }
    (h_out, c_out)
}

/// AdamW written out term by term.
pub fn oracle_adamw(theta: f64, grads: &[f64], opt: &AdamW) -> f64 {
    let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
        let m_hat = m / (1.0 - opt.beta1.powi(step));
        let v_hat = v / (1.0 - opt.beta2.powi(step));
        th = th - opt.lr * m_hat / (v_hat.sqrt() + opt.eps) - opt.lr * opt.weight_decay * th;
    }
    th
}

// ---- random fixtures --------------------------------------------------

pub fn random_dcb(r: &mut ChaCha8Rng, kernels: &[usize], c: usize, attn: AttnChannels, flow: DcbDataflow, bound: f64) -> DcbParams {
    let out = attn.out_channels(c);
    let make = |r: &mut ChaCha8Rng| -> BTreeMap<usize, Tensor> {
        kernels.iter().map(|&k| (k, rand_p(r, &[out, c, k, k], bound))).collect()
    };
    let w_h = make(r);
    let w_x = make(r);
    let s = r.gen_range(0.5..2.5);
    DcbParams::new(w_h, w_x, s, attn, flow).unwrap()
}

pub fn random_gates(r: &mut ChaCha8Rng, c: usize, bound: f64) -> GateParams {
    let ws = [c, c, GATE_KERNEL, GATE_KERNEL];
    let w = |r: &mut ChaCha8Rng| rand_p(r, &ws, bound);
    let w_x = [w(r), w(r), w(r), w(r)];
    let w_h = [w(r), w(r), w(r), w(r)];
    let bias = [rand_p(r, &[c], 0.5), rand_p(r, &[c], 0.5), rand_p(r, &[c], 0.5), rand_p(r, &[c], 0.5)];
    GateParams::new(w_x, w_h, bias).unwrap()
}

/// Scalar loss that weighs every output element differently.
pub fn project(out: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..out.numel()).map(|i| ((i as f64) * 0.618 + 0.3).sin()).collect();
    Ok(out.hadamard(&Tensor::new(w, out.shape())?)?.sum())
}

// ---- suites -----------------------------------------------------------

/// Largest finite-difference error per operation over `instances` random cases.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Vec<(String, f64)> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: &str, e: f64| {
        let w = worst.entry(name.to_string()).or_insert(0.0);
        *w = w.max(e);
    };
    let h = FD_STEP;
    for inst in 0..instances {
        let mut r = rng(seed.wrapping_add(inst as u64));
        let (b, c) = (2, r.gen_range(1..=3));
        let (hh, ww) = (r.gen_range(3..=6), r.gen_range(3..=6));
        let shape = [b, c, hh, ww];
        let x = rand_t(&mut r, &shape, 1.0);
        let y = rand_t(&mut r, &shape, 1.0);

        // convolution, each argument in turn
        let k = [1, 3, 5][r.gen_range(0..3)];
        let co = r.gen_range(1..=3);
        let w = rand_t(&mut r, &[co, c, k, k], 0.5);
        let bias = rand_t(&mut r, &[co], 0.5);
        note("conv2d.input", grad_check(|t| project(&t.conv2d(&w, Some(&bias))?), &x, h).unwrap());
        note("conv2d.weight", grad_check(|t| project(&x.conv2d(t, Some(&bias))?), &w, h).unwrap());
        note("conv2d.bias", grad_check(|t| project(&x.conv2d(&w, Some(t))?), &bias, h).unwrap());

        // elementwise and reductions
        let big = rand_t(&mut r, &shape, 3.0);
        note("sigmoid", grad_check(|t| project(&t.sigmoid()), &big, h).unwrap());
        note("tanh", grad_check(|t| project(&t.tanh()), &big, h).unwrap());
        note("add", grad_check(|t| project(&t.add(&y)?), &x, h).unwrap());
        note("sub", grad_check(|t| project(&y.sub(t)?), &x, h).unwrap());
        note("hadamard", grad_check(|t| project(&t.hadamard(&y)?), &x, h).unwrap());
        note("hadamard.self", grad_check(|t| project(&t.hadamard(t)?), &x, h).unwrap());
        let s = r.gen_range(-3.0..3.0);
        note("scale", grad_check(|t| project(&t.scale(s)), &x, h).unwrap());
        let nz = away_from_zero(&mut r, &shape);
        note("abs", grad_check(|t| project(&t.abs()), &nz, h).unwrap());
        note("square", grad_check(|t| project(&t.square()), &x, h).unwrap());
        note("sum", grad_check(|t| Ok(t.square().sum()), &x, h).unwrap());
        note("mean", grad_check(|t| Ok(t.square().mean()), &x, h).unwrap());

        // layer norm
        let gamma = rand_t(&mut r, &[c], 1.5);
        let beta = rand_t(&mut r, &[c], 1.0);
        let eps = 1e-5;
        note("layer_norm.x", grad_check(|t| project(&t.layer_norm(&gamma, &beta, eps)?), &x, h).unwrap());
        note("layer_norm.gamma", grad_check(|t| project(&x.layer_norm(t, &beta, eps)?), &gamma, h).unwrap());
        note("layer_norm.beta", grad_check(|t| project(&x.layer_norm(&gamma, t, eps)?), &beta, h).unwrap());

        // shape plumbing
        let axis = r.gen_range(0..4);
        note("concat", grad_check(|t| project(&Tensor::concat(&[y.clone(), t.clone(), t.square()], axis)?), &x, h).unwrap());
        let start = r.gen_range(0..shape[axis]);
        let len = r.gen_range(1..=shape[axis] - start);
        note("narrow", grad_check(|t| project(&t.narrow(axis, start, len)?.square()), &x, h).unwrap());
        note("reshape", grad_check(|t| project(&t.reshape(&[b * c, hh * ww])?.square()), &x, h).unwrap());
        let one = rand_t(&mut r, &[b, 1, hh, ww], 1.0);
        let reps = r.gen_range(1..=4);
        note("repeat_channels", grad_check(|t| project(&t.repeat_channels(reps)?.square()), &one, h).unwrap());

        // loss
        let target = rand_t(&mut r, &shape, 1.0);
        let pred = away_from_zero(&mut r, &shape).add(&target).unwrap();
        note("loss_l1_l2", grad_check(|t| loss_l1_l2(t, &target, 1.0, 0.7), &pred, h).unwrap());

        // detail-context block
        for (name, attn, flow) in [
            ("dcb.coupled", AttnChannels::PerChannel, DcbDataflow::Coupled),
            ("dcb.shared", AttnChannels::Shared, DcbDataflow::Coupled),
            ("dcb.literal", AttnChannels::PerChannel, DcbDataflow::Literal),
        ] {
            let p = random_dcb(&mut r, &[1, 3], c, attn, flow, 0.4);
            let out = |xh: &Tensor, hh: &Tensor, p: &DcbParams| -> Result<Tensor> {
                let (a, bb, _) = dcb_forward(xh, hh, p)?;
                Ok(project(&a)?.add(&project(&bb.scale(0.5))?)?)
            };
            note(name, grad_check(|t| out(t, &y, &p), &x, h).unwrap());
            note(name, grad_check(|t| out(&x, t, &p), &y, h).unwrap());
            for k in [1, 3] {
                note(name, grad_check(|t| {
                    let mut q = p.clone();
                    q.w_h.insert(k, t.clone());
                    out(&x, &y, &q)
                }, &p.w_h[&k].detach(), h).unwrap());
                note(name, grad_check(|t| {
                    let mut q = p.clone();
                    q.w_x.insert(k, t.clone());
                    out(&x, &y, &q)
                }, &p.w_x[&k].detach(), h).unwrap());
            }
        }

        // gates and the full cell
        let gates = random_gates(&mut r, c, 0.2);
        let cprev = rand_t(&mut r, &shape, 1.0);
        let gate_loss = |xh: &Tensor, hh: &Tensor, cc: &Tensor, p: &GateParams| -> Result<Tensor> {
            let st = convlstm_gates(xh, hh, cc, p)?;
            Ok(project(&st.h)?.add(&project(&st.c.scale(0.3))?)?)
        };
        note("convlstm_gates", grad_check(|t| gate_loss(t, &y, &cprev, &gates), &x, h).unwrap());
        note("convlstm_gates", grad_check(|t| gate_loss(&x, t, &cprev, &gates), &y, h).unwrap());
        note("convlstm_gates", grad_check(|t| gate_loss(&x, &y, t, &gates), &cprev, h).unwrap());
        let g = inst % 4;
        note("convlstm_gates", grad_check(|t| {
            let mut q = gates.clone();
            q.w_x[g] = t.clone();
            gate_loss(&x, &y, &cprev, &q)
        }, &gates.w_x[g].detach(), h).unwrap());
        note("convlstm_gates", grad_check(|t| {
            let mut q = gates.clone();
            q.w_h[g] = t.clone();
            gate_loss(&x, &y, &cprev, &q)
        }, &gates.w_h[g].detach(), h).unwrap());
        note("convlstm_gates", grad_check(|t| {
            let mut q = gates.clone();
            q.bias[g] = t.clone();
            gate_loss(&x, &y, &cprev, &q)
        }, &gates.bias[g].detach(), h).unwrap());

        let blocks = vec![
            random_dcb(&mut r, &[1, 3], c, AttnChannels::PerChannel, DcbDataflow::Coupled, 0.4),
            random_dcb(&mut r, &[3], c, AttnChannels::PerChannel, DcbDataflow::Coupled, 0.4),
        ];
        let cell_loss = |xh: &Tensor, st: &CellState, blocks: &[DcbParams], p: &GateParams| -> Result<Tensor> {
            let (next, _) = modernn_cell(xh, st, blocks, p, true)?;
            Ok(project(&next.h)?.add(&project(&next.c.scale(0.3))?)?)
        };
        let state = CellState { h: y.clone(), c: cprev.clone() };
        note("modernn_cell", grad_check(|t| cell_loss(t, &state, &blocks, &gates), &x, h).unwrap());
        note("modernn_cell", grad_check(|t| cell_loss(&x, &CellState { h: t.clone(), c: cprev.clone() }, &blocks, &gates), &y, h).unwrap());
        note("modernn_cell", grad_check(|t| cell_loss(&x, &CellState { h: y.clone(), c: t.clone() }, &blocks, &gates), &cprev, h).unwrap());
        note("modernn_cell", grad_check(|t| {
            let mut q = blocks.clone();
            q[1].w_h.insert(3, t.clone());
            cell_loss(&x, &state, &q, &gates)
        }, &blocks[1].w_h[&3].detach(), h).unwrap());
        note("modernn_cell", grad_check(|t| {
            let mut q = blocks.clone();
            q[0].w_x.insert(1, t.clone());
            cell_loss(&x, &state, &q, &gates)
        }, &blocks[0].w_x[&1].detach(), h).unwrap());
        note("modernn_cell", grad_check(|t| {
            let mut q = gates.clone();
            q.w_h[(g + 1) % 4] = t.clone();
            cell_loss(&x, &state, &blocks, &q)
        }, &gates.w_h[(g + 1) % 4].detach(), h).unwrap());
    }

    // whole unrolled model, teacher forcing mixed with fed-back predictions
    for inst in 0..instances.min(3) {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_channels: 2,
            frame_height: 4,
            frame_width: 4,
            kernel_set: vec![1, 3],
            input_len: 2,
            pred_len: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 100 + inst as u64).unwrap();
        let mut r = rng(seed ^ 0xabc ^ inst as u64);
        let frames = Tensor::new(rand_vec(&mut r, 2 * 4 * 16, 0.0, 1.0), &[2, 4, 1, 4, 4]).unwrap();
        let target = frames.narrow(1, 1, 3).unwrap();
        for name in ["encoder.weight", "layers.0.dcb.0.w_x.3", "layers.1.gates.w_h.f", "layers.0.norm.gamma", "decoder.bias"] {
            let start = model.named_params().into_iter().find(|(n, _)| n == name).unwrap().1.detach();
            let err = grad_check(|t| {
                let mut m = model.clone();
                m.visit_params_mut(|n, p| {
                    if n == name {
                        *p = t.clone();
                    }
                });
                let roll = m.forward_sequence(&frames, &RolloutOptions::train(0.5, 9))?;
                loss_l1_l2(&roll.predictions, &target, 0.0, 1.0)
            }, &start, h).unwrap();
            note("model_rollout", err);
        }
    }
    worst.into_iter().collect()
}

/// Largest absolute deviation from the scalar references per component.
pub fn oracle_suite(cases: usize, seed: u64) -> Vec<(String, f64)> {
    let mut conv = 0.0f64;
    let mut dcb = 0.0f64;
    let mut gates = 0.0f64;
    let mut adam = 0.0f64;
    for case in 0..cases {
        let mut r = rng(seed.wrapping_mul(31).wrapping_add(case as u64));
        conv = conv.max(conv_case(&mut r));
        dcb = dcb.max(dcb_case(&mut r));
        gates = gates.max(gates_case(&mut r));
        adam = adam.max(adamw_case(&mut r));
    }
    vec![
        ("conv2d vs nested loops".into(), conv),
        ("dcb vs scalar composition".into(), dcb),
        ("gates vs separate convolutions".into(), gates),
        ("adamw vs hand formula".into(), adam),
    ]
}

pub fn conv_case(r: &mut ChaCha8Rng) -> f64 {
    let b = r.gen_range(1..=2);
    let ci = r.gen_range(1..=4);
    let co = r.gen_range(1..=4);
    let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let k = [1, 3, 5, 7][r.gen_range(0..4)];
    let x = rand_t(r, &[b, ci, h, w], 1.0);
    let wt = rand_t(r, &[co, ci, k, k], 1.0);
    let bias = rand_t(r, &[co], 1.0);
    let use_bias = r.gen::<bool>();
    let got = x.conv2d(&wt, use_bias.then_some(&bias)).unwrap();
    let want = naive_conv(x.data(), [b, ci, h, w], wt.data(), [co, ci, k, k], use_bias.then_some(bias.data()));
    max_abs_diff(got.data(), &want)
}

pub fn dcb_case(r: &mut ChaCha8Rng) -> f64 {
    let all = [1, 3, 5];
    let mut kernels: Vec<usize> = all.iter().copied().filter(|_| r.gen::<bool>()).collect();
    if kernels.is_empty() {
        kernels.push(3);
    }
    let c = r.gen_range(1..=3);
    let attn = if r.gen::<bool>() { AttnChannels::Shared } else { AttnChannels::PerChannel };
    let flow = if r.gen_range(0..4) == 0 { DcbDataflow::Literal } else { DcbDataflow::Coupled };
    let p = random_dcb(r, &kernels, c, attn, flow, 1.0);
    let shape = [r.gen_range(1..=2), c, r.gen_range(1..=6), r.gen_range(1..=6)];
    let x = rand_t(r, &shape, 1.0);
    let h = rand_t(r, &shape, 1.0);
    let (xh, hh, tr) = dcb_forward(&x, &h, &p).unwrap();
    let (ox, oh, oah, oax) = oracle_dcb(&x, &h, &p);
    [
        max_abs_diff(xh.data(), &ox),
        max_abs_diff(hh.data(), &oh),
        max_abs_diff(tr.attn_h.data(), &oah),
        max_abs_diff(tr.attn_x.data(), &oax),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn gates_case(r: &mut ChaCha8Rng) -> f64 {
    let c = r.gen_range(1..=3);
    let shape = [r.gen_range(1..=2), c, r.gen_range(1..=6), r.gen_range(1..=6)];
    let p = random_gates(r, c, 0.5);
    let x = rand_t(r, &shape, 1.0);
    let h = rand_t(r, &shape, 1.0);
    let cp = rand_t(r, &shape, 1.0);
    let st = convlstm_gates(&x, &h, &cp, &p).unwrap();
    let (oh, oc) = oracle_gates(x.data(), h.data(), cp.data(), shape, &p);
    max_abs_diff(st.h.data(), &oh).max(max_abs_diff(st.c.data(), &oc))
}

pub fn adamw_case(r: &mut ChaCha8Rng) -> f64 {
    let opt = AdamW {
        lr: r.gen_range(1e-4..1e-1),
        beta1: r.gen_range(0.5..0.99),
        beta2: r.gen_range(0.9..0.9999),
        eps: 1e-8,
        weight_decay: r.gen_range(0.0..0.1),
    };
    let n = r.gen_range(1..=6);
    let steps = r.gen_range(1..=8);
    let theta0 = rand_vec(r, n, -2.0, 2.0);
    let grads: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(r, n, -1.0, 1.0)).collect();
    let (mut p, mut m, mut v) = (theta0.clone(), vec![0.0; n], vec![0.0; n]);
    for (t, g) in grads.iter().enumerate() {
        opt.update(&mut p, g, &mut m, &mut v, t as u64 + 1);
    }
    (0..n)
        .map(|i| {
            let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            (p[i] - oracle_adamw(theta0[i], &gi, &opt)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

pub fn random_config(seed: u64) -> ModelConfig {
    let mut r = rng(seed);
    let n = r.gen_range(1..=6);
    let all = [1, 3, 5, 7, 9];
    let mut ks: Vec<usize> = all.iter().copied().filter(|_| r.gen::<bool>()).collect();
    if ks.is_empty() {
        ks.push(3);
    }
    ModelConfig {
        num_layers: r.gen_range(1..=3),
        hidden_channels: n,
        frame_channels: r.gen_range(1..=2),
        frame_height: 4,
        frame_width: 4,
        kernel_set: ks,
        dcb_blocks: r.gen_range(1..=3),
        attn_channels: if r.gen::<bool>() { AttnChannels::Shared } else { AttnChannels::PerChannel },
        use_dcb: r.gen_range(0..4) != 0,
        use_layer_norm: r.gen::<bool>(),
        input_len: 2,
        pred_len: 2,
        ..ModelConfig::default()
    }
}

/// Float count from walking the checkpoint bytes record by record.
pub fn serialized_floats(bytes: &[u8]) -> usize {
    let mut cur = bytes;
    let u32_at = |cur: &mut &[u8]| {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).unwrap();
        u32::from_le_bytes(b) as usize
    };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).unwrap();
    assert_eq!(&magic, b"MDCK");
    assert_eq!(u32_at(&mut cur), 1);
    let json = u32_at(&mut cur);
    cur = &cur[json..];
    let records = u32_at(&mut cur);
    let mut total = 0;
    for _ in 0..records {
        let name = u32_at(&mut cur);
        cur = &cur[name..];
        cur.read_exact(&mut magic).unwrap();
        assert_eq!(&magic, b"MDTN");
        assert_eq!(u32_at(&mut cur), 1);
        let rank = u32_at(&mut cur);
        let n: usize = (0..rank).map(|_| u32_at(&mut cur)).product();
        cur = &cur[8 * n..];
        total += n;
    }
    assert!(cur.is_empty());
    total
}
