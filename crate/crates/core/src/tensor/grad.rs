//! Reverse pass over the recorded graph.

use std::collections::{HashMap, HashSet};

use super::{conv, Node, Op, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Accumulates `d self / d leaf` into the gradient of every trainable
    /// leaf reachable from `self`, which must hold exactly one element.
    ///
    /// Gradients accumulate: calling `backward` twice on the same graph adds
    /// the contributions twice. Use [`Tensor::zero_grad`] on the leaves to
    /// start over.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Gradient(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Gradient("root does not depend on any trainable tensor".into()));
        }

        let order = topo_order(self);
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.node_ptr(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node_ptr()) else { continue };
            match &t.0.op {
                None => {
                    if t.0.trainable {
                        let mut slot = t.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(op) => {
                    for (input, gi) in input_grads(t, op, &g) {
                        if !input.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&input.node_ptr()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.node_ptr(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order DFS; inputs precede their consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.node_ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for input in op.inputs() {
                if input.requires_grad() && !seen.contains(&input.node_ptr()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn input_grads<'a>(out: &Tensor, op: &'a Op, g: &[f64]) -> Vec<(&'a Tensor, Vec<f64>)> {
    let y = out.data();
    match op {
        Op::Conv2d { input, weight, bias, geom } => {
            let want = (
                input.requires_grad(),
                weight.requires_grad(),
                bias.as_ref().is_some_and(|b| b.requires_grad()),
            );
            let grads = conv::backward(input.data(), weight.data(), g, geom, want);
            let mut v = Vec::new();
            if let Some(gi) = grads.input {
                v.push((input, gi));
            }
            if let Some(gw) = grads.weight {
                v.push((weight, gw));
            }
            if let (Some(b), Some(gb)) = (bias.as_ref(), grads.bias) {
                v.push((b, gb));
            }
            v
        }
        Op::Sigmoid(x) => vec![(x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())],
        Op::Tanh(x) => vec![(x, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())],
        Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
        Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => vec![
            (a, g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
            (b, g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
        ],
        Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
        Op::Abs(x) => vec![(
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, v)| if *v > 0.0 { *g } else if *v < 0.0 { -g } else { 0.0 })
                .collect(),
        )],
        Op::Square(x) => vec![(x, g.iter().zip(x.data()).map(|(g, v)| 2.0 * v * g).collect())],
        Op::Sum(x) => vec![(x, vec![g[0]; x.numel()])],
        Op::Mean(x) => vec![(x, vec![g[0] / x.numel() as f64; x.numel()])],
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => layer_norm_grads(x, gamma, beta, normalized, inv_std, g),
        Op::Concat { parts, axis } => {
            let s = out.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut grads: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(p.numel())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (p, gp) in parts.iter().zip(grads.iter_mut()) {
                    let chunk = p.shape()[*axis] * inner;
                    gp.extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            parts.iter().zip(grads).collect()
        }
        Op::Narrow { x, axis, start } => {
            let s = x.shape();
            let len = out.shape()[*axis];
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(x, gx)]
        }
        Op::Reshape(x) => vec![(x, g.to_vec())],
        Op::RepeatChannels(x) => {
            let s = out.shape();
            let (ch, plane) = (s[1], s[2] * s[3]);
            let mut gx = vec![0.0; x.numel()];
            for b in 0..s[0] {
                let dst = &mut gx[b * plane..(b + 1) * plane];
                for c in 0..ch {
                    let src = &g[(b * ch + c) * plane..(b * ch + c + 1) * plane];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![(x, gx)]
        }
    }
}

fn layer_norm_grads<'a>(
    x: &'a Tensor,
    gamma: &'a Tensor,
    beta: &'a Tensor,
    normalized: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> Vec<(&'a Tensor, Vec<f64>)> {
    let s = x.shape();
    let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let per = ch * plane;
    let n = per as f64;
    let mut gx = vec![0.0; x.numel()];
    let mut gg = vec![0.0; ch];
    let mut gb = vec![0.0; ch];
    let mut dn = vec![0.0; per];
    for b in 0..batch {
        let gs = &g[b * per..(b + 1) * per];
        let ns = &normalized[b * per..(b + 1) * per];
        for c in 0..ch {
            let gamma_c = gamma.data()[c];
            for i in c * plane..(c + 1) * plane {
                dn[i] = gs[i] * gamma_c;
                gg[c] += gs[i] * ns[i];
                gb[c] += gs[i];
            }
        }
        let sum_dn: f64 = dn.iter().sum();
        let sum_dn_n: f64 = dn.iter().zip(ns).map(|(d, n)| d * n).sum();
        let r = inv_std[b] / n;
        for i in 0..per {
            gx[b * per + i] = r * (n * dn[i] - sum_dn - ns[i] * sum_dn_n);
        }
    }
    vec![(x, gx), (gamma, gg), (beta, gb)]
}
