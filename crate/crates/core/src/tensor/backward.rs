//! Reverse-mode traversal and the vector-Jacobian product of every op.

use std::collections::{HashMap, HashSet};

use super::kernels;
use super::{Node, Result, Tensor, TensorError};

pub(crate) enum Op {
    Leaf,
    Add {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        a: Tensor,
        factor: f64,
    },
    Ln {
        a: Tensor,
    },
    Sum {
        a: Tensor,
    },
    Mean {
        a: Tensor,
    },
    MatMul {
        a: Tensor,
        b: Tensor,
    },
    BatchMatMul {
        a: Tensor,
        b: Tensor,
        transpose_b: bool,
    },
    Reshape {
        a: Tensor,
    },
    Permute {
        a: Tensor,
        perm: Vec<usize>,
    },
    Softmax {
        a: Tensor,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Tensor,
    },
    Gather {
        table: Tensor,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } => vec![a, b],
            Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::Scale { a, .. }
            | Op::Ln { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a } => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Gather { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Gradients for each parent, in `parents()` order. `None` for parents
    /// that do not require gradients.
    fn vjp(&self, out: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let want = |t: &Tensor| t.requires_grad();
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } => {
                let ga = want(a).then(|| g.to_vec());
                let gb = want(b).then(|| {
                    let mut acc = vec![0.0; b.numel()];
                    if !acc.is_empty() {
                        for chunk in g.chunks(acc.len()) {
                            acc.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    }
                    acc
                });
                vec![ga, gb]
            }
            Op::Mul { a, b } => {
                let ga = want(a).then(|| g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
                let gb = want(b).then(|| g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
                vec![ga, gb]
            }
            Op::Scale { factor, .. } => vec![Some(g.iter().map(|x| x * factor).collect())],
            Op::Ln { a } => vec![Some(g.iter().zip(a.data()).map(|(x, y)| x / y).collect())],
            Op::Sum { a } => vec![Some(vec![g[0]; a.numel()])],
            Op::Mean { a } => vec![Some(vec![g[0] / a.numel() as f64; a.numel()])],
            Op::MatMul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let ga = want(a).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, b.data(), true, 0.0, &mut ga);
                    ga
                });
                let gb = want(b).then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = out.shape[2];
                let ga = want(a).then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC · Bᵀ, where B is k×n (or stored n×k).
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data()[i * k * n..(i + 1) * k * n],
                            !transpose_b,
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = want(b).then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // stored B is n×k: dB = dCᵀ · A
                            kernels::gemm(n, m, k, gi, true, ai, false, 0.0, dst);
                        } else {
                            kernels::gemm(k, m, n, ai, true, gi, false, 0.0, dst);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }
            Op::Reshape { .. } => vec![Some(g.to_vec())],
            Op::Permute { perm, .. } => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(g, &out.shape, &inv);
                vec![Some(back)]
            }
            Op::Softmax { .. } => {
                let n = *out.shape.last().expect("softmax rank");
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), dst) in out.data.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dst[i] = y[i] * (gy[i] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gamma.numel();
                let rows = x.numel() / d;
                let mut gx = want(x).then(|| vec![0.0; x.numel()]);
                let mut ggamma = want(gamma).then(|| vec![0.0; d]);
                let mut gbeta = want(beta).then(|| vec![0.0; d]);
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = ggamma.as_mut() {
                        gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(acc, (a, b))| *acc += a * b);
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        gb.iter_mut().zip(gr).for_each(|(acc, a)| *acc += a);
                    }
                    if let Some(gx) = gx.as_mut() {
                        for i in 0..d {
                            dxhat[i] = gr[i] * gamma.data()[i];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = rstd[r] / d as f64;
                        for i in 0..d {
                            gx[r * d + i] = scale * (d as f64 * dxhat[i] - s1 - hr[i] * s2);
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }
            Op::Gelu { a } => vec![Some(
                g.iter()
                    .zip(a.data())
                    .map(|(gy, &x)| gy * kernels::gelu_derivative(x))
                    .collect(),
            )],
            Op::Gather { table, ids } => {
                let d = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(acc, v)| *acc += v);
                }
                vec![Some(gt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = logits.shape()[1];
                let m = targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= g[0] / m;
                }
                vec![Some(gl)]
            }
        }
    }
}

/// Nodes reachable from `root` through gradient-requiring edges, in
/// topological order (inputs before outputs).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.node().op.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

impl Tensor {
    /// Propagates d(self)/d(node) into the grad slot of every ancestor that
    /// requires gradients. Slots accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NoGradient);
        }
        let order = topo_order(self);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.node();
            let parent_grads = node.op.vjp(node, &g);
            t.accumulate_grad(&g);
            for (p, pg) in node.op.parents().into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}
