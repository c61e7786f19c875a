//! Differentiable operations. Each returns a new graph node.

use super::backward::Op;
use super::kernels;
use super::{Result, Tensor, TensorError};

fn rank_error(op: &'static str, expected: &'static str, t: &Tensor) -> TensorError {
    TensorError::BadRank {
        op,
        expected,
        got: t.shape().to_vec(),
    }
}

/// Elementwise sum. `b` may broadcast over the leading axes of `a` when its
/// shape is a suffix of `a`'s shape (a bias row, a position table, ...).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    let block = b.numel();
    let mut out = a.data().to_vec();
    if block > 0 {
        for chunk in out.chunks_mut(block) {
            chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }
    Ok(Tensor::from_parts(
        out,
        sa.to_vec(),
        Op::Add {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

/// Elementwise product of equal shapes.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(
        out,
        a.shape().to_vec(),
        Op::Mul {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let out = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_parts(out, a.shape().to_vec(), Op::Scale { a: a.clone(), factor })
}

/// Natural logarithm, elementwise.
pub fn ln(a: &Tensor) -> Tensor {
    let out = a.data().iter().map(|x| x.ln()).collect();
    Tensor::from_parts(out, a.shape().to_vec(), Op::Ln { a: a.clone() })
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let s = a.data().iter().sum();
    Tensor::from_parts(vec![s], vec![], Op::Sum { a: a.clone() })
}

/// Mean of all elements, as a scalar.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Err(TensorError::EmptyDimension { op: "mean" });
    }
    let s: f64 = a.data().iter().sum();
    Ok(Tensor::from_parts(
        vec![s / a.numel() as f64],
        vec![],
        Op::Mean { a: a.clone() },
    ))
}

/// Matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(rank_error("matmul", "a 2-D left operand", a));
    }
    if b.shape().len() != 2 {
        return Err(rank_error("matmul", "a 2-D right operand", b));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_parts(
        out,
        vec![m, n],
        Op::MatMul {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

/// Batched matrix product over the leading axis.
///
/// `a: [batch, m, k]`; `b: [batch, k, n]`, or `[batch, n, k]` when
/// `transpose_b` is set.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    if a.shape().len() != 3 {
        return Err(rank_error("bmm", "a 3-D left operand", a));
    }
    if b.shape().len() != 3 {
        return Err(rank_error("bmm", "a 3-D right operand", b));
    }
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (kb, n) = if transpose_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if b.shape()[0] != batch || kb != k {
        return Err(TensorError::ShapeMismatch {
            op: "bmm",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        kernels::gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            transpose_b,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(
        out,
        vec![batch, m, n],
        Op::BatchMatMul {
            a: a.clone(),
            b: b.clone(),
            transpose_b,
        },
    ))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "reshape",
            left: a.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(Tensor::from_parts(
        a.data().to_vec(),
        shape.to_vec(),
        Op::Reshape { a: a.clone() },
    ))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let mut seen = vec![false; a.shape().len()];
    let valid = perm.len() == seen.len()
        && perm
            .iter()
            .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
    if !valid {
        return Err(TensorError::ShapeMismatch {
            op: "permute",
            left: a.shape().to_vec(),
            right: perm.to_vec(),
        });
    }
    let (out, shape) = kernels::permute(a.data(), a.shape(), perm);
    Ok(Tensor::from_parts(
        out,
        shape,
        Op::Permute {
            a: a.clone(),
            perm: perm.to_vec(),
        },
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(rank_error("transpose", "a 2-D tensor", a));
    }
    permute(a, &[1, 0])
}

/// Softmax over the last axis, stabilized by subtracting each row's max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| rank_error("softmax_rows", "at least one axis", x))?;
    if n == 0 {
        return Err(TensorError::EmptyDimension { op: "softmax_rows" });
    }
    let mut out = x.data().to_vec();
    out.chunks_mut(n).for_each(kernels::softmax_in_place);
    Ok(Tensor::from_parts(
        out,
        x.shape().to_vec(),
        Op::Softmax { a: x.clone() },
    ))
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| rank_error("layer_norm", "at least one axis", x))?;
    if d == 0 {
        return Err(TensorError::EmptyDimension { op: "layer_norm" });
    }
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for i in 0..d {
            let h = (row[i] - mean) * inv;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok(Tensor::from_parts(
        out,
        x.shape().to_vec(),
        Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            rstd,
        },
    ))
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let out = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::from_parts(out, x.shape().to_vec(), Op::Gelu { a: x.clone() })
}

/// Gathers rows of a 2-D `table`. The backward pass scatter-adds, so
/// repeated ids accumulate.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.shape().len() != 2 {
        return Err(rank_error("embedding_lookup", "a 2-D table", table));
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding_lookup",
                index: id,
                size: rows,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_parts(
        out,
        vec![ids.len(), d],
        Op::Gather {
            table: table.clone(),
            ids: ids.to_vec(),
        },
    ))
}

/// Mean over rows of `-log softmax(logits)[target]`, computed in the fused
/// log-sum-exp form.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(rank_error("cross_entropy", "2-D logits", logits));
    }
    let (m, c) = (logits.shape()[0], logits.shape()[1]);
    if m == 0 {
        return Err(TensorError::EmptyBatch { op: "cross_entropy" });
    }
    if targets.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: t,
                size: c,
            });
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        kernels::softmax_in_place(&mut probs[r * c..(r + 1) * c]);
    }
    Ok(Tensor::from_parts(
        vec![total / m as f64],
        vec![],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            probs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap().data(), b.data());
        let r = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[2.0, 0.0]])).unwrap();
        assert!(close(s.data()[0], 0.8808, 1e-4));
        assert!(close(s.data()[1], 0.1192, 1e-4));
    }

    #[test]
    fn layer_norm_examples() {
        let x = t(&[&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]]);
        let ones = Tensor::new(vec![1.0; 3], &[3]).unwrap();
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!(y.data()[..3].iter().all(|&v| v == 0.0));
        let row = &y.data()[3..];
        let mean: f64 = row.iter().sum::<f64>() / 3.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);

        let b = Tensor::new(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        let y = layer_norm(&x, &zeros, &b, 1e-12).unwrap();
        assert_eq!(&y.data()[3..], b.data());

        let empty = Tensor::zeros(&[2, 0]);
        assert_eq!(
            layer_norm(&empty, &Tensor::zeros(&[0]), &Tensor::zeros(&[0]), 1e-12).unwrap_err(),
            TensorError::EmptyDimension { op: "layer_norm" }
        );
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&Tensor::new(vec![0.0, 1.0, 20.0], &[3]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!(close(y.data()[1], 0.8412, 1e-3));
        assert!(close(y.data()[2], 20.0, 1e-9));
    }

    #[test]
    fn embedding_lookup_rows_and_range() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(embedding_lookup(&table, &[0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(
            embedding_lookup(&table, &[3]).unwrap_err(),
            TensorError::IndexOutOfRange {
                op: "embedding_lookup",
                index: 3,
                size: 3
            }
        );
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&t(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!(close(l.item(), std::f64::consts::LN_2, 1e-12));
        let l = cross_entropy(&t(&[&[30.0, -30.0]]), &[0]).unwrap();
        assert!(l.item() < 1e-20);
        let l = cross_entropy(&t(&[&[2.0, 0.0]]), &[0]).unwrap();
        assert!(close(l.item(), (1.0 + (-2.0f64).exp()).ln(), 1e-12));
        assert!(close(l.item(), 0.1269, 1e-4));
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[0, 2]), &[]),
            Err(TensorError::EmptyBatch { .. })
        ));
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = Tensor::new((0..12).map(f64::from).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::new((0..12).map(|v| f64::from(v) * 0.5).collect(), &[2, 3, 2]).unwrap();
        let c = bmm(&a, &b, false).unwrap();
        for i in 0..2 {
            let ai = Tensor::new(a.data()[i * 6..(i + 1) * 6].to_vec(), &[2, 3]).unwrap();
            let bi = Tensor::new(b.data()[i * 6..(i + 1) * 6].to_vec(), &[3, 2]).unwrap();
            assert_eq!(&c.data()[i * 4..(i + 1) * 4], matmul(&ai, &bi).unwrap().data());
        }
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        assert_eq!(bmm(&a, &bt, true).unwrap().data(), c.data());
    }
}
