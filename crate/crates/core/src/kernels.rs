//! Numeric kernels on flat row-major matrices.  Shared by the plan executor
//! and by constant folding in the graph builder.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{Cmp, Op, ZERO_PICK};
use crate::scene::Shape;

#[inline]
fn bcast(x: &[f64], i: usize) -> f64 {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
    }
}

pub(crate) fn matmul(a: &[f64], sa: Shape, b: &[f64], sb: Shape, out: &mut [f64]) {
    let (n, k, m) = (sa.rows, sa.cols, sb.cols);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        row.fill(0.0);
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            for j in 0..m {
                row[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn det(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => DMatrix::from_row_slice(n, n, a).determinant(),
    }
}

pub(crate) fn inverse(a: &[f64], n: usize, out: &mut [f64]) -> Result<()> {
    match n {
        1 => {
            if a[0] == 0.0 {
                return Err(Error::Numerical("inverse of a singular 1x1 matrix".into()));
            }
            out[0] = 1.0 / a[0];
        }
        2 => {
            let d = det(a, 2);
            if d == 0.0 {
                return Err(Error::Numerical("inverse of a singular 2x2 matrix".into()));
            }
            out[0] = a[3] / d;
            out[1] = -a[1] / d;
            out[2] = -a[2] / d;
            out[3] = a[0] / d;
        }
        3 => {
            let d = det(a, 3);
            if d == 0.0 {
                return Err(Error::Numerical("inverse of a singular 3x3 matrix".into()));
            }
            let inv = 1.0 / d;
            out[0] = (a[4] * a[8] - a[5] * a[7]) * inv;
            out[1] = (a[2] * a[7] - a[1] * a[8]) * inv;
            out[2] = (a[1] * a[5] - a[2] * a[4]) * inv;
            out[3] = (a[5] * a[6] - a[3] * a[8]) * inv;
            out[4] = (a[0] * a[8] - a[2] * a[6]) * inv;
            out[5] = (a[2] * a[3] - a[0] * a[5]) * inv;
            out[6] = (a[3] * a[7] - a[4] * a[6]) * inv;
            out[7] = (a[1] * a[6] - a[0] * a[7]) * inv;
            out[8] = (a[0] * a[4] - a[1] * a[3]) * inv;
        }
        _ => {
            let m = DMatrix::from_row_slice(n, n, a)
                .try_inverse()
                .ok_or_else(|| Error::Numerical(format!("inverse of a singular {n}x{n} matrix")))?;
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = m[(i, j)];
                }
            }
        }
    }
    Ok(())
}

/// Symmetrise, eigendecompose and clamp negative eigenvalues to zero.  The
/// result is exactly symmetric (upper triangle computed, then mirrored).
pub fn psd_project(m: &[f64], n: usize, out: &mut [f64]) -> Result<()> {
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[i * n + j] + m[j * n + i]));
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in matrix to project".into()));
    }
    let eig = sym
        .clone()
        .try_symmetric_eigen(1e-15, 10_000)
        .ok_or_else(|| Error::Numerical(format!("eigendecomposition of a {n}x{n} block did not converge")))?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = sym[(i, j)];
            }
        }
        return Ok(());
    }
    let q = &eig.eigenvectors;
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, &l) in eig.eigenvalues.iter().enumerate() {
                if l > 0.0 {
                    acc += q[(i, k)] * l * q[(j, k)];
                }
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    Ok(())
}

pub(crate) fn compare(cmp: Cmp, a: f64, b: f64) -> bool {
    match cmp {
        Cmp::Lt => a < b,
        Cmp::Le => a <= b,
        Cmp::Gt => a > b,
        Cmp::Ge => a >= b,
    }
}

/// Applies a pure (context-free) op.  Leaves, JOIN and UNION are handled by
/// the executor.
pub(crate) fn apply(op: &Op, out_shape: Shape, ins: &[&[f64]], shapes: &[Shape], out: &mut [f64]) -> Result<()> {
    match op {
        Op::Const(v) => out[0] = *v,
        Op::Literal(vals) => out.copy_from_slice(vals),
        Op::Zero => out.fill(0.0),
        Op::Add => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = ins[0][i] + ins[1][i];
            }
        }
        Op::Sub => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = ins[0][i] - ins[1][i];
            }
        }
        Op::Neg => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = -ins[0][i];
            }
        }
        Op::Mul => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = bcast(ins[0], i) * bcast(ins[1], i);
            }
        }
        Op::Div => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = bcast(ins[0], i) / bcast(ins[1], i);
            }
        }
        Op::MatMul => matmul(ins[0], shapes[0], ins[1], shapes[1], out),
        Op::Dot => out[0] = ins[0].iter().zip(ins[1]).map(|(a, b)| a * b).sum(),
        Op::Cross => {
            let (a, b) = (ins[0], ins[1]);
            out[0] = a[1] * b[2] - a[2] * b[1];
            out[1] = a[2] * b[0] - a[0] * b[2];
            out[2] = a[0] * b[1] - a[1] * b[0];
        }
        Op::Norm => out[0] = ins[0].iter().map(|a| a * a).sum::<f64>().sqrt(),
        Op::Det => out[0] = det(ins[0], shapes[0].rows),
        Op::Inverse => inverse(ins[0], shapes[0].rows, out)?,
        Op::Transpose => {
            let s = shapes[0];
            for i in 0..s.rows {
                for j in 0..s.cols {
                    out[j * s.rows + i] = ins[0][i * s.cols + j];
                }
            }
        }
        Op::Trace => {
            let n = shapes[0].rows;
            out[0] = (0..n).map(|i| ins[0][i * n + i]).sum();
        }
        Op::Reshape => out.copy_from_slice(ins[0]),
        Op::Row(i) => {
            let c = shapes[0].cols;
            out.copy_from_slice(&ins[0][i * c..(i + 1) * c]);
        }
        Op::Col(j) => {
            let s = shapes[0];
            for i in 0..s.rows {
                out[i] = ins[0][i * s.cols + j];
            }
        }
        Op::Index(i) => {
            let n = out_shape.size();
            out.copy_from_slice(&ins[0][i * n..(i + 1) * n]);
        }
        Op::Stack => {
            for (o, x) in out.iter_mut().zip(ins) {
                *o = x[0];
            }
        }
        Op::Sqrt => unary(ins[0], out, f64::sqrt),
        Op::Log => unary(ins[0], out, f64::ln),
        Op::Exp => unary(ins[0], out, f64::exp),
        Op::Sin => unary(ins[0], out, f64::sin),
        Op::Cos => unary(ins[0], out, f64::cos),
        Op::Select(cmp) => {
            let src = if compare(*cmp, ins[0][0], ins[1][0]) { ins[2] } else { ins[3] };
            out.copy_from_slice(src);
        }
        Op::Gather(picks) => {
            for (o, &p) in out.iter_mut().zip(picks.iter()) {
                *o = if p == ZERO_PICK {
                    0.0
                } else {
                    let (c, f) = crate::expr::unpick(p);
                    ins[c][f]
                };
            }
        }
        Op::Project => psd_project(ins[0], out_shape.rows, out)?,
        Op::Data(_) | Op::Constant(_) | Op::Join(_) | Op::Union(_) => {
            return Err(Error::Internal(format!("{op:?} is not a pure kernel")));
        }
    }
    Ok(())
}

fn unary(x: &[f64], out: &mut [f64], f: fn(f64) -> f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = f(v);
    }
}
