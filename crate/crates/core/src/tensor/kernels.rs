//! Raw slice kernels shared by forward and backward passes.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                y[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                y[base + a * inner] /= sum;
            }
        }
    }
    y
}

pub(crate) fn log_softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let sum: f64 = (0..len).map(|a| (x[base + a * inner] - max).exp()).sum();
            let lse = max + sum.ln();
            for a in 0..len {
                y[base + a * inner] = x[base + a * inner] - lse;
            }
        }
    }
    y
}

/// Row-wise softmax over the last dimension of a `[rows, cols]` buffer.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    softmax(x, &[x.len() / cols, cols], 1)
}

/// Permute a row-major buffer by swapping two axes.
pub(crate) fn swap_axes(x: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<f64>, Vec<usize>) {
    let n = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let mut in_strides = vec![1usize; n];
    for d in (0..n.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride in the input buffer for each output axis
    let mut strides = in_strides.clone();
    strides.swap(a0, a1);

    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return (out, out_shape);
    }
    // Copy whole contiguous runs when the last axis is untouched.
    let last_untouched = a0 != n - 1 && a1 != n - 1;
    let (outer_dims, run) = if last_untouched {
        (n - 1, out_shape[n - 1])
    } else {
        (n, 1)
    };
    let mut idx = vec![0usize; outer_dims];
    let mut flat = 0usize;
    let total_runs = x.len() / run;
    for _ in 0..total_runs {
        out.extend_from_slice(&x[flat..flat + run]);
        for d in (0..outer_dims).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
