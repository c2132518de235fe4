use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(pre, n, post)` view of `shape` around axis `k`.
pub(crate) fn split_at_mode(shape: &[usize], k: usize) -> (usize, usize, usize) {
    let pre = shape[..k].iter().product();
    let post = shape[k + 1..].iter().product();
    (pre, shape[k], post)
}

fn check(x: &Tensor, a: &Tensor, k: usize) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::Geometry(format!(
            "mode product factor must be a matrix, got shape {:?}",
            a.shape()
        )));
    }
    if k >= x.rank() {
        return Err(Error::Geometry(format!(
            "mode {k} out of range for rank-{} tensor",
            x.rank()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if x.shape()[k] != n {
        let mut expected = x.shape().to_vec();
        expected[k] = n;
        return Err(Error::shape("mode_n_product", &expected, x.shape()));
    }
    let (pre, _, post) = split_at_mode(x.shape(), k);
    Ok((pre, m, n, post))
}

/// Mode-`k` product `x ×_k a`: contracts the columns of `a` against axis `k`
/// of `x`, replacing that extent with the row count of `a`.
pub fn mode_n_product(x: &Tensor, a: &Tensor, k: usize) -> Result<Tensor> {
    let (pre, m, n, post) = check(x, a, k)?;
    let mut shape = x.shape().to_vec();
    shape[k] = m;
    let mut out = vec![0.0; pre * m * post];
    contract(x.data(), a.data(), &mut out, pre, m, n, post, false);
    Tensor::new(&shape, out)
}

/// `out[p, i, q] += Σ_j A[i, j] x[p, j, q]`, or with `Aᵀ` when `transpose`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn contract(
    x: &[f64],
    a: &[f64],
    out: &mut [f64],
    pre: usize,
    m: usize,
    n: usize,
    post: usize,
    transpose: bool,
) {
    // With transpose the roles swap: `a` is (n × m) and x has extent n.
    let (rows, cols) = if transpose { (n, m) } else { (m, n) };
    let coef = |i: usize, j: usize| if transpose { a[j * rows + i] } else { a[i * cols + j] };
    for p in 0..pre {
        let xb = &x[p * cols * post..(p + 1) * cols * post];
        let ob = &mut out[p * rows * post..(p + 1) * rows * post];
        if post == 1 {
            for (i, o) in ob.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, &xv) in xb.iter().enumerate() {
                    acc += coef(i, j) * xv;
                }
                *o += acc;
            }
            continue;
        }
        for i in 0..rows {
            let orow = &mut ob[i * post..(i + 1) * post];
            for j in 0..cols {
                let c = coef(i, j);
                let xrow = &xb[j * post..(j + 1) * post];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += c * xv;
                }
            }
        }
    }
}

/// Gradient of `x ×_k A` with respect to `A` given the output gradient.
pub(crate) fn factor_grad(x: &Tensor, dy: &Tensor, m: usize, k: usize) -> Tensor {
    let (pre, n, post) = split_at_mode(x.shape(), k);
    let mut da = vec![0.0; m * n];
    let (xd, gd) = (x.data(), dy.data());
    for p in 0..pre {
        let xb = &xd[p * n * post..(p + 1) * n * post];
        let gb = &gd[p * m * post..(p + 1) * m * post];
        for i in 0..m {
            let grow = &gb[i * post..(i + 1) * post];
            for j in 0..n {
                let xrow = &xb[j * post..(j + 1) * post];
                da[i * n + j] += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
            }
        }
    }
    Tensor::new(&[m, n], da).expect("factor gradient shape")
}

/// Gradient of `x ×_k A` with respect to `x`.
pub(crate) fn input_grad(dy: &Tensor, a: &Tensor, x_shape: &[usize], k: usize) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (pre, _, post) = split_at_mode(x_shape, k);
    let mut dx = vec![0.0; pre * n * post];
    contract(dy.data(), a.data(), &mut dx, pre, m, n, post, true);
    Tensor::new(x_shape, dx).expect("input gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_tensor_unchanged() {
        let x = Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 - 2.5);
        let y = mode_n_product(&x, &Tensor::eye(3), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn row_of_ones_sums_the_mode() {
        let x = Tensor::ones(&[2, 2, 2]);
        let a = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = mode_n_product(&x, &a, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn mismatched_columns_are_rejected() {
        let x = Tensor::ones(&[2, 3]);
        let a = Tensor::ones(&[4, 2]);
        assert!(matches!(
            mode_n_product(&x, &a, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(mode_n_product(&x, &Tensor::eye(3), 2).is_err());
    }
}
