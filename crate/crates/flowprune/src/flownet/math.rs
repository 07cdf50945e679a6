//! Small dense-linear-algebra helpers. Matrices are row-major with rows
//! indexing the output dimension.

/// out = W x, where W is out.len() x x.len().
pub fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = row.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum();
    }
}

/// out += Wᵀ d, where W is d.len() x out.len().
pub fn matvec_t_acc(w: &[f64], d: &[f64], out: &mut [f64]) {
    let n_in = out.len();
    debug_assert_eq!(w.len(), d.len() * n_in);
    for (&di, row) in d.iter().zip(w.chunks_exact(n_in)) {
        for (o, &wi) in out.iter_mut().zip(row.iter()) {
            *o += di * wi;
        }
    }
}

/// dw += d ⊗ x (d rows, x columns).
pub fn outer_acc(dw: &mut [f64], d: &[f64], x: &[f64]) {
    let n_in = x.len();
    debug_assert_eq!(dw.len(), d.len() * n_in);
    for (&di, row) in d.iter().zip(dw.chunks_exact_mut(n_in)) {
        for (w, &xi) in row.iter_mut().zip(x.iter()) {
            *w += di * xi;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (1.0 + ex)
    }
}

const GELU_SLOPE: f64 = 1.702;

/// Sigmoid-approximated GELU: x·σ(1.702 x).
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(GELU_SLOPE * x)
}

pub fn gelu_deriv(x: f64) -> f64 {
    let s = sigmoid(GELU_SLOPE * x);
    s + GELU_SLOPE * x * s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        // W = [[1,2],[3,4],[5,6]]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0];
        let mut y = [0.0; 3];
        matvec(&w, &x, &mut y);
        assert_eq!(y, [-1.0, -1.0, -1.0]);
        let d = [1.0, 0.0, 2.0];
        let mut back = [0.0; 2];
        matvec_t_acc(&w, &d, &mut back);
        assert_eq!(back, [11.0, 14.0]);
    }

    #[test]
    fn gelu_deriv_matches_fd() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_deriv(x)).abs() < 1e-8);
        }
    }
}
