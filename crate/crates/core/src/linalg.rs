//! Small dense symmetric linear algebra for ridge state (row-major `d x d`).

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `a`; `None` if the matrix is not positive definite.
    pub fn factor(a: &[f64], dim: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), dim * dim);
        let mut lower = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut diag = a[j * dim + j];
            for k in 0..j {
                diag -= lower[j * dim + k] * lower[j * dim + k];
            }
            if !diag.is_finite() || diag <= 0.0 {
                return None;
            }
            let pivot = diag.sqrt();
            lower[j * dim + j] = pivot;
            for i in (j + 1)..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= lower[i * dim + k] * lower[j * dim + k];
                }
                lower[i * dim + j] = s / pivot;
            }
        }
        Some(Self { dim, lower })
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let l = &self.lower;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }

    /// Full inverse, symmetrized.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
                inv[i * n + j] = m;
                inv[j * n + i] = m;
            }
        }
        inv
    }
}

pub fn identity_scaled(dim: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = scale;
    }
    m
}

/// `m += weight * x x^T`
pub fn add_outer(m: &mut [f64], x: &[f64], weight: f64) {
    let n = x.len();
    for i in 0..n {
        let wi = weight * x[i];
        if wi == 0.0 {
            continue;
        }
        let row = &mut m[i * n..(i + 1) * n];
        for (r, xj) in row.iter_mut().zip(x) {
            *r += wi * xj;
        }
    }
}

/// `v += weight * x`
pub fn axpy(v: &mut [f64], x: &[f64], weight: f64) {
    for (vi, xi) in v.iter_mut().zip(x) {
        *vi += weight * xi;
    }
}

pub fn mat_vec(m: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            m[i * n..(i + 1) * n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x^T M x`
pub fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    dot(x, &mat_vec(m, x))
}

/// Sherman-Morrison update of an inverse for `A + weight * x x^T`.
pub fn sherman_morrison(inv: &mut [f64], x: &[f64], weight: f64) {
    let u = mat_vec(inv, x);
    let denom = 1.0 + weight * dot(x, &u);
    let n = x.len();
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] -= weight * u[i] * u[j] / denom;
        }
    }
}
