//! Weight initializers: fan-in-scaled uniform for convolutions and a
//! QR-based orthogonal sampler for recurrent kernels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Uniform in [-b, b] with b = sqrt(6 / fan_in), fan_in = Cin * k * k.
pub fn fan_in_uniform<E: Scalar>(shape: Shape, rng: &mut impl Rng) -> Tensor<E> {
    let fan_in = (shape.c * shape.h * shape.w).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Orthogonal kernel: reshape [Cout, Cin, k, k] to [Cout, Cin*k*k], sample a
/// seeded gaussian, take the Q of its QR (sign-corrected so the factorization
/// is unique), and reshape back. Rows are orthonormal when Cout <= Cin*k*k,
/// columns otherwise.
pub fn orthogonal_kernel<E: Scalar>(shape: Shape, seed: u64) -> Tensor<E> {
    let m = shape.n;
    let n = shape.c * shape.h * shape.w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // thin QR wants a tall matrix; transpose the wide case
    let (rows, cols, transpose) = if m < n { (n, m, true) } else { (m, n, false) };
    let mut a = vec![0.0f64; rows * cols];
    for v in a.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let q = thin_qr_q(&mut a, rows, cols);

    let mut out = vec![0.0f64; m * n];
    if transpose {
        // result = Q^T, orthonormal rows
        for r in 0..rows {
            for c in 0..cols {
                out[c * n + r] = q[r * cols + c];
            }
        }
    } else {
        out.copy_from_slice(&q);
    }
    Tensor::from_f64(shape, &out)
}

/// Householder QR of a tall matrix A (rows >= cols), returning the thin Q
/// with columns sign-corrected so diag(R) >= 0.
fn thin_qr_q(a: &mut [f64], rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows >= cols);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut diag_sign = vec![1.0f64; cols];

    for j in 0..cols {
        // Householder vector for column j
        let mut norm2 = 0.0;
        for i in j..rows {
            norm2 += a[i * cols + j] * a[i * cols + j];
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        let ajj = a[j * cols + j];
        let alpha = if ajj >= 0.0 { -norm } else { norm };
        diag_sign[j] = if alpha >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (j..rows).map(|i| a[i * cols + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        // apply H = I - 2 v v^T / (v^T v) to the trailing block
        for c in j..cols {
            let mut dot = 0.0;
            for (vi, i) in (j..rows).enumerate() {
                dot += v[vi] * a[i * cols + c];
            }
            let f = 2.0 * dot / vnorm2;
            for (vi, i) in (j..rows).enumerate() {
                a[i * cols + c] -= f * v[vi];
            }
        }
        vs.push(v);
    }

    // accumulate Q = H_0 ... H_{cols-1} applied to the first `cols` identity columns
    let mut q = vec![0.0f64; rows * cols];
    for j in 0..cols {
        q[j * cols + j] = 1.0;
    }
    for j in (0..cols).rev() {
        let v = &vs[j];
        if v.is_empty() {
            continue;
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for c in 0..cols {
            let mut dot = 0.0;
            for (vi, i) in (j..rows).enumerate() {
                dot += v[vi] * q[i * cols + c];
            }
            let f = 2.0 * dot / vnorm2;
            for (vi, i) in (j..rows).enumerate() {
                q[i * cols + c] -= f * v[vi];
            }
        }
    }

    // sign-correct: make the implicit diag(R) nonnegative
    for j in 0..cols {
        if diag_sign[j] < 0.0 {
            for i in 0..rows {
                q[i * cols + j] = -q[i * cols + j];
            }
        }
    }
    q
}
