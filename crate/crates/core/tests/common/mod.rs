//! Oracles written independently of the library's graph and linear algebra.
#![allow(dead_code)]

use nst_core::ndgrad::Tensor;
use nst_core::nnmodel::MlpParams;
use rand::Rng;

/// Softmax probabilities of an MLP, evaluated with plain loops.
pub fn forward_probs(weights: &[Vec<f64>], biases: &[Vec<f64>], widths: &[usize], x: &[f64]) -> Vec<Vec<f64>> {
    let d = widths[0];
    x.chunks(d)
        .map(|row| {
            let mut h = row.to_vec();
            for l in 0..weights.len() {
                let (n_in, n_out) = (widths[l], widths[l + 1]);
                let mut next = biases[l].clone();
                for i in 0..n_in {
                    for j in 0..n_out {
                        next[j] += h[i] * weights[l][i * n_out + j];
                    }
                }
                if l + 1 < weights.len() {
                    for v in &mut next {
                        *v = v.max(0.0);
                    }
                }
                h = next;
            }
            let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = h.iter().map(|v| (v - max).exp()).sum();
            h.iter().map(|v| (v - max).exp() / z).collect()
        })
        .collect()
}

/// Flattened parameter vector in layer order: weights then bias per layer.
pub fn flatten(params: &MlpParams) -> Vec<f64> {
    params.tensors().flat_map(|t| t.data().to_vec()).collect()
}

pub fn unflatten(flat: &[f64], widths: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut ws = Vec::new();
    let mut bs = Vec::new();
    let mut at = 0;
    for l in 0..widths.len() - 1 {
        let n = widths[l] * widths[l + 1];
        ws.push(flat[at..at + n].to_vec());
        at += n;
        bs.push(flat[at..at + widths[l + 1]].to_vec());
        at += widths[l + 1];
    }
    (ws, bs)
}

/// Central differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations; `a` is row-major `n × n`.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    let vectors = (0..n).map(|c| (0..n).map(|r| v[r * n + c]).collect()).collect();
    (values, vectors)
}

/// Projection of centered rows onto the top-2 covariance eigenvectors.
pub fn pca_oracle(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows[0].len();
    let means: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = centered.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n - 1) as f64;
        }
    }
    let (values, vectors) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    centered
        .iter()
        .map(|r| {
            let proj = |c: usize| r.iter().zip(&vectors[order[c]]).map(|(a, b)| a * b).sum::<f64>();
            [proj(0), proj(1)]
        })
        .collect()
}

/// Uniform random point on the probability simplex with `k` entries.
pub fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}
