//! Graph signal processing on small dense graphs: normalized Laplacian,
//! Jacobi eigensolver, graph Fourier transform, exact and Chebyshev spectral
//! filtering, and Dirichlet energy.

use serde::Serialize;

use crate::error::{HgfeError, Result};
use crate::init::SplitMix64;
use crate::tensor::{self, Tensor};

/// Iteration budget of the Jacobi eigensolver, in full sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 100;
/// Spectral upper bound of any normalized Laplacian.
pub const DEFAULT_LAMBDA_MAX: f64 = 2.0;

/// Symmetric, non-negative adjacency with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAdjacency {
    a: Tensor,
}

impl GraphAdjacency {
    pub fn new(a: Tensor) -> Result<Self> {
        let (n, m) = a.dims2()?;
        if n != m {
            return Err(HgfeError::shape(format!("adjacency must be square, got {n}x{m}")));
        }
        for i in 0..n {
            if a.at(i, i) != 0.0 {
                return Err(HgfeError::contract(format!("adjacency has a self loop at node {i}")));
            }
            for j in 0..n {
                let v = a.at(i, j);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(HgfeError::contract(format!("adjacency entry ({i},{j}) = {v}")));
                }
                if v != a.at(j, i) {
                    return Err(HgfeError::contract(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(GraphAdjacency { a })
    }

    /// Unweighted graph from an edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(HgfeError::contract(format!("invalid edge ({i},{j}) for {n} nodes")));
            }
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        GraphAdjacency::new(a)
    }

    pub fn complete(n: usize) -> Self {
        let mut a = Tensor::ones(&[n, n]);
        for i in 0..n {
            a.data_mut()[i * n + i] = 0.0;
        }
        GraphAdjacency { a }
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        GraphAdjacency::from_edges(n, &edges).expect("path edges are valid")
    }

    /// Seeded Erdős–Rényi graph with edge probability `density` and weights in
    /// `[0.5, 1.5)`. When `connected` is set a random spanning path is added.
    pub fn random(seed: u64, n: usize, density: f64, connected: bool) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut a = Tensor::zeros(&[n, n]);
        let set = |a: &mut Tensor, i: usize, j: usize, w: f64| {
            a.data_mut()[i * n + j] = w;
            a.data_mut()[j * n + i] = w;
        };
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.next_f64() < density {
                    let w = rng.uniform(0.5, 1.5);
                    set(&mut a, i, j, w);
                }
            }
        }
        if connected && n > 1 {
            let order = rng.permutation(n);
            for pair in order.windows(2) {
                if a.at(pair[0], pair[1]) == 0.0 {
                    let w = rng.uniform(0.5, 1.5);
                    set(&mut a, pair[0], pair[1], w);
                }
            }
        }
        GraphAdjacency { a }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degrees(&self) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| self.a.row(i).iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLaplacian {
    l: Tensor,
}

impl NormalizedLaplacian {
    /// Wraps an arbitrary matrix; it must be square and symmetric within 1e-12.
    pub fn from_matrix(l: Tensor) -> Result<Self> {
        let (n, m) = l.dims2()?;
        if n != m {
            return Err(HgfeError::shape(format!("Laplacian must be square, got {n}x{m}")));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (l.at(i, j) - l.at(j, i)).abs() > 1e-12 {
                    return Err(HgfeError::contract(format!("matrix is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(NormalizedLaplacian { l })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.l
    }

    pub fn len(&self) -> usize {
        self.l.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| self.l.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`; isolated nodes get `D^{-1/2} = 0`, so `L_ii = 1`.
pub fn normalized_laplacian(adj: &GraphAdjacency) -> NormalizedLaplacian {
    let n = adj.len();
    let inv_sqrt: Vec<f64> = adj
        .degrees()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            l.data_mut()[i * n + j] = delta - inv_sqrt[i] * adj.matrix().at(i, j) * inv_sqrt[j];
        }
    }
    NormalizedLaplacian { l }
}

/// Eigenvectors as columns of `u`, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub u: Tensor,
    pub lambda: Vec<f64>,
}

impl SpectralBasis {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// `max |L - U diag(lambda) U^T|`.
    pub fn reconstruction_error(&self, l: &NormalizedLaplacian) -> f64 {
        let n = self.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| self.u.at(i, k) * self.lambda[k] * self.u.at(j, k)).sum();
                worst = worst.max((r - l.matrix().at(i, j)).abs());
            }
        }
        worst
    }

    /// `max |U^T U - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.len();
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|k| self.u.at(k, a) * self.u.at(k, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Full eigensystem by cyclic Jacobi rotations (budget: [`DEFAULT_MAX_SWEEPS`]).
pub fn eigendecompose(l: &NormalizedLaplacian) -> Result<SpectralBasis> {
    eigendecompose_with_budget(l, DEFAULT_MAX_SWEEPS)
}

pub fn eigendecompose_with_budget(l: &NormalizedLaplacian, max_sweeps: usize) -> Result<SpectralBasis> {
    let n = l.len();
    let mut a = l.matrix().data().to_vec();
    let mut v = Tensor::identity(n).into_data();

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let threshold = 1e-15 * scale;

    let mut sweeps = 0;
    while off_norm(&a) > threshold {
        if sweeps == max_sweeps {
            return Err(HgfeError::Numeric(format!(
                "Jacobi eigensolver did not converge in {max_sweeps} sweeps (off-diagonal norm {:.3e})",
                off_norm(&a)
            )));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let lambda = order.iter().map(|&i| a[i * n + i]).collect();
    let mut u = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            u[row * n + col] = v[row * n + src];
        }
    }
    Ok(SpectralBasis {
        u: Tensor::new(&[n, n], u)?,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

fn check_len(n: usize, x: &[f64]) -> Result<()> {
    if x.len() != n {
        return Err(HgfeError::shape(format!(
            "signal has {} entries, graph has {n} nodes",
            x.len()
        )));
    }
    Ok(())
}

/// Graph Fourier transform: forward `U^T x`, inverse `U x`.
pub fn gft(basis: &SpectralBasis, x: &[f64], direction: Direction) -> Result<Vec<f64>> {
    let n = basis.len();
    check_len(n, x)?;
    let u = &basis.u;
    Ok(match direction {
        Direction::Forward => (0..n).map(|k| (0..n).map(|i| u.at(i, k) * x[i]).sum()).collect(),
        Direction::Inverse => (0..n).map(|i| (0..n).map(|k| u.at(i, k) * x[k]).sum()).collect(),
    })
}

/// `U diag(g(lambda)) U^T x`.
pub fn spectral_filter_exact(basis: &SpectralBasis, g: impl Fn(f64) -> f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut xhat = gft(basis, x, Direction::Forward)?;
    for (v, &lam) in xhat.iter_mut().zip(&basis.lambda) {
        *v *= g(lam);
    }
    gft(basis, &xhat, Direction::Inverse)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChebyshevCoeffs {
    pub theta: Vec<f64>,
    pub lambda_max: f64,
}

impl ChebyshevCoeffs {
    pub fn new(theta: Vec<f64>, lambda_max: f64) -> Result<Self> {
        if theta.is_empty() {
            return Err(HgfeError::contract("Chebyshev expansion needs at least theta_0"));
        }
        if !(lambda_max > 0.0) {
            return Err(HgfeError::contract(format!(
                "lambda_max must be positive, got {lambda_max}"
            )));
        }
        Ok(ChebyshevCoeffs { theta, lambda_max })
    }

    /// Polynomial order K.
    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    /// Scalar response `sum_k theta_k T_k(2 lambda / lambda_max - 1)`.
    pub fn evaluate(&self, lambda: f64) -> f64 {
        let y = 2.0 * lambda / self.lambda_max - 1.0;
        let (mut prev, mut cur) = (1.0, y);
        let mut acc = self.theta[0];
        if let Some(t1) = self.theta.get(1) {
            acc += t1 * y;
        }
        for th in self.theta.iter().skip(2) {
            let next = 2.0 * y * cur - prev;
            acc += th * next;
            prev = cur;
            cur = next;
        }
        acc
    }
}

/// Chebyshev–Gauss projection of `g` on `[0, lambda_max]`, truncated at order `k`.
pub fn fit_chebyshev(g: impl Fn(f64) -> f64, k: usize, lambda_max: f64) -> Result<ChebyshevCoeffs> {
    if !(lambda_max > 0.0) {
        return Err(HgfeError::contract(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    let nodes = (2 * (k + 1)).max(128);
    let samples: Vec<(f64, f64)> = (0..nodes)
        .map(|m| {
            let phi = std::f64::consts::PI * (m as f64 + 0.5) / nodes as f64;
            let lam = (phi.cos() + 1.0) * lambda_max / 2.0;
            (phi, g(lam))
        })
        .collect();
    let theta = (0..=k)
        .map(|order| {
            let s: f64 = samples.iter().map(|(phi, gv)| gv * (order as f64 * phi).cos()).sum();
            let w = if order == 0 { 1.0 } else { 2.0 };
            w * s / nodes as f64
        })
        .collect();
    ChebyshevCoeffs::new(theta, lambda_max)
}

/// `sum_k theta_k T_k(L~) x` by the three-term recurrence (matrix-vector only).
pub fn chebyshev_apply(l: &NormalizedLaplacian, coeffs: &ChebyshevCoeffs, x: &[f64]) -> Result<Vec<f64>> {
    check_len(l.len(), x)?;
    let scale = 2.0 / coeffs.lambda_max;
    let rescaled = |v: &[f64]| -> Vec<f64> { l.matvec(v).iter().zip(v).map(|(lv, vi)| scale * lv - vi).collect() };
    let mut acc: Vec<f64> = x.iter().map(|v| coeffs.theta[0] * v).collect();
    if coeffs.theta.len() == 1 {
        return Ok(acc);
    }
    let mut prev = x.to_vec();
    let mut cur = rescaled(x);
    for (a, c) in acc.iter_mut().zip(&cur) {
        *a += coeffs.theta[1] * c;
    }
    for th in coeffs.theta.iter().skip(2) {
        let next: Vec<f64> = rescaled(&cur).iter().zip(&prev).map(|(r, p)| 2.0 * r - p).collect();
        for (a, n) in acc.iter_mut().zip(&next) {
            *a += th * n;
        }
        prev = cur;
        cur = next;
    }
    Ok(acc)
}

/// `alpha * low + (1 - alpha) * high`, coefficient-wise.
pub fn interpolate_filter_coeffs(low: &ChebyshevCoeffs, high: &ChebyshevCoeffs, alpha: f64) -> Result<ChebyshevCoeffs> {
    if low.theta.len() != high.theta.len() {
        return Err(HgfeError::contract(format!(
            "filter orders differ: {} vs {}",
            low.order(),
            high.order()
        )));
    }
    if low.lambda_max != high.lambda_max {
        return Err(HgfeError::contract("filters use different lambda_max"));
    }
    let theta = low
        .theta
        .iter()
        .zip(&high.theta)
        .map(|(l, h)| alpha * l + (1.0 - alpha) * h)
        .collect();
    ChebyshevCoeffs::new(theta, low.lambda_max)
}

/// `x^T L x`.
pub fn dirichlet_energy(l: &NormalizedLaplacian, x: &[f64]) -> Result<f64> {
    check_len(l.len(), x)?;
    Ok(l.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum())
}

/// Sum of [`dirichlet_energy`] over the columns of an N×C feature matrix.
pub fn dirichlet_energy_columns(l: &NormalizedLaplacian, features: &Tensor) -> Result<f64> {
    let (n, c) = features.dims2()?;
    if n != l.len() {
        return Err(HgfeError::shape(format!("{n} feature rows for {} nodes", l.len())));
    }
    let t = tensor::transpose(features)?;
    (0..c).map(|ch| dirichlet_energy(l, t.row(ch))).sum()
}
