//! Dense reference solvers for small trust-region models.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rmtr_core::tr::SecantMemory;

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.transpose() * &m + DMatrix::identity(n, n) * 0.5
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Dense SR1 recursion from γI over the stored pairs.
pub fn dense_sr1(mem: &SecantMemory) -> DMatrix<f64> {
    let n = mem.dim();
    let mut b = DMatrix::identity(n, n) * mem.gamma();
    for (s, z) in mem.pairs() {
        let r = z - &b * s;
        let den = r.dot(s);
        b += &r * r.transpose() / den;
    }
    b
}

/// Exact trust-region solution from a full eigendecomposition: bisection
/// on the secular equation with explicit hard-case handling.
pub fn dense_tr_oracle(b: &DMatrix<f64>, g: &DVector<f64>, delta: f64) -> DVector<f64> {
    let eig = SymmetricEigen::new(b.clone());
    let lam = &eig.eigenvalues;
    let v = &eig.eigenvectors;
    let gt = v.transpose() * g;
    let n = g.len();
    let norm = |sigma: f64| -> f64 { (0..n).map(|i| (gt[i] / (lam[i] + sigma)).powi(2)).sum::<f64>().sqrt() };
    let step = |sigma: f64| -> DVector<f64> { v * DVector::from_fn(n, |i, _| -gt[i] / (lam[i] + sigma)) };
    let lmin = lam.min();
    if lmin > 0.0 && norm(0.0) <= delta {
        return step(0.0);
    }
    let lo0 = (-lmin).max(0.0);
    let in_min: Vec<usize> = (0..n).filter(|&i| lam[i] - lmin < 1e-12).collect();
    if in_min.iter().all(|&i| gt[i].abs() < 1e-12) {
        let partial: f64 = (0..n)
            .filter(|i| !in_min.contains(i))
            .map(|i| (gt[i] / (lam[i] + lo0)).powi(2))
            .sum::<f64>()
            .sqrt();
        if partial <= delta {
            let mut coeff = DVector::from_fn(n, |i, _| {
                if in_min.contains(&i) {
                    0.0
                } else {
                    -gt[i] / (lam[i] + lo0)
                }
            });
            coeff[in_min[0]] = (delta * delta - partial * partial).sqrt();
            return v * coeff;
        }
    }
    let (mut lo, mut hi) = (lo0, lo0 + g.norm() / delta + 1.0);
    while norm(hi) > delta {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if norm(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    step(hi)
}

pub fn seeded_memory(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SecantMemory {
    let mut mem = SecantMemory::new(n, m);
    let a = random_symmetric(rng, n) * 2.0;
    let mut tries = 0;
    while mem.len() < m && tries < 50 {
        let s = random_vec(rng, n);
        let z = &a * &s + random_vec(rng, n) * 0.1;
        mem.update(s, z);
        tries += 1;
    }
    mem
}
