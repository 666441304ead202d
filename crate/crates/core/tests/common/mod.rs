#![allow(dead_code)]

//! Scripted references used as oracles. Written with plain loops over
//! row-major `Vec<Vec<f64>>`, independent of the library's matrix code.

pub mod dense;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmtr_core::resnet::{self, Activation, Batch, LossKind, NetworkConfig, ParamVector};

pub struct Scripted {
    pub q: Vec<Vec<f64>>,
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    pub hw: Vec<Vec<f64>>,
    pub hb: Vec<f64>,
}

impl Scripted {
    pub fn from_params(p: &ParamVector) -> Self {
        let mat = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect()
        };
        Self {
            q: mat(&p.input),
            w: p.blocks.iter().map(|(w, _)| mat(w)).collect(),
            b: p.blocks.iter().map(|(_, b)| b.iter().copied().collect()).collect(),
            hw: mat(&p.head_weight),
            hb: p.head_bias.iter().copied().collect(),
        }
    }
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Euler states `q_0 … q_K` of one sample.
pub fn scripted_states(cfg: &NetworkConfig, p: &Scripted, x: &[f64]) -> Vec<Vec<f64>> {
    let dt = cfg.dt();
    let mut states = vec![matvec(&p.q, x)];
    for k in 0..cfg.blocks {
        let cur = states[k].clone();
        let a = matvec(&p.w[k], &cur);
        let next: Vec<f64> = (0..cfg.width)
            .map(|i| {
                let pre = a[i] + p.b[k][i];
                let h = match cfg.activation {
                    Activation::Tanh => pre.tanh(),
                    Activation::Relu => pre.max(0.0),
                };
                cur[i] + dt * h
            })
            .collect();
        states.push(next);
    }
    states
}

/// Reduced loss written out term by term.
pub fn scripted_loss(cfg: &NetworkConfig, p: &Scripted, xs: &[Vec<f64>], cs: &[Vec<f64>]) -> f64 {
    let mut data = 0.0;
    for (x, c) in xs.iter().zip(cs) {
        let states = scripted_states(cfg, p, x);
        let z: Vec<f64> = matvec(&p.hw, &states[cfg.blocks])
            .iter()
            .zip(&p.hb)
            .map(|(a, b)| a + b)
            .collect();
        data += match cfg.loss {
            LossKind::LeastSquares => z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::CrossEntropy => {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                -z.iter()
                    .zip(c)
                    .map(|(v, ci)| ci * ((v - m).exp() / denom).max(1e-12).ln())
                    .sum::<f64>()
            }
        };
    }
    data /= xs.len() as f64;
    let dt = cfg.dt();
    let mut r = 0.0;
    for k in 1..cfg.blocks {
        let mut sq = 0.0;
        for i in 0..cfg.width {
            for j in 0..cfg.width {
                sq += (p.w[k][i][j] - p.w[k - 1][i][j]).powi(2);
            }
            sq += (p.b[k][i] - p.b[k - 1][i]).powi(2);
        }
        r += sq / (2.0 * dt);
    }
    let s: f64 =
        0.5 * p.hw.iter().flatten().map(|v| v * v).sum::<f64>() + 0.5 * p.hb.iter().map(|v| v * v).sum::<f64>();
    data + 0.5 * cfg.beta1 * r + 0.5 * cfg.beta2 * s
}

pub struct Instance {
    pub cfg: NetworkConfig,
    pub params: ParamVector,
    pub xs: Vec<Vec<f64>>,
    pub cs: Vec<Vec<f64>>,
    pub batch: Batch,
}

impl Instance {
    pub fn theta(&self) -> DVector<f64> {
        self.params.to_flat()
    }
}

/// Seeded small instance: width ≤ 5, K ≤ 4, n_b ≤ 8, random loss kind.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = rng.random_range(1..=3);
    let n_out = rng.random_range(2..=4);
    let width = rng.random_range(1..=5);
    let blocks = rng.random_range(1..=4);
    let t = rng.random_range(0.5..3.0);
    let mut cfg = if rng.random_bool(0.5) {
        NetworkConfig::classifier(n_in, n_out, width, blocks, t)
    } else {
        NetworkConfig::regressor(n_in, n_out, width, blocks, t)
    };
    cfg = cfg.with_regularization(rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
    let mut params = ParamVector::random(&cfg, &mut rng);
    for (_, b) in params.blocks.iter_mut() {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    params
        .head_bias
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    let n = rng.random_range(1..=8);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n_in).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let cs: Vec<Vec<f64>> = (0..n)
        .map(|_| match cfg.loss {
            LossKind::CrossEntropy => {
                let mut c = vec![0.0; n_out];
                c[rng.random_range(0..n_out)] = 1.0;
                c
            }
            LossKind::LeastSquares => (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let batch = Batch::from_rows(n_in, n_out, &xs.concat(), &cs.concat()).unwrap();
    Instance {
        cfg,
        params,
        xs,
        cs,
        batch,
    }
}

/// Central differences of the loss, one coordinate at a time.
pub fn fd_gradient(inst: &Instance, h: f64) -> Vec<f64> {
    let theta = inst.theta();
    (0..theta.len())
        .map(|i| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fp = resnet::loss(&inst.cfg, tp.as_slice(), &inst.batch).unwrap();
            let fm = resnet::loss(&inst.cfg, tm.as_slice(), &inst.batch).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
