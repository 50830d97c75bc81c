//! Helpers shared by the integration tests: independent oracles and small utilities.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcdm::denoiser::Denoiser;
use rcdm::nn::{Act, ParamStore};
use rcdm::{DenoiserConfig, EmbeddingMatrix, Injection};

/// ᾱ_1000 of the linear schedule 1e-4 → 0.02, cumulative product evaluated with 50 significant digits.
pub const ALPHA_BAR_1000_LINEAR: f64 = 0.0000403582976537568331481763516155;
/// ᾱ_500 of the same schedule.
pub const ALPHA_BAR_500_LINEAR: f64 = 0.0785872428817782373432898268911;

/// Cyclic Jacobi rotations on a dense symmetric matrix. Returns (eigenvalue, eigenvector)
/// pairs sorted by descending eigenvalue.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
    let n = matrix.len();
    let mut a = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (apk, aqk) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (x, y) = (*apk, *aqk);
                    *apk = c * x - s * y;
                    *aqk = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|k| (a[k][k], v.iter().map(|row| row[k]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

/// Sample covariance (divisor n - 1) assembled entry by entry.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect()
}

pub fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Column scales spread the spectrum so eigenvectors are well separated.
    (0..n).map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64)).map(|v: f64| (v as f32) as f64).collect()).collect()
}

pub fn matrix_of(rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let d = rows[0].len();
    EmbeddingMatrix::new(rows.len(), d, rows.iter().flatten().map(|&v| v as f32).collect(), None, "test").unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
const PROBES_PER_GROUP: usize = 12;
const ABSOLUTE_FLOOR: f64 = 1e-6;

pub fn tiny_denoiser(injection: Injection, spatial_condition: bool) -> DenoiserConfig {
    DenoiserConfig {
        image_channels: 3,
        image_size: 8,
        base_width: 8,
        depth: 1,
        cond_dim: 4,
        time_embed_dim: 8,
        injection,
        num_timesteps: 50,
        spatial_condition,
    }
}

struct Problem {
    net: Denoiser<f64>,
    x: Act<f64>,
    t: Vec<usize>,
    cond: Vec<f64>,
    eps: Act<f64>,
}

fn problem(cfg: DenoiserConfig, seed: u64) -> Problem {
    let mut net = Denoiser::<f64>::build(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Move every weight off its initial value so zero-initialised layers are exercised.
    for p in net.params_mut().iter_mut() {
        for v in &mut p.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let b = 2;
    let mut x = Act::zeros(3, b, 8, 8);
    let mut eps = Act::zeros(3, b, 8, 8);
    x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    eps.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let cond = (0..b * cfg.cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Problem { net, x, t: vec![7, 41], cond, eps }
}

fn loss(p: &Problem, params: Option<&ParamStore<f64>>, cond: &[f64]) -> f64 {
    let net = match params {
        Some(ps) => Denoiser::from_params(p.net.config(), ps.clone()).unwrap(),
        None => p.net.clone(),
    };
    net.loss_and_grad(&p.x, &p.t, Some(cond), &p.eps).unwrap().0
}

fn relative_error(numeric: &[f64], analytic: &[f64]) -> f64 {
    let diff: f64 = numeric.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    // Some biases feed a per-channel norm and have an exactly zero gradient.
    diff / scale.max(ABSOLUTE_FLOOR)
}

/// Relative error of analytic vs central-difference gradients, per parameter group and for dL/dC.
pub fn gradient_errors(injection: Injection, spatial_condition: bool) -> Vec<(String, f64)> {
    let mut errors = Vec::new();
    let p = problem(tiny_denoiser(injection, spatial_condition), 11);
    let (_, grads) = p.net.loss_and_grad(&p.x, &p.t, Some(&p.cond), &p.eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (gi, g) in grads.params.iter().enumerate() {
        let n = g.data.len();
        let picks: Vec<usize> =
            if n <= PROBES_PER_GROUP { (0..n).collect() } else { (0..PROBES_PER_GROUP).map(|_| rng.random_range(0..n)).collect() };
        let mut numeric = Vec::new();
        let mut analytic = Vec::new();
        for &i in &picks {
            let mut plus = p.net.params().clone();
            plus.iter_mut().nth(gi).unwrap().data[i] += GRADIENT_STEP;
            let mut minus = p.net.params().clone();
            minus.iter_mut().nth(gi).unwrap().data[i] -= GRADIENT_STEP;
            numeric.push((loss(&p, Some(&plus), &p.cond) - loss(&p, Some(&minus), &p.cond)) / (2.0 * GRADIENT_STEP));
            analytic.push(g.data[i]);
        }
        errors.push((g.name.clone(), relative_error(&numeric, &analytic)));
    }
    let dc = grads.condition.expect("condition gradient");
    let numeric: Vec<f64> = (0..p.cond.len())
        .map(|i| {
            let (mut a, mut b) = (p.cond.clone(), p.cond.clone());
            a[i] += GRADIENT_STEP;
            b[i] -= GRADIENT_STEP;
            (loss(&p, None, &a) - loss(&p, None, &b)) / (2.0 * GRADIENT_STEP)
        })
        .collect();
    errors.push(("dL/dC".into(), relative_error(&numeric, &dc)));
    errors
}

/// Finite-difference estimate of ‖∂ε̂/∂C‖_F at one `(x_t, t, C)`: the RMS over random unit
/// directions `u` of ‖(ε̂(C + hu) − ε̂(C − hu)) / 2h‖, scaled by √d.
pub fn condition_jacobian_norm(
    net: &rcdm::Denoiser,
    x_t: &rcdm::Tensor3,
    t: usize,
    c: &rcdm::RepresentationVector,
    probes: usize,
    seed: u64,
) -> f64 {
    let h = 1e-2;
    let d = c.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..probes {
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shifted = |sign: f64| {
            let v = c.values().iter().zip(&u).map(|(x, du)| x + sign * h * du / norm).collect();
            net.predict_noise(x_t, t, &rcdm::RepresentationVector::new(v, "probe").unwrap()).unwrap()
        };
        let (plus, minus) = (shifted(1.0), shifted(-1.0));
        total += plus.data().iter().zip(minus.data()).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum::<f64>();
    }
    (total / probes as f64 * d as f64).sqrt()
}
