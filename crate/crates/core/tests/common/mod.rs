//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use std::f64::consts::PI;

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx`, found by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

pub fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// `E[g(u)]` for `u ~ N(mu, sigma²)`.
pub fn normal_expectation(mu: f64, sigma: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(80);
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| wi * g(mu + std::f64::consts::SQRT_2 * sigma * xi))
        .sum::<f64>()
        / PI.sqrt()
}

/// `E[τ]` and `E[τ²]` under the logistic-normal policy.
pub fn tau_moments(mu: f64, sigma: f64) -> (f64, f64) {
    (normal_expectation(mu, sigma, sigmoid), normal_expectation(mu, sigma, |u| sigmoid(u).powi(2)))
}

/// Pathwise gradient of `J = E[R(sigmoid(mu + sigma·ε))]` with respect to
/// `(mu, log sigma)`, given `R'`.
pub fn quadrature_policy_gradient(mu: f64, sigma: f64, dr: impl Fn(f64) -> f64) -> (f64, f64) {
    let (x, w) = gauss_hermite(80);
    let mut g = (0.0, 0.0);
    for (xi, wi) in x.iter().zip(&w) {
        let eps = std::f64::consts::SQRT_2 * xi;
        let t = sigmoid(mu + sigma * eps);
        let d = dr(t) * t * (1.0 - t);
        g.0 += wi * d;
        g.1 += wi * d * sigma * eps;
    }
    (g.0 / PI.sqrt(), g.1 / PI.sqrt())
}

/// Dense multi-head attention with an additive bias matrix, row-major
/// `q, k, v: [n × d]`, `bias: [n × n]`.
pub fn masked_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize, bias: &[f64]) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum();
                    dot * scale + bias[i * n + j]
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    out
}

/// Straight-line AdamW with decoupled weight decay.
pub fn adamw_reference(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: i32, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(step));
        let vh = v[i] / (1.0 - b2.powi(step));
        p[i] = p[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
    }
}

/// Mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Bandit `R(τ) = −(τ − 0.3)²` from the default policy: τ̂ after 2000 updates.
pub fn bandit_tau_hat(seed: u64) -> f64 {
    use lmft_core::policy::{ThresholdPolicy, DEFAULT_MC_SAMPLES};
    use rand::SeedableRng;
    let mut p = ThresholdPolicy::<f64>::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..2000 {
        let s = p.sample(&mut rng);
        p.reinforce_update(&s, -(s.tau - 0.3).powi(2)).unwrap();
    }
    p.deterministic_threshold(DEFAULT_MC_SAMPLES, seed ^ 0x5eed).unwrap()
}

/// Relative error per component between the sample-mean score-function
/// gradient over `draws` samples (constant baseline) and the quadrature
/// gradient of `E[−(τ − 0.3)²]` at `(mu, log_sigma)`.
pub fn reinforce_relative_errors(mu: f64, log_sigma: f64, draws: usize, seed: u64) -> (f64, f64) {
    use lmft_core::policy::ThresholdPolicy;
    use rand::SeedableRng;
    let r = |t: f64| -(t - 0.3).powi(2);
    let sigma = log_sigma.exp();
    let p = ThresholdPolicy::<f64>::new(mu, log_sigma);
    let b = normal_expectation(mu, sigma, |u| r(sigmoid(u)));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut g = (0.0, 0.0);
    for _ in 0..draws {
        let s = p.sample(&mut rng);
        let (gm, gs) = p.grad_log_density(s.tau).unwrap();
        g.0 += (r(s.tau) - b) * gm;
        g.1 += (r(s.tau) - b) * gs;
    }
    let (m0, m1) = (g.0 / draws as f64, g.1 / draws as f64);
    let (q0, q1) = quadrature_policy_gradient(mu, sigma, |t| -2.0 * (t - 0.3));
    ((m0 - q0).abs() / q0.abs(), (m1 - q1).abs() / q1.abs())
}

/// `(τ̂ − E[τ]) / SE` for a policy at `K` samples, SE from quadrature moments.
pub fn tau_hat_z_score(mu: f64, log_sigma: f64, k: usize, seed: u64) -> f64 {
    use lmft_core::policy::ThresholdPolicy;
    let (m1, m2) = tau_moments(mu, log_sigma.exp());
    let se = ((m2 - m1 * m1) / k as f64).sqrt();
    let t = ThresholdPolicy::<f64>::new(mu, log_sigma).deterministic_threshold(k, seed).unwrap();
    (t - m1) / se
}

/// Median clips/s per option set, timing the sets in alternation so that
/// machine drift hits all of them alike.
pub fn interleaved_medians<S: lmft_core::Scalar, const N: usize>(
    trained: &lmft_core::adapt::TrainedModel<S>,
    videos: &[lmft_core::tokenizer::VideoTensor<S>],
    sets: &[lmft_core::adapt::EvalOptions; N],
    rounds: usize,
) -> [f64; N] {
    let mut rates = [(); N].map(|_| Vec::new());
    for round in 0..rounds {
        for (o, r) in sets.iter().zip(rates.iter_mut()) {
            let t = lmft_core::adapt::inference_throughput(trained, videos, o, usize::from(round == 0), 1).unwrap();
            r.push(t.clips_per_sec);
        }
    }
    rates.map(|mut r| {
        r.sort_by(f64::total_cmp);
        r[r.len() / 2]
    })
}
