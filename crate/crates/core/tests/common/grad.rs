//! Finite-difference cases for every differentiable op and a small model.

use lmft_core::model::{Mode, PackedBatch, ViTConfig, Vit};
use lmft_core::nn::gradcheck::{check, relative_error};
use lmft_core::nn::{NnError, Tape, Tensor, Var};
use lmft_core::tokenizer::{gather_tokens, partition_video, GridDims, SelectionMask, VideoTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;
/// Central-difference roundoff ceiling for the end-to-end check (h = 1e-6).
const FD_NOISE: f64 = 1e-8;

type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64, NnError>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn segments(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut segs = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = rng.random_range(1..=left);
        segs.push(s);
        left -= s;
    }
    segs
}

/// Named random cases, one per op.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |rng, seed| {
            let (m, k, n) = dims(rng);
            check(&[randn(rng, &[m, k]), randn(rng, &[k, n])], seed, |t, v| t.matmul(v[0], v[1]))
        }),
        ("add", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n]), randn(rng, &[m, n])], seed, |t, v| t.add(v[0], v[1]))
        }),
        ("mul", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n]), randn(rng, &[m, n])], seed, |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |rng, seed| {
            let (m, n, _) = dims(rng);
            let c: f64 = rng.random_range(-3.0..3.0);
            check(&[randn(rng, &[m, n])], seed, move |t, v| t.scale(v[0], c))
        }),
        ("add_row", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n]), randn(rng, &[n])], seed, |t, v| t.add_row(v[0], v[1]))
        }),
        ("sum", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n])], seed, |t, v| t.sum(v[0]))
        }),
        ("gelu", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[Tensor::randn(&[m, n], 2.0, rng)], seed, |t, v| t.gelu(v[0]))
        }),
        ("layernorm", |rng, seed| {
            let (m, _, _) = dims(rng);
            let n = rng.random_range(2..7);
            check(&[randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])], seed, |t, v| t.layernorm(v[0], v[1], v[2]))
        }),
        ("softmax rows", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n])], seed, |t, v| t.softmax(v[0], 1))
        }),
        ("softmax columns", |rng, seed| {
            let (m, n, _) = dims(rng);
            check(&[randn(rng, &[m, n])], seed, |t, v| t.softmax(v[0], 0))
        }),
        ("cross_entropy", |rng, seed| {
            let (m, _, _) = dims(rng);
            let c = rng.random_range(2..6);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            check(&[randn(rng, &[m, c])], seed, move |t, v| t.cross_entropy(v[0], &labels))
        }),
        ("segment_mean", |rng, seed| {
            let n = rng.random_range(1..8);
            let d = rng.random_range(1..4);
            let segs = segments(rng, n);
            check(&[randn(rng, &[n, d])], seed, move |t, v| t.segment_mean(v[0], &segs))
        }),
        ("gather_rows", |rng, seed| {
            let rows = rng.random_range(1..5);
            let d = rng.random_range(1..4);
            let idx: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..rows)).collect();
            check(&[randn(rng, &[rows, d])], seed, move |t, v| t.gather_rows(v[0], &idx))
        }),
        ("segment_attention", |rng, seed| {
            let n = rng.random_range(1..7);
            let heads = rng.random_range(1..3);
            let d = heads * rng.random_range(1..4);
            let segs = segments(rng, n);
            let (q, k, v) = (randn(rng, &[n, d]), randn(rng, &[n, d]), randn(rng, &[n, d]));
            check(&[q, k, v], seed, move |t, x| t.segment_attention(x[0], x[1], x[2], &segs, heads))
        }),
        ("linear", |rng, seed| {
            let (m, k, n) = dims(rng);
            check(&[randn(rng, &[m, k]), randn(rng, &[k, n]), randn(rng, &[n])], seed, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }),
    ]
}

/// Worst relative error of one case over `seeds` seeds, or the first failure.
pub fn run_case(name: &str, case: Case, seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = case(&mut rng, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
        worst = worst.max(err);
        if err > TOL {
            return Err(format!("{name} seed {seed}: relative error {err}"));
        }
    }
    Ok(worst)
}

fn tiny_model_batch(seed: u64) -> (Vit<f64>, PackedBatch<f64>, Vec<usize>) {
    let cfg = ViTConfig {
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes: 3,
        patch: 2,
        tubelet: 1,
        channels: 1,
        grid: GridDims::new(3, 1, 2),
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vit = Vit::<f64>::new(cfg, seed).unwrap();
    // push every parameter off its special init values
    for id in vit.params.ids().collect::<Vec<_>>() {
        let t = vit.params.get(id).clone();
        let noisy = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect()).unwrap();
        vit.params.set(id, noisy).unwrap();
    }
    let video = VideoTensor::new(3, 1, 2, 4, (0..24).map(|_| rng.random::<f64>()).collect()).unwrap();
    let grid = partition_video(&video, 2, 1).unwrap();
    let a = gather_tokens(&grid, &SelectionMask::all(grid.dims), "a").unwrap();
    let mut bits = vec![true; 6];
    bits[3] = false;
    bits[4] = false;
    let b = gather_tokens(&grid, &SelectionMask::from_bits(grid.dims, bits).unwrap(), "b").unwrap();
    // one clip with all 6 tokens, one pruned to 4
    let batch = PackedBatch::pack(&[&a, &b], None).unwrap();
    (vit, batch, vec![rng.random_range(0..3), rng.random_range(0..3)])
}

fn model_loss(vit: &Vit<f64>, batch: &PackedBatch<f64>, labels: &[usize], tape: &mut Tape<f64>, mode: Mode) -> Var {
    let logits = vit.forward::<ChaCha8Rng>(tape, batch, mode, None).unwrap();
    tape.cross_entropy(logits, labels).unwrap()
}

/// Two-layer model, one full and one pruned clip, every parameter perturbed.
pub fn end_to_end(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (vit, batch, labels) = tiny_model_batch(seed);
        let mut tape = Tape::new();
        let loss = model_loss(&vit, &batch, &labels, &mut tape, Mode::Train);
        let grads = tape.backward(loss).unwrap();
        let f = |v: &Vit<f64>| {
            let mut t = Tape::new();
            let l = model_loss(v, &batch, &labels, &mut t, Mode::Eval);
            t.value(l).data()[0]
        };
        let h = 1e-6;
        for id in vit.params.ids() {
            let p = vit.params.get(id);
            let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; p.len()]);
            let mut numeric = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                let shifted = |delta: f64| {
                    let mut v = vit.clone();
                    let mut data = p.data().to_vec();
                    data[j] += delta;
                    v.params.set(id, Tensor::new(p.shape().to_vec(), data).unwrap()).unwrap();
                    f(&v)
                };
                numeric.push((shifted(h) - shifted(-h)) / (2.0 * h));
            }
            // Some parameters have an identically zero gradient (a key bias only
            // shifts each score row, which softmax ignores); there the central
            // difference is pure roundoff, around 1e-10 per entry.
            let abs = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            if abs <= FD_NOISE {
                let name = vit.params.name(id);
                if !name.ends_with("attn.bk") && analytic.iter().all(|a| a.abs() <= FD_NOISE) {
                    return Err(format!("seed {seed} param {name}: gradient vanished"));
                }
                continue;
            }
            let err = relative_error(&analytic, &numeric);
            worst = worst.max(err);
            if err > TOL {
                return Err(format!("seed {seed} param {}: relative error {err}, max abs diff {abs:.2e}", vit.params.name(id)));
            }
        }
    }
    Ok(worst)
}
