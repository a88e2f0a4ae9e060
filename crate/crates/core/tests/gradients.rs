//! Backpropagation against central finite differences.

use turnpoint::conditioning::{block_split, compose_concat, compose_single, BlockAssignment};
use turnpoint::diffusion::NoiseSchedule;
use turnpoint::neural::{DenoiserModel, ModelConfig, TrainBatch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps this oracle independent of the crate's sampler.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn check_model(cfg: ModelConfig, seed: u64) {
    let model = DenoiserModel::randomized(cfg, seed).unwrap();
    let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let e = cfg.event_dim;
    let a = compose_single(&normal(&mut rng, e), e).unwrap();
    let b = compose_concat(&normal(&mut rng, e), &normal(&mut rng, e), e).unwrap();
    let assigns = [
        BlockAssignment::uniform(cfg.blocks, a.clone()).unwrap(),
        block_split(0.5, cfg.blocks, a.clone(), b.clone()).unwrap(),
        BlockAssignment::uniform(cfg.blocks, b).unwrap(),
    ];
    let examples: Vec<_> = (0..5)
        .map(|i| {
            (
                normal(&mut rng, cfg.dim),
                rng.random_range(0..20),
                normal(&mut rng, cfg.dim),
                &assigns[i % assigns.len()],
            )
        })
        .collect();
    let batch = TrainBatch::from_examples(&examples).unwrap();
    let (_, grads) = model.loss_and_grads(&batch, &sched).unwrap();

    let h = 1e-5;
    for spec in model.layout() {
        let mut num = Vec::with_capacity(spec.len());
        for idx in spec.range() {
            let mut plus = model.clone();
            plus.params_mut()[idx] += h;
            let mut minus = model.clone();
            minus.params_mut()[idx] -= h;
            let lp = plus.loss_and_grads(&batch, &sched).unwrap().0;
            let lm = minus.loss_and_grads(&batch, &sched).unwrap().0;
            num.push((lp - lm) / (2.0 * h));
        }
        let ana = &grads[spec.range()];
        let diff: f64 = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel < 1e-4, "{}: relative error {rel:e}", spec.name);
    }
}

#[test]
fn tiny_model_gradients() {
    check_model(
        ModelConfig {
            dim: 6,
            hidden: 8,
            blocks: 2,
            time_dim: 4,
            event_dim: 3,
        },
        1,
    );
}

#[test]
fn deeper_model_gradients() {
    check_model(
        ModelConfig {
            dim: 5,
            hidden: 7,
            blocks: 4,
            time_dim: 6,
            event_dim: 2,
        },
        2,
    );
}

#[test]
fn forward_is_pure() {
    let cfg = ModelConfig {
        dim: 6,
        hidden: 8,
        blocks: 2,
        time_dim: 4,
        event_dim: 3,
    };
    let model = DenoiserModel::randomized(cfg, 3).unwrap();
    let assign = BlockAssignment::uniform(2, compose_single(&[0.1, 0.2, 0.3], 3).unwrap()).unwrap();
    let z = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75];
    let a = model.forward(&z, 7, &assign).unwrap();
    let b = model.forward(&z, 7, &assign).unwrap();
    assert_eq!(a, b);
}
