//! Shared fixtures for the chronovec benchmarks.

use chronovec_core::rng::{stream, CounterRng, Purpose};
use chronovec_core::tensorio::Tensor;
use chronovec_core::vecalg::TimePeriod;
use chronovec_core::{Checkpoint, TimeVector};

/// A checkpoint with `tensors` tensors of `elems` standard-normal f32
/// values each, deterministic in `seed`.
pub fn random_checkpoint(tensors: usize, elems: usize, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for t in 0..tensors {
        let mut rng = CounterRng::new(seed, stream(Purpose::Init, t as i64, 0));
        let vals: Vec<f32> = (0..elems).map(|_| rng.next_normal() as f32).collect();
        ckpt.insert(
            &format!("block.{t:03}.weight"),
            Tensor::from_f32(vec![elems], &vals).unwrap(),
        )
        .unwrap();
    }
    ckpt
}

/// A matched (pretrained, finetuned, vector) triple over the same inventory.
pub fn vector_pair(
    tensors: usize,
    elems: usize,
    seed: u64,
) -> (Checkpoint, Checkpoint, TimeVector) {
    let pre = random_checkpoint(tensors, elems, seed);
    let fin = random_checkpoint(tensors, elems, seed ^ 0x9e37_79b9);
    let v = chronovec_core::vecalg::diff(&fin, &pre, TimePeriod::Year(2015)).unwrap();
    (pre, fin, v)
}
