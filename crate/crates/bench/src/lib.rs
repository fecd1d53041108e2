//! Input builders shared by the criterion benches.

use liaf_core::events::Event;
use liaf_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_events(rng: &mut ChaCha8Rng, n: usize, h: u16, w: u16, ts_max: u32) -> Vec<Event> {
    (0..n)
        .map(|_| Event {
            ts: rng.gen_range(0..ts_max),
            x: rng.gen_range(0..w),
            y: rng.gen_range(0..h),
            pol: if rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect()
}
