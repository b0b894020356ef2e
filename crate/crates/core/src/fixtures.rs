//! Small deterministic fixtures shared by the test suites and the
//! verification commands: a smooth two-layer generator (no relu, no
//! pooling, 195 parameters) and miniature data streams. The smooth net
//! keeps finite-difference sweeps fast and free of activation kinks.

use crate::awa::EvalPool;
use crate::data::{Batch, BatchStream, Sample};
use crate::error::Result;
use crate::nets::{Activation, ConvSpec, FeatureExtractor, GenLayer, Generator};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const TINY_IMAGE_SIZE: usize = 16;

/// Two sigmoid conv layers, 4 -> 3 -> 3 channels: 195 parameters.
pub fn tiny_generator(seed: u64) -> Generator {
    let arch = vec![
        GenLayer {
            conv: ConvSpec {
                c_out: 3,
                c_in: 4,
                k: 3,
                stride: 1,
                pad: 1,
            },
            act: Activation::Sigmoid,
            upsample_before: false,
        },
        GenLayer {
            conv: ConvSpec {
                c_out: 3,
                c_in: 3,
                k: 3,
                stride: 1,
                pad: 1,
            },
            act: Activation::Sigmoid,
            upsample_before: false,
        },
    ];
    Generator::with_arch(arch, seed)
}

fn tiny_sample(rng: &mut SplitMix64) -> Sample {
    let s = TINY_IMAGE_SIZE;
    // ground truth kept in a low band, well apart from the sigmoid-mid
    // predictions of a fresh net, so |pred - gt| never sits on the abs kink
    // during finite-difference sweeps
    let gt = Tensor::from_fn(&[3, s, s], |_| 0.05 + 0.15 * rng.next_f64());
    let mask = Tensor::from_fn(&[1, s, s], |_| (rng.next_f64() > 0.3) as u8 as f64);
    let mask3 = crate::nets::expand_mask(&mask, 3);
    let masked = crate::ops::binary(&gt, &mask3, crate::ops::BinaryKind::Mul).unwrap();
    Sample { gt, mask, masked }
}

/// Batch of `n` random 16x16 samples.
pub fn tiny_batch(seed: u64, n: usize) -> Batch {
    let mut rng = SplitMix64::new(seed);
    let samples: Vec<Sample> = (0..n).map(|_| tiny_sample(&mut rng)).collect();
    Batch::from_samples(&samples).unwrap()
}

/// Replayable stream of tiny batches.
pub struct TinyStream {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchStream for TinyStream {
    fn batch(&self, idx: u64) -> Result<Batch> {
        Ok(tiny_batch(self.seed ^ crate::rng::mix(idx.wrapping_add(1)), self.batch_size))
    }
}

/// Held-out pool over tiny samples.
pub fn tiny_pool(seed: u64, fe: &FeatureExtractor, n: usize) -> EvalPool {
    EvalPool::new(tiny_batch(seed ^ 0xE7A1, n), fe).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_generator_has_195_params() {
        assert_eq!(tiny_generator(1).param_count(), 195);
    }

    #[test]
    fn tiny_stream_replays() {
        let s = TinyStream {
            seed: 4,
            batch_size: 2,
        };
        let a = s.batch(7).unwrap();
        let b = s.batch(7).unwrap();
        assert_eq!(a.gt.data(), b.gt.data());
        let c = s.batch(8).unwrap();
        assert_ne!(a.gt.data(), c.gt.data());
    }
}
