//! Procedural inpainting data: deterministic synthetic images and
//! ratio-grouped rectangular hole masks, plus the batch streams that feed
//! training and evaluation.
//!
//! Everything is a pure function of (seed, idx), so any batch can be
//! regenerated at any time; streams replay exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, SplitMix64};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Hole-ratio buckets. Ratio = hole pixels / total pixels, mask value
/// 1 = known pixel, 0 = hole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskGroup {
    #[serde(rename = "0.01-0.1")]
    R01_10,
    #[serde(rename = "0.1-0.2")]
    R10_20,
    #[serde(rename = "0.2-0.3")]
    R20_30,
    #[serde(rename = "0.3-0.4")]
    R30_40,
    #[serde(rename = "0.4-0.5")]
    R40_50,
    #[serde(rename = "0.5-0.6")]
    R50_60,
}

impl MaskGroup {
    pub const ALL: [MaskGroup; 6] = [
        MaskGroup::R01_10,
        MaskGroup::R10_20,
        MaskGroup::R20_30,
        MaskGroup::R30_40,
        MaskGroup::R40_50,
        MaskGroup::R50_60,
    ];

    /// Half-open hole-ratio interval (lo, hi].
    pub fn interval(&self) -> (f64, f64) {
        match self {
            MaskGroup::R01_10 => (0.01, 0.1),
            MaskGroup::R10_20 => (0.1, 0.2),
            MaskGroup::R20_30 => (0.2, 0.3),
            MaskGroup::R30_40 => (0.3, 0.4),
            MaskGroup::R40_50 => (0.4, 0.5),
            MaskGroup::R50_60 => (0.5, 0.6),
        }
    }

    pub fn index(&self) -> usize {
        MaskGroup::ALL.iter().position(|g| g == self).unwrap()
    }
}

impl std::fmt::Display for MaskGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (lo, hi) = self.interval();
        write!(f, "{}-{}", lo, hi)
    }
}

impl std::str::FromStr for MaskGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<MaskGroup> {
        let norm = s
            .trim()
            .trim_start_matches('(')
            .trim_end_matches(']')
            .replace(',', "-");
        for g in MaskGroup::ALL {
            if norm == g.to_string() {
                return Ok(g);
            }
        }
        Err(Error::rejected(format!(
            "unknown mask group {:?}; expected one of {}",
            s,
            MaskGroup::ALL
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

/// One training sample: ground truth, binary mask, and their product.
#[derive(Debug, Clone)]
pub struct Sample {
    pub gt: Tensor,
    pub mask: Tensor,
    pub masked: Tensor,
}

impl Sample {
    pub fn generate(img_seed: u64, mask_seed: u64, group: MaskGroup, idx: u64) -> Result<Sample> {
        let gt = gen_image(img_seed, idx);
        let mask = gen_mask(group, mask_seed, idx)?;
        let mask3 = crate::nets::expand_mask(&mask, 3);
        let masked = crate::ops::binary(&gt, &mask3, crate::ops::BinaryKind::Mul)?;
        Ok(Sample { gt, mask, masked })
    }

    /// Fraction of hole pixels in the mask.
    pub fn hole_ratio(&self) -> f64 {
        let zeros = self.mask.data().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.mask.numel() as f64
    }
}

/// A stacked batch of samples: gt is (N,3,32,32), mask is (N,1,32,32).
#[derive(Debug, Clone)]
pub struct Batch {
    pub gt: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Batch> {
        let gts: Vec<Tensor> = samples.iter().map(|s| s.gt.clone()).collect();
        let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(Batch {
            gt: Tensor::stack(&gts)?,
            mask: Tensor::stack(&masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.gt.shape().nchw().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The n-th ground-truth image as a (3,H,W) tensor.
    pub fn gt_image(&self, n: usize) -> Tensor {
        let (_, c, h, w) = self.gt.shape().nchw();
        let len = c * h * w;
        Tensor::new(&[c, h, w], self.gt.data()[n * len..(n + 1) * len].to_vec()).unwrap()
    }

    /// The n-th mask as a (1,H,W) tensor.
    pub fn mask_image(&self, n: usize) -> Tensor {
        let (_, _, h, w) = self.mask.shape().nchw();
        let len = h * w;
        Tensor::new(&[1, h, w], self.mask.data()[n * len..(n + 1) * len].to_vec()).unwrap()
    }
}

/// Deterministic synthetic 3x32x32 image in [0,1]: a per-channel base
/// tone, 2-4 oriented sinusoidal gratings and 1-3 soft rectangles, all
/// drawn in fixed order from splitmix64(seed ^ idx).
pub fn gen_image(seed: u64, idx: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed ^ idx);
    let n = IMAGE_SIZE;

    let base = [
        rng.next_range(0.3, 0.7),
        rng.next_range(0.3, 0.7),
        rng.next_range(0.3, 0.7),
    ];
    let mut img = vec![0.0f64; 3 * PIXELS];
    for c in 0..3 {
        img[c * PIXELS..(c + 1) * PIXELS].fill(base[c]);
    }

    let gratings = 2 + rng.next_below(3);
    for _ in 0..gratings {
        let freq = rng.next_range(1.0, 6.0);
        let angle = rng.next_range(0.0, std::f64::consts::TAU);
        let phase = rng.next_range(0.0, std::f64::consts::TAU);
        let amp = [
            rng.next_range(0.05, 0.30),
            rng.next_range(0.05, 0.30),
            rng.next_range(0.05, 0.30),
        ];
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 * ca + y as f64 * sa) / n as f64;
                let v = (std::f64::consts::TAU * freq * u + phase).sin();
                for c in 0..3 {
                    img[c * PIXELS + y * n + x] += amp[c] * v;
                }
            }
        }
    }

    let rects = 1 + rng.next_below(3);
    for _ in 0..rects {
        let cx = rng.next_range(4.0, 28.0);
        let cy = rng.next_range(4.0, 28.0);
        let half_w = rng.next_range(2.0, 8.0);
        let half_h = rng.next_range(2.0, 8.0);
        let soft = rng.next_range(1.0, 3.0);
        let amp = [
            rng.next_range(-0.3, 0.3),
            rng.next_range(-0.3, 0.3),
            rng.next_range(-0.3, 0.3),
        ];
        for y in 0..n {
            for x in 0..n {
                let dx = half_w - (x as f64 - cx).abs();
                let dy = half_h - (y as f64 - cy).abs();
                let inside = dx.min(dy);
                if inside <= 0.0 {
                    continue;
                }
                let wgt = (inside / soft).min(1.0);
                for c in 0..3 {
                    img[c * PIXELS + y * n + x] += amp[c] * wgt;
                }
            }
        }
    }

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], img).unwrap()
}

const MAX_MASK_ATTEMPTS: usize = 1000;

/// Rejection-sample 1-3 axis-aligned hole rectangles until the hole ratio
/// lands in the group's interval. Deterministic per (group, seed, idx).
pub fn gen_mask(group: MaskGroup, seed: u64, idx: u64) -> Result<Tensor> {
    let salt = (group.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = SplitMix64::new(seed ^ idx ^ salt);
    let (lo, hi) = group.interval();
    let n = IMAGE_SIZE;

    for _ in 0..MAX_MASK_ATTEMPTS {
        let target = rng.next_range(lo, hi);
        let rects = 1 + rng.next_below(3);
        let mut mask = vec![1.0f64; PIXELS];
        for _ in 0..rects {
            let area = target * PIXELS as f64 / rects as f64;
            let aspect = rng.next_range(0.5, 2.0);
            let w = ((area * aspect).sqrt().round() as usize).clamp(2, n - 2);
            let h = ((area / w as f64).round() as usize).clamp(2, n - 2);
            let x0 = rng.next_below(n - w + 1);
            let y0 = rng.next_below(n - h + 1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mask[y * n + x] = 0.0;
                }
            }
        }
        let ratio = mask.iter().filter(|&&v| v == 0.0).count() as f64 / PIXELS as f64;
        if ratio > lo && ratio <= hi {
            return Tensor::new(&[1, n, n], mask);
        }
    }
    Err(Error::MaskGeneration {
        attempts: MAX_MASK_ATTEMPTS,
        group: group.to_string(),
    })
}

/// Replayable source of training batches, indexed by iteration.
pub trait BatchStream {
    fn batch(&self, idx: u64) -> Result<Batch>;
}

// Stream-domain salts: train and eval draw from unrelated image/mask
// streams, so the held-out pool is disjoint from every training batch.
const TRAIN_IMAGE_SALT: u64 = 0x5452_4149_4E5F_494D;
const TRAIN_MASK_SALT: u64 = 0x5452_4149_4E5F_4D4B;
const EVAL_IMAGE_SALT: u64 = 0x4556_414C_5F49_4D47;
const EVAL_MASK_SALT: u64 = 0x4556_414C_5F4D_534B;

/// Procedural training stream: batch `t` holds samples t*B .. t*B+B-1.
#[derive(Debug, Clone)]
pub struct ProceduralStream {
    img_seed: u64,
    mask_seed: u64,
    group: MaskGroup,
    batch_size: usize,
}

impl ProceduralStream {
    pub fn training(run_seed: u64, group: MaskGroup, batch_size: usize) -> ProceduralStream {
        ProceduralStream {
            img_seed: mix(run_seed ^ TRAIN_IMAGE_SALT),
            mask_seed: mix(run_seed ^ TRAIN_MASK_SALT),
            group,
            batch_size,
        }
    }
}

impl BatchStream for ProceduralStream {
    fn batch(&self, idx: u64) -> Result<Batch> {
        let samples: Vec<Sample> = (0..self.batch_size)
            .map(|i| {
                Sample::generate(
                    self.img_seed,
                    self.mask_seed,
                    self.group,
                    idx * self.batch_size as u64 + i as u64,
                )
            })
            .collect::<Result<_>>()?;
        Batch::from_samples(&samples)
    }
}

/// The fixed held-out evaluation batch for a run.
pub fn eval_batch(run_seed: u64, group: MaskGroup, size: usize) -> Result<Batch> {
    let img_seed = mix(run_seed ^ EVAL_IMAGE_SALT);
    let mask_seed = mix(run_seed ^ EVAL_MASK_SALT);
    let samples: Vec<Sample> = (0..size as u64)
        .map(|i| Sample::generate(img_seed, mask_seed, group, i))
        .collect::<Result<_>>()?;
    Batch::from_samples(&samples)
}
