//! The frozen convolutional feature extractor and the trainable
//! inpainting generator, both deterministic from a seed.

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Shape of one conv layer: out channels, in channels, kernel, stride, pad.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    const fn new(c_in: usize, c_out: usize, stride: usize) -> ConvSpec {
        ConvSpec {
            c_out,
            c_in,
            k: 3,
            stride,
            pad: 1,
        }
    }

}

/// Glorot-uniform weights drawn in a fixed order from one splitmix64
/// stream: w = (2u - 1) * sqrt(6 / (fan_in + fan_out)) with conv fans
/// counted over the receptive field. Biases are zero.
fn init_conv_weight(spec: &ConvSpec, rng: &mut SplitMix64) -> Tensor {
    let fan_in = (spec.c_in * spec.k * spec.k) as f64;
    let fan_out = (spec.c_out * spec.k * spec.k) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::from_fn(&[spec.c_out, spec.c_in, spec.k, spec.k], |_| {
        (2.0 * rng.next_f64() - 1.0) * bound
    })
}

// ---------------------------------------------------------------------------
// feature extractor
// ---------------------------------------------------------------------------

const EXTRACTOR_STAGES: [ConvSpec; 3] = [
    ConvSpec::new(3, 8, 1),
    ConvSpec::new(8, 16, 1),
    ConvSpec::new(16, 32, 1),
];

/// Frozen three-stage extractor: each stage is conv 3x3 (stride 1, pad 1),
/// relu, then 2x2 max-pool. Channels run 3 -> 8 -> 16 -> 32, and the tap
/// after each pool is one feature level. Weights never train.
#[derive(Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

pub const NUM_TAPS: usize = 3;

impl FeatureExtractor {
    pub fn init(seed: u64) -> FeatureExtractor {
        let mut rng = SplitMix64::new(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for spec in &EXTRACTOR_STAGES {
            weights.push(init_conv_weight(spec, &mut rng));
            biases.push(Tensor::zeros(&[spec.c_out]));
        }
        FeatureExtractor { weights, biases }
    }

    /// Record the three tap activations for an NCHW image batch on the
    /// caller's tape. The extractor's own weights enter as constants, so
    /// gradients flow to the image but never to the extractor.
    pub fn extract(&self, tape: &mut Tape, image: NodeId) -> Result<[NodeId; NUM_TAPS]> {
        let c = tape.value(image).shape().nchw().1;
        if c != 3 {
            return Err(Error::rejected(format!(
                "extractor expects 3-channel input, got {}",
                c
            )));
        }
        let mut taps = [image; NUM_TAPS];
        let mut cur = image;
        for (i, spec) in EXTRACTOR_STAGES.iter().enumerate() {
            let w = tape.constant(self.weights[i].clone());
            let b = tape.constant(self.biases[i].clone());
            let conv = tape.conv2d(cur, w, Some(b), spec.stride, spec.pad)?;
            let act = tape.relu(conv);
            cur = tape.maxpool2d(act)?;
            taps[i] = cur;
        }
        Ok(taps)
    }

    /// Tap values without gradient tracking.
    pub fn extract_eager(&self, image: &Tensor) -> Result<[Tensor; NUM_TAPS]> {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let taps = self.extract(&mut tape, img)?;
        Ok(taps.map(|t| tape.value(t).clone()))
    }

    /// Bit-level fingerprint of the frozen weights, for asserting the
    /// extractor never changes across a training run.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for t in self.weights.iter().chain(self.biases.iter()) {
            for v in t.data() {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// One generator layer: optional 2x nearest upsample, then conv + activation.
#[derive(Debug, Clone, Copy)]
pub struct GenLayer {
    pub conv: ConvSpec,
    pub act: Activation,
    pub upsample_before: bool,
}

const GENERATOR_ARCH: [GenLayer; 5] = [
    GenLayer {
        conv: ConvSpec::new(4, 8, 1),
        act: Activation::Relu,
        upsample_before: false,
    },
    GenLayer {
        conv: ConvSpec::new(8, 16, 2),
        act: Activation::Relu,
        upsample_before: false,
    },
    GenLayer {
        conv: ConvSpec::new(16, 16, 1),
        act: Activation::Relu,
        upsample_before: false,
    },
    GenLayer {
        conv: ConvSpec::new(16, 8, 1),
        act: Activation::Relu,
        upsample_before: true,
    },
    GenLayer {
        conv: ConvSpec::new(8, 3, 1),
        act: Activation::Sigmoid,
        upsample_before: false,
    },
];

/// Trainable inpainting generator. Input is the 4-channel stack of the
/// masked image and the mask; output is a 3-channel image squashed to
/// (0, 1) by the sigmoid head.
#[derive(Clone)]
pub struct Generator {
    arch: Vec<GenLayer>,
    params: ParamSet,
}

impl Generator {
    pub fn init(seed: u64) -> Generator {
        Generator::with_arch(GENERATOR_ARCH.to_vec(), seed)
    }

    /// Build a generator over an arbitrary layer stack (used by the test
    /// fixtures; the public artifact architecture is [`Generator::init`]).
    pub fn with_arch(arch: Vec<GenLayer>, seed: u64) -> Generator {
        let mut rng = SplitMix64::new(seed);
        let mut params = ParamSet::new();
        for (i, layer) in arch.iter().enumerate() {
            params.push(
                format!("conv{}.weight", i + 1),
                init_conv_weight(&layer.conv, &mut rng),
            );
            params.push(
                format!("conv{}.bias", i + 1),
                Tensor::zeros(&[layer.conv.c_out]),
            );
        }
        Generator { arch, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_dim()
    }

    /// Record the forward pass on a tape. Returns the prediction node and
    /// the parameter leaf nodes in [`ParamSet`] order, for flattening
    /// gradients.
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let c = tape.value(input).shape().nchw().1;
        if c != self.arch[0].conv.c_in {
            return Err(Error::rejected(format!(
                "generator expects {}-channel input, got {}",
                self.arch[0].conv.c_in, c
            )));
        }
        let mut leaf_ids = Vec::with_capacity(self.params.len());
        let mut cur = input;
        for (i, layer) in self.arch.iter().enumerate() {
            if layer.upsample_before {
                cur = tape.upsample_nearest(cur);
            }
            let w = tape.leaf(self.params.tensor(2 * i).clone());
            let b = tape.leaf(self.params.tensor(2 * i + 1).clone());
            leaf_ids.push(w);
            leaf_ids.push(b);
            let conv = tape.conv2d(cur, w, Some(b), layer.conv.stride, layer.conv.pad)?;
            cur = match layer.act {
                Activation::Relu => tape.relu(conv),
                Activation::Sigmoid => tape.sigmoid(conv),
            };
        }
        Ok((cur, leaf_ids))
    }
}

// ---------------------------------------------------------------------------
// inpainting plumbing
// ---------------------------------------------------------------------------

/// Mask convention: 1 = known pixel, 0 = hole. Must be strictly binary.
pub fn validate_mask(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::rejected("mask values must be exactly 0 or 1"));
    }
    Ok(())
}

/// Replicate a 1-channel mask to `c` channels, preserving the rank of
/// the input (rank-3 single sample or rank-4 batch).
pub fn expand_mask(mask: &Tensor, c: usize) -> Tensor {
    let (n, _, h, w) = mask.shape().nchw();
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for img in 0..n {
        let src = &mask.data()[img * hw..(img + 1) * hw];
        for ch in 0..c {
            out[(img * c + ch) * hw..(img * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    if mask.shape().rank() == 3 {
        Tensor::new(&[c, h, w], out).unwrap()
    } else {
        Tensor::new(&[n, c, h, w], out).unwrap()
    }
}

/// The 4-channel generator input: (gt * mask) stacked with the mask.
pub fn inpaint_input(gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    validate_mask(mask)?;
    let (n, c, h, w) = gt.shape().nchw();
    let (nm, _, hm, wm) = mask.shape().nchw();
    if (n, h, w) != (nm, hm, wm) || c != 3 {
        return Err(Error::shape(format!(
            "inpaint expects 3xHxW images with matching 1xHxW masks, got {:?} vs {:?}",
            gt.shape(),
            mask.shape()
        )));
    }
    let mask3 = expand_mask(mask, 3);
    let masked = crate::ops::binary(gt, &mask3, crate::ops::BinaryKind::Mul)?;
    crate::ops::concat_channels(&masked, mask)
}

/// Run the generator on a (gt, mask) batch; returns the raw prediction
/// node plus parameter leaves.
pub fn inpaint(
    gen: &Generator,
    tape: &mut Tape,
    gt: &Tensor,
    mask: &Tensor,
) -> Result<(NodeId, Vec<NodeId>)> {
    let input = inpaint_input(gt, mask)?;
    let input = tape.constant(input);
    gen.forward(tape, input)
}

/// Merge prediction and ground truth: out = mask*gt + (1-mask)*pred,
/// recorded on the tape so gradients reach only hole pixels.
pub fn composite(tape: &mut Tape, pred: NodeId, gt: &Tensor, mask: &Tensor) -> Result<NodeId> {
    let c = tape.value(pred).shape().nchw().1;
    let mask3 = expand_mask(mask, c);
    let keep = crate::ops::binary(gt, &mask3, crate::ops::BinaryKind::Mul)?;
    let hole = mask3.map(|v| 1.0 - v);
    let holes = tape.constant(hole);
    let kept = tape.constant(keep);
    let masked_pred = tape.mul(pred, holes)?;
    tape.add(masked_pred, kept)
}

/// Eager composite for metric evaluation.
pub fn composite_eager(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let c = pred.shape().nchw().1;
    let mask3 = expand_mask(mask, c);
    let keep = crate::ops::binary(gt, &mask3, crate::ops::BinaryKind::Mul)?;
    let hole3 = mask3.map(|v| 1.0 - v);
    let pm = crate::ops::binary(pred, &hole3, crate::ops::BinaryKind::Mul)?;
    crate::ops::binary(&pm, &keep, crate::ops::BinaryKind::Add)
}
