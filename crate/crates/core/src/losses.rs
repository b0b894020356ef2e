//! The main training loss (l1 + total variation) and the per-layer
//! perceptual/style terms computed from the frozen extractor's taps.
//!
//! Every loss uses a mean reduction, so values sit on comparable scales
//! across resolutions and batch sizes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nets::{FeatureExtractor, NUM_TAPS};
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Weights of the main loss components. The adversarial term of the usual
/// inpainting recipe is out of scope here; the main loss is (l1, tv).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MainWeights {
    pub l1: f64,
    pub tv: f64,
}

impl Default for MainWeights {
    fn default() -> Self {
        MainWeights { l1: 1.0, tv: 0.1 }
    }
}

/// Values of the main loss components at one iteration.
#[derive(Debug, Clone, Copy)]
pub struct MainLossVector {
    pub l1: f64,
    pub tv: f64,
}

/// Values of the six auxiliary terms at one iteration.
#[derive(Debug, Clone)]
pub struct AuxTermVector {
    pub perceptual: [f64; NUM_TAPS],
    pub style: [f64; NUM_TAPS],
}

/// mean |pred - gt|.
pub fn l1_loss(tape: &mut Tape, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Anisotropic total variation: the mean of all |forward differences|
/// along H and W (both orientations pooled into one mean). Degenerate
/// axes (extent 1) contribute no differences.
pub fn tv_loss(tape: &mut Tape, pred: NodeId) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(pred).shape().nchw();
    let mut sums: Vec<(NodeId, usize)> = Vec::new();
    if h >= 2 {
        let dh = tape.diff_h(pred)?;
        let n = tape.value(dh).numel();
        let a = tape.abs(dh);
        sums.push((tape.sum(a), n));
    }
    if w >= 2 {
        let dw = tape.diff_w(pred)?;
        let n = tape.value(dw).numel();
        let a = tape.abs(dw);
        sums.push((tape.sum(a), n));
    }
    let total_count: usize = sums.iter().map(|(_, n)| n).sum();
    if total_count == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut acc = sums[0].0;
    for (s, _) in &sums[1..] {
        acc = tape.add(acc, *s)?;
    }
    Ok(tape.scale(acc, 1.0 / total_count as f64))
}

/// lambda_l1 * l1 + lambda_tv * tv. Returns (weighted main, l1 node, tv node).
pub fn main_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: NodeId,
    lambda: &MainWeights,
) -> Result<(NodeId, NodeId, NodeId)> {
    let l1 = l1_loss(tape, pred, gt)?;
    let tv = tv_loss(tape, pred)?;
    let wl1 = tape.scale(l1, lambda.l1);
    let wtv = tape.scale(tv, lambda.tv);
    let main = tape.add(wl1, wtv)?;
    Ok((main, l1, tv))
}

/// mean |psi_n(pred) - psi_n(gt)| for tap n in 1..=3.
pub fn perceptual_term(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
    n: usize,
) -> Result<NodeId> {
    check_tap_index(n)?;
    let tp = fe.extract(tape, pred)?;
    let tg = fe.extract(tape, gt)?;
    let d = tape.sub(tp[n - 1], tg[n - 1])?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// mean |gram(psi_n(pred)) - gram(psi_n(gt))| for tap n in 1..=3.
pub fn style_term(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
    n: usize,
) -> Result<NodeId> {
    check_tap_index(n)?;
    let tp = fe.extract(tape, pred)?;
    let tg = fe.extract(tape, gt)?;
    let gp = tape.gram(tp[n - 1])?;
    let gg = tape.gram(tg[n - 1])?;
    let d = tape.sub(gp, gg)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn check_tap_index(n: usize) -> Result<()> {
    if n == 0 || n > NUM_TAPS {
        return Err(crate::error::Error::rejected(format!(
            "tap index must be 1..={}, got {}",
            NUM_TAPS, n
        )));
    }
    Ok(())
}

/// All six auxiliary term nodes from a single extraction of `pred`,
/// against precomputed ground-truth taps.
pub struct AuxTermNodes {
    pub perceptual: [NodeId; NUM_TAPS],
    pub style: [NodeId; NUM_TAPS],
}

pub fn aux_terms(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt_taps: &[Tensor; NUM_TAPS],
) -> Result<AuxTermNodes> {
    let taps = fe.extract(tape, pred)?;
    let mut perceptual = [pred; NUM_TAPS];
    let mut style = [pred; NUM_TAPS];
    for i in 0..NUM_TAPS {
        let gt_tap = tape.constant(gt_taps[i].clone());
        let d = tape.sub(taps[i], gt_tap)?;
        let a = tape.abs(d);
        perceptual[i] = tape.mean(a);

        let gp = tape.gram(taps[i])?;
        let gt_gram = ops::gram(&gt_taps[i])?;
        let gg = tape.constant(gt_gram);
        let ds = tape.sub(gp, gg)?;
        let as_ = tape.abs(ds);
        style[i] = tape.mean(as_);
    }
    Ok(AuxTermNodes { perceptual, style })
}

/// Left-fold sum of term nodes: t1 + t2 + ... in index order. The same
/// fold is used by the weighted variants so that unit weights reproduce
/// this value bit for bit.
pub fn sum_terms(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(acc)
}

/// Unweighted perceptual loss: the sum of the three perceptual terms.
pub fn standard_perceptual(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
) -> Result<NodeId> {
    let terms: Vec<NodeId> = (1..=NUM_TAPS)
        .map(|n| perceptual_term(tape, fe, pred, gt, n))
        .collect::<Result<_>>()?;
    sum_terms(tape, &terms)
}

/// Unweighted style loss: the sum of the three style terms.
pub fn standard_style(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    pred: NodeId,
    gt: NodeId,
) -> Result<NodeId> {
    let terms: Vec<NodeId> = (1..=NUM_TAPS)
        .map(|n| style_term(tape, fe, pred, gt, n))
        .collect::<Result<_>>()?;
    sum_terms(tape, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_img(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.next_f64())
    }

    fn eval_scalar(f: impl Fn(&mut Tape) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let out = f(&mut tape);
        tape.value(out).item()
    }

    #[test]
    fn l1_basics() {
        let a = rand_img(&[1, 3, 8, 8], 1);
        let b = a.map(|v| v + 0.5);
        let zero = eval_scalar(|t| {
            let x = t.constant(a.clone());
            let y = t.constant(a.clone());
            l1_loss(t, x, y).unwrap()
        });
        assert_eq!(zero, 0.0);
        let half = eval_scalar(|t| {
            let x = t.constant(b.clone());
            let y = t.constant(a.clone());
            l1_loss(t, x, y).unwrap()
        });
        assert!((half - 0.5).abs() < 1e-12);

        // loop oracle
        let c = rand_img(&[2, 3, 8, 8], 2);
        let d = rand_img(&[2, 3, 8, 8], 3);
        let got = eval_scalar(|t| {
            let x = t.constant(c.clone());
            let y = t.constant(d.clone());
            l1_loss(t, x, y).unwrap()
        });
        let want: f64 = c
            .data()
            .iter()
            .zip(d.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / c.numel() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn tv_basics() {
        let constant = Tensor::full(&[1, 3, 8, 8], 0.7);
        let v = eval_scalar(|t| {
            let x = t.constant(constant.clone());
            tv_loss(t, x).unwrap()
        });
        assert_eq!(v, 0.0);

        // single horizontal difference
        let two = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let v = eval_scalar(|t| {
            let x = t.constant(two.clone());
            tv_loss(t, x).unwrap()
        });
        assert_eq!(v, 1.0);

        // loop oracle
        let img = rand_img(&[1, 3, 6, 6], 4);
        let got = eval_scalar(|t| {
            let x = t.constant(img.clone());
            tv_loss(t, x).unwrap()
        });
        let (n, c, h, w) = img.shape().nchw();
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for nc in 0..n * c {
            let ch = &img.data()[nc * h * w..(nc + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    if y + 1 < h {
                        sum += (ch[(y + 1) * w + x] - ch[y * w + x]).abs();
                        cnt += 1;
                    }
                    if x + 1 < w {
                        sum += (ch[y * w + x + 1] - ch[y * w + x]).abs();
                        cnt += 1;
                    }
                }
            }
        }
        assert!((got - sum / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn perceptual_term_properties() {
        let fe = FeatureExtractor::init(10);
        let a = rand_img(&[1, 3, 32, 32], 5);
        let b = rand_img(&[1, 3, 32, 32], 6);
        for n in 1..=3 {
            let same = eval_scalar(|t| {
                let x = t.constant(a.clone());
                let y = t.constant(a.clone());
                perceptual_term(t, &fe, x, y, n).unwrap()
            });
            assert_eq!(same, 0.0, "tap {}", n);

            let ab = eval_scalar(|t| {
                let x = t.constant(a.clone());
                let y = t.constant(b.clone());
                perceptual_term(t, &fe, x, y, n).unwrap()
            });
            let ba = eval_scalar(|t| {
                let x = t.constant(b.clone());
                let y = t.constant(a.clone());
                perceptual_term(t, &fe, x, y, n).unwrap()
            });
            assert_eq!(ab, ba, "tap {} symmetry", n);

            // composition oracle: eager extract + elementwise mean abs diff
            let ta = fe.extract_eager(&a).unwrap();
            let tb = fe.extract_eager(&b).unwrap();
            let want: f64 = ta[n - 1]
                .data()
                .iter()
                .zip(tb[n - 1].data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / ta[n - 1].numel() as f64;
            assert!((ab - want).abs() < 1e-12, "tap {} oracle", n);
        }
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        assert!(perceptual_term(&mut tape, &fe, x, y, 4).is_err());
    }

    #[test]
    fn style_term_properties() {
        let fe = FeatureExtractor::init(20);
        let a = rand_img(&[1, 3, 32, 32], 7);
        let b = rand_img(&[1, 3, 32, 32], 8);
        for n in 1..=3 {
            let same = eval_scalar(|t| {
                let x = t.constant(a.clone());
                let y = t.constant(a.clone());
                style_term(t, &fe, x, y, n).unwrap()
            });
            assert_eq!(same, 0.0);

            // gram-composition oracle
            let got = eval_scalar(|t| {
                let x = t.constant(a.clone());
                let y = t.constant(b.clone());
                style_term(t, &fe, x, y, n).unwrap()
            });
            let ga = ops::gram(&fe.extract_eager(&a).unwrap()[n - 1]).unwrap();
            let gb = ops::gram(&fe.extract_eager(&b).unwrap()[n - 1]).unwrap();
            let want: f64 = ga
                .data()
                .iter()
                .zip(gb.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / ga.numel() as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_losses_sum_their_terms() {
        let fe = FeatureExtractor::init(30);
        let a = rand_img(&[1, 3, 32, 32], 9);
        let b = rand_img(&[1, 3, 32, 32], 10);

        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let total = standard_perceptual(&mut tape, &fe, x, y).unwrap();
        let t1 = perceptual_term(&mut tape, &fe, x, y, 1).unwrap();
        let t2 = perceptual_term(&mut tape, &fe, x, y, 2).unwrap();
        let t3 = perceptual_term(&mut tape, &fe, x, y, 3).unwrap();
        let s12 = tape.add(t1, t2).unwrap();
        let sum = tape.add(s12, t3).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(sum).item());
    }

    #[test]
    fn aux_terms_match_reference_composition() {
        let fe = FeatureExtractor::init(40);
        let a = rand_img(&[2, 3, 32, 32], 11);
        let b = rand_img(&[2, 3, 32, 32], 12);
        let gt_taps = fe.extract_eager(&b).unwrap();

        let mut tape = Tape::new();
        let pred = tape.constant(a.clone());
        let terms = aux_terms(&mut tape, &fe, pred, &gt_taps).unwrap();
        for n in 1..=3 {
            let mut t2 = Tape::new();
            let x = t2.constant(a.clone());
            let y = t2.constant(b.clone());
            let p = perceptual_term(&mut t2, &fe, x, y, n).unwrap();
            let s = style_term(&mut t2, &fe, x, y, n).unwrap();
            assert_eq!(
                tape.value(terms.perceptual[n - 1]).item(),
                t2.value(p).item()
            );
            assert_eq!(tape.value(terms.style[n - 1]).item(), t2.value(s).item());
        }
    }

    #[test]
    fn main_loss_linear_combination() {
        let a = rand_img(&[1, 3, 8, 8], 13);
        let b = rand_img(&[1, 3, 8, 8], 14);
        let lambda = MainWeights { l1: 1.0, tv: 0.1 };
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let (main, l1, tv) = main_loss(&mut tape, x, y, &lambda).unwrap();
        let want = 1.0 * tape.value(l1).item() + 0.1 * tape.value(tv).item();
        assert!((tape.value(main).item() - want).abs() < 1e-15);

        // lambda = (1, 0) on a constant offset gives the offset
        let c = a.map(|v| v + 0.25);
        let mut tape = Tape::new();
        let x = tape.constant(c);
        let y = tape.constant(a.clone());
        let (main, _, _) = main_loss(&mut tape, x, y, &MainWeights { l1: 1.0, tv: 0.0 }).unwrap();
        assert!((tape.value(main).item() - 0.25).abs() < 1e-12);

        // lambda = (0, 0) is zero
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let (main, _, _) = main_loss(&mut tape, x, y, &MainWeights { l1: 0.0, tv: 0.0 }).unwrap();
        assert_eq!(tape.value(main).item(), 0.0);
    }

    #[test]
    fn losses_scale_linearly_in_gradient() {
        // scaling a loss by c scales its gradient by c (c = 2, 0.5)
        let a = rand_img(&[1, 3, 8, 8], 15);
        let b = rand_img(&[1, 3, 8, 8], 16);
        for &c in &[2.0, 0.5] {
            let base = {
                let mut tape = Tape::new();
                let x = tape.leaf(a.clone());
                let y = tape.constant(b.clone());
                let l = l1_loss(&mut tape, x, y).unwrap();
                let g = tape.backward(l).unwrap();
                g.wrt(&tape, x).into_data()
            };
            let scaled = {
                let mut tape = Tape::new();
                let x = tape.leaf(a.clone());
                let y = tape.constant(b.clone());
                let l = l1_loss(&mut tape, x, y).unwrap();
                let sc = tape.scale(l, c);
                let g = tape.backward(sc).unwrap();
                g.wrt(&tape, x).into_data()
            };
            for (u, v) in base.iter().zip(&scaled) {
                assert!((u * c - v).abs() < 1e-15);
            }
        }
    }
}
