use auxweight_core::awa::*;
use auxweight_core::data::{eval_batch, Batch, MaskGroup};
use auxweight_core::nets::{FeatureExtractor, Generator};
use auxweight_core::tensor::Tensor;
use std::time::Instant;

fn slice_batch(b: &Batch, lo: usize, hi: usize) -> Batch {
    let (_, c, h, w) = b.gt.shape().nchw();
    let gl = c * h * w;
    let ml = h * w;
    Batch {
        gt: Tensor::new(&[hi - lo, c, h, w], b.gt.data()[lo * gl..hi * gl].to_vec()).unwrap(),
        mask: Tensor::new(&[hi - lo, 1, h, w], b.mask.data()[lo * ml..hi * ml].to_vec()).unwrap(),
    }
}

fn main() {
    let fe = FeatureExtractor::init(1);
    let gen = Generator::init(2);
    let full = eval_batch(3, MaskGroup::R10_20, 64).unwrap();
    for chunk in [64usize, 32, 16, 8] {
        let pools: Vec<EvalPool> = (0..64 / chunk)
            .map(|i| EvalPool::new(slice_batch(&full, i * chunk, (i + 1) * chunk), &fe).unwrap())
            .collect();
        let t = Instant::now();
        let n = 10;
        for _ in 0..n {
            let mut total = 0.0;
            let mut grad = vec![0.0; gen.param_count()];
            for p in &pools {
                let (v, g) = guidance_eval(&gen, &fe, p, GuidanceKind::PerceptualDistance).unwrap();
                total += v;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            std::hint::black_box((total, grad));
        }
        println!(
            "chunk {}: {:.1} ms per full-pool eval",
            chunk,
            t.elapsed().as_secs_f64() * 1e3 / n as f64
        );
    }
}
