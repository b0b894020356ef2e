use auxweight_core::awa::*;
use auxweight_core::data::{eval_batch, BatchStream, MaskGroup, ProceduralStream};
use auxweight_core::losses::MainWeights;
use auxweight_core::nets::{FeatureExtractor, Generator};
use auxweight_core::tunable::{weights_from_params, init_equal, AuxConfig};
use std::time::Instant;

fn time<R>(label: &str, n: usize, mut f: impl FnMut() -> R) {
    let t = Instant::now();
    for _ in 0..n {
        std::hint::black_box(f());
    }
    println!("{label}: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}

fn main() {
    let fe = FeatureExtractor::init(1);
    let gen = Generator::init(2);
    let stream = ProceduralStream::training(3, MaskGroup::R10_20, 8);
    let batch = stream.batch(0).unwrap();
    let pool = EvalPool::new(eval_batch(3, MaskGroup::R10_20, 64).unwrap(), &fe).unwrap();
    let cfg = AuxConfig::default();
    let lambda = MainWeights::default();
    let w = weights_from_params(&cfg, &init_equal(&cfg));

    time("batch generation", 20, || stream.batch(0).unwrap());
    time("build_loss_graph (fwd batch 8)", 20, || {
        build_loss_graph(&gen, &fe, &batch, &lambda).unwrap()
    });
    let mut graph = build_loss_graph(&gen, &fe, &batch, &lambda).unwrap();
    let total = graph.total_with(&w).unwrap();
    time("grad(total)", 20, || graph.grad(total).unwrap());
    time("aux_rows (6 backwards)", 10, || graph.aux_rows().unwrap());
    time("grad(l1 term)", 20, || graph.grad(graph.l1).unwrap());
    time("grad(perc3 term)", 20, || graph.grad(graph.perc[2]).unwrap());
    time("guidance_eval pool 64", 10, || {
        guidance_eval(&gen, &fe, &pool, GuidanceKind::PerceptualDistance).unwrap()
    });
    time("guidance_value pool 64", 10, || {
        guidance_value(&gen, &fe, &pool, GuidanceKind::PerceptualDistance).unwrap()
    });
}
