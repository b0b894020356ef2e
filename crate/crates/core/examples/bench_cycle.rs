use auxweight_core::awa::*;
use auxweight_core::data::{eval_batch, MaskGroup, ProceduralStream};
use auxweight_core::losses::MainWeights;
use auxweight_core::nets::{FeatureExtractor, Generator};
use auxweight_core::optim::ModelOptimizer;
use auxweight_core::tunable::{init_equal, AuxConfig};
use std::time::Instant;

fn main() {
    let fe = FeatureExtractor::init(1);
    let gen = Generator::init(2);
    let stream = ProceduralStream::training(3, MaskGroup::R10_20, 8);
    let pool = EvalPool::new(eval_batch(3, MaskGroup::R10_20, 64).unwrap(), &fe).unwrap();
    let cfg = AuxConfig::default();
    let awa = AwaConfig::default();
    let mut state = TrainState::new(
        gen,
        ModelOptimizer::adamw(5163, 1e-3, 0.9, 0.999, 1e-8, 0.0),
        cfg,
        init_equal(&cfg),
        &awa,
        MainWeights::default(),
    );
    // warmup
    for _ in 0..3 {
        awa_cycle(&mut state, &fe, &stream, &pool, &awa).unwrap();
    }
    let t = Instant::now();
    let n = 20;
    for _ in 0..n {
        awa_cycle(&mut state, &fe, &stream, &pool, &awa).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / n as f64;
    println!("awa_cycle: {:.1} ms/cycle -> 2000 cycles = {:.1} s", per * 1e3, per * 2000.0);
}
