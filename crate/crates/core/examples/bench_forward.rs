use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidswin::model::{flops_estimate, forward, ModelConfig, Weights};
use vidswin::tensor::Mode;
use vidswin::{Tape, Tensor};

fn main() {
    for cfg in [ModelConfig::drowsy(), ModelConfig::distracted()] {
        let w = Weights::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[30, 64, 64, 3], |_| rng.random_range(0.0..1.0)).unwrap();
        println!("{} gflops {:.3}", cfg.pipeline, flops_estimate(&cfg).unwrap().gflops());
        let t0 = Instant::now();
        forward(&mut Tape::detached(), &cfg, &w, &x, Mode::Eval, &mut rng).unwrap();
        println!("  eval forward {:?}", t0.elapsed());
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let ww = w.watch(&mut tape);
        let p = forward(&mut tape, &cfg, &ww, &x, Mode::Train, &mut rng).unwrap();
        let t1 = t0.elapsed();
        let l = tape.nll(&p, 0).unwrap();
        tape.backward(&l).unwrap();
        println!("  train fwd {:?} total {:?}", t1, t0.elapsed());
    }
}
