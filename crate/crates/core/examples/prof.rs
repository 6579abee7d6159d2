// Forward/backward wall-time breakdown at the default model size.
use intact::denoiser::*;
use intact::gridmath::Tape;
use intact::scenes::{ObjectClass, PromptTokens};
use intact::rng;
use std::time::Instant;

fn main() {
    let config = DenoiserConfig::default();
    let params = DenoiserParams::init(config, 1).unwrap();
    let tokens = PromptTokens::for_class(ObjectClass::Disc);
    let z = rng::normal_vec(&mut rng::derive(1, "z", 0), 1024);

    let iters = 200;
    let t0 = Instant::now();
    for _ in 0..iters {
        let tape = Tape::new();
        let (eps, _, _) = forward_inference(&tape, z.clone(), 25, &tokens, &params).unwrap();
        std::hint::black_box(tape.values(&eps));
    }
    println!("forward (inference): {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    let t0 = Instant::now();
    for _ in 0..iters {
        let tape = Tape::new();
        let zt = tape.leaf(z.clone(), &[32, 32]).unwrap();
        let bound = params.bind(&tape, false).unwrap();
        let (_, record) = forward(&tape, &zt, 25, &tokens, &params, &bound).unwrap();
        let m = tape.select_row(&record.cross, 1).unwrap();
        let s = tape.sum(&m).unwrap();
        tape.backward(&s).unwrap();
        std::hint::black_box(tape.grad(&zt));
    }
    println!("forward+backward to z: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    let t0 = Instant::now();
    for _ in 0..iters {
        let tape = Tape::new();
        let bound = params.bind(&tape, true).unwrap();
        let zt = tape.constant(z.clone(), &[32, 32]).unwrap();
        let (eps, _) = forward(&tape, &zt, 25, &tokens, &params, &bound).unwrap();
        let target = tape.constant(z.clone(), &[32, 32]).unwrap();
        let d = tape.sub(&eps, &target).unwrap();
        let sq = tape.mul(&d, &d).unwrap();
        let loss = tape.scale(&tape.sum(&sq).unwrap(), 1.0 / 1024.0).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(params.collect_grads(&tape, &bound));
    }
    println!("train step (fwd+bwd all params): {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}
