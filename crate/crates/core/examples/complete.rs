// Partial-denoise completion: noise a real scene to t*, run the remaining
// reverse steps, and measure how well structure survives.
use intact::denoiser::*;
use intact::gridmath::Tape;
use intact::sampler::{reverse_step, SamplerVariant};
use intact::scenes::*;
use intact::rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (params, _) = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let schedule = NoiseSchedule::default_linear(params.config.t_max).unwrap();
    let dataset = make_dataset(8, &AugmentPolicy::none(42), 32, rng::derive_seed(42, "scenes", 0)).unwrap();
    for t_start in [10usize, 20, 30, 40, 50] {
        let mut total_err = 0.0f64;
        for (i, item) in dataset.iter().enumerate() {
            let (mut z, _) = q_sample_seeded(&item.image.pixels, t_start, &schedule, 99, i as u64).unwrap();
            let mut rng_t = rng::derive(100, "traj", i as u64);
            for t in (1..=t_start).rev() {
                let tape = Tape::new();
                let (eps, _, _) = forward_inference(&tape, z.clone(), t, &item.tokens, &params).unwrap();
                z = reverse_step(&z, t, &tape.values(&eps), SamplerVariant::Ddim, &schedule, false, &mut rng_t).unwrap();
            }
            let err: f64 = z.iter().zip(&item.image.pixels)
                .map(|(&a, &b)| ((a.clamp(0.0,1.0) - b) as f64).powi(2)).sum::<f64>() / 1024.0;
            total_err += err.sqrt();
        }
        println!("t_start={t_start:2}  mean reconstruction rmse {:.4}", total_err / 8.0);
    }
}
