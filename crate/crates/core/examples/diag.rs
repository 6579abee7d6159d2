// Denoising diagnostic: feed q_sample(x0, t) and measure x0-hat reconstruction error.
use intact::denoiser::*;
use intact::gridmath::Tape;
use intact::scenes::*;
use intact::rng;

fn main() {
    let (params, _) = load_checkpoint(std::path::Path::new(std::env::args().nth(1).unwrap().as_str())).unwrap();
    let schedule = NoiseSchedule::default_linear(params.config.t_max).unwrap();
    let dataset = make_dataset(16, &AugmentPolicy::none(42), 32, rng::derive_seed(42, "scenes", 0)).unwrap();
    for t in [2usize, 5, 10, 20, 30, 40, 50] {
        let mut err = 0.0f64;
        let mut eps_err = 0.0f64;
        for (i, item) in dataset.iter().enumerate() {
            let (noisy, noise) = q_sample_seeded(&item.image.pixels, t, &schedule, 7, i as u64).unwrap();
            let tape = Tape::new();
            let (eps, _, _) = forward_inference(&tape, noisy.clone(), t, &item.tokens, &params).unwrap();
            let eps_v = tape.values(&eps);
            let ab = schedule.alpha_bar(t);
            let (sa, so) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut se = 0.0f64; let mut see = 0.0f64;
            for j in 0..noisy.len() {
                let x0_hat = (noisy[j] - so * eps_v[j]) / sa;
                se += ((x0_hat - item.image.pixels[j]) as f64).powi(2);
                see += ((eps_v[j] - noise[j]) as f64).powi(2);
            }
            err += se / noisy.len() as f64;
            eps_err += see / noisy.len() as f64;
        }
        println!("t={t:2}  x0_rmse={:.4}  eps_mse={:.4}", (err/16.0).sqrt(), eps_err/16.0);
    }
}
