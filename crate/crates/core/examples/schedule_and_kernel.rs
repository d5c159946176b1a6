//! Noise schedule values and a perturb / kernel-score round trip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdiff::sde::{kernel_score, perturb};
use segdiff::{ImageTensor, Shape, SigmaSchedule, TimePoint};

fn main() -> segdiff::Result<()> {
    let schedule = SigmaSchedule::default();
    println!("t\tsigma\tg");
    for t in [0.0, 0.1, 0.25, 0.4, 0.5, 0.75, 1.0] {
        let (_, g) = schedule.drift_diffusion(t)?;
        println!("{t:.2}\t{:.6}\t{:.6}", schedule.sigma(t)?, g);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = ImageTensor::from_fn(Shape::square(8), |_, y, x| (x + y) as f64 / 14.0);
    let z = ImageTensor::standard_normal(x0.shape(), &mut rng);
    let t = TimePoint::new(0.3)?;
    let xt = perturb(&x0, &schedule, t, &z)?;
    let score = kernel_score(&xt, &x0, &schedule, t)?;
    // sigma * score recovers -z exactly up to rounding
    let sigma = schedule.sigma(t.get())?;
    let err = score
        .values()
        .iter()
        .zip(z.values())
        .map(|(s, z)| (sigma * s + z).abs())
        .fold(0.0, f64::max);
    println!("max |sigma * score + z| at t = 0.3: {err:.2e}");
    Ok(())
}
