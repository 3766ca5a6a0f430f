// The cosine noise schedule, DDIM steps and the inverse step that recovers
// the noise estimate joining two latents.

use sunplug::rng::{normal_tensor, stream};
use sunplug::schedule::NoiseSchedule;
use sunplug::Result;

pub fn run_example() -> Result<()> {
    let s = NoiseSchedule::default();
    println!("{:>6} {:>9} {:>9}", "t", "alpha", "sigma");
    for t in [s.floor, 0.25, 0.5, 0.75, 1.0] {
        println!("{t:>6.3} {:>9.5} {:>9.5}", s.alpha(t), s.sigma(t));
    }
    println!("4-step grid: {:?}", s.sampling_grid(4));

    let mut rng = stream(0, "schedule-example", 0);
    let x0 = normal_tensor(&mut rng, &[8]).cast::<f64>();
    let eps = normal_tensor(&mut rng, &[8]).cast::<f64>();
    let (t, u) = (0.9, 0.4);
    let zt = s.add_noise(&x0, &eps, t)?;
    // With the true noise a DDIM jump lands exactly on the forward process.
    let zu = s.ddim_step(&zt, &eps, t, u)?;
    let direct = s.add_noise(&x0, &eps, u)?;
    println!("DDIM vs forward process at t={u}: max gap {:.2e}", max_gap(zu.data(), direct.data()));

    let back = s.pseudo_epsilon(&zt, t, &zu, u)?;
    println!("recovered noise vs true noise: max gap {:.2e}", max_gap(back.data(), eps.data()));
    let x0_hat = s.predict_x0(&zt, &eps, t)?;
    println!("clean estimate vs x0: max gap {:.2e}", max_gap(x0_hat.data(), x0.data()));
    Ok(())
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
