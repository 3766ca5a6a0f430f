// Building the negative-prompt adapter on a host, the zero-initialized
// identity, scale invariance of the normalized subtraction, and plug-in
// checks against other hosts.

use sunplug::adapter::{attention_normalize, plug_into, SunAdapter};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::prompt::Prompt;
use sunplug::rng::{normal_tensor, stream};
use sunplug::{Result, Tape, Tensor};

pub fn run_example() -> Result<()> {
    let host = TeacherModel::new(UNetConfig::tiny(), 1);
    let adapter = SunAdapter::new(&host);
    println!(
        "{} cross-attention blocks, adapter parameters {} (host {})",
        adapter.blocks.len(),
        adapter.num_params(),
        host.store.num_scalars()
    );

    let z = normal_tensor(&mut stream(0, "adapter-example", 0), &[2, 1, 16, 16]);
    let ts = [0.3, 0.8];
    let pos = vec![Prompt::parse("circle dim")?, Prompt::parse("cross")?];
    let neg = vec![Prompt::parse("speckle")?, Prompt::parse("hole blur")?];
    let student = plug_into(&adapter, &host)?.predict(&z, &ts, &pos, &neg)?;
    let plain = host.predict(&z, &ts, &pos)?;
    println!("untrained student vs host: mse {:e}", student.mse(&plain)?);

    // g for a negative feature scaled by c.
    let mut rng = stream(1, "adapter-example", 0);
    let zp = normal_tensor(&mut rng, &[4, 8]).cast::<f64>();
    let zn = normal_tensor(&mut rng, &[4, 8]).cast::<f64>();
    for normalize in [true, false] {
        let g = |c: f64| -> Result<Tensor<f64>> {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(zp.clone())?;
            let n = tape.constant(zn.map(|v| v * c))?;
            let a = tape.constant(Tensor::full(&[1], 0.5))?;
            let b = tape.constant(Tensor::full(&[1], 0.1))?;
            let out = attention_normalize(&mut tape, p, n, a, b, normalize)?;
            Ok(tape.value(out).clone())
        };
        let base = g(1.0)?;
        for c in [1e-3, 1e3] {
            println!("normalize={normalize:<5} c={c:<6} |g(c) - g(1)|^2 = {:.3e}", g(c)?.mse(&base)?);
        }
    }

    let sibling = TeacherModel::new(UNetConfig::tiny(), 2);
    println!("same architecture, other weights: {:?}", plug_into(&adapter, &sibling).map(|_| "plugs in"));
    let wider = TeacherModel::new(UNetConfig::compact(), 1);
    match plug_into(&adapter, &wider) {
        Ok(_) => println!("unexpected: wider host accepted"),
        Err(e) => println!("wider host rejected: {e}"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
