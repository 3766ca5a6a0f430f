// Reverse-mode gradients of a small attention-like graph, checked against
// central differences.

use sunplug::{Result, Tape, Tensor};

fn loss(tape: &mut Tape<f64>, x: sunplug::Var, w: sunplug::Var) -> Result<sunplug::Var> {
    let h = tape.matmul(x, w)?;
    let p = tape.softmax(h, None)?;
    let s = tape.silu(p)?;
    let target = tape.constant(Tensor::full(&[3, 2], 0.25))?;
    tape.mse(s, target)
}

pub fn run_example() -> Result<()> {
    let x0 = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w0 = Tensor::new(&[4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?;

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone(), true)?;
    let w = tape.leaf(w0.clone(), true)?;
    let out = loss(&mut tape, x, w)?;
    println!("loss = {:.6}", tape.value(out).item());
    let grads = tape.backward(out)?;
    let analytic = grads.get(w).expect("w requires grad").clone();

    let eval = |w: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let (x, w) = (t.constant(x0.clone())?, t.constant(w.clone())?);
        let l = loss(&mut t, x, w)?;
        Ok(t.value(l).item())
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w0.numel() {
        let (mut plus, mut minus) = (w0.clone(), w0.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12));
        println!("dL/dw[{i}]  tape {a:+.8}  finite diff {numeric:+.8}");
    }
    println!("worst relative error {worst:.2e}");
    assert!(worst < 1e-4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
