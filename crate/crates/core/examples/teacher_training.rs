// Trains a small prompt-conditioned denoiser for a few hundred steps,
// fine-tunes it on the inverted style and round-trips it through a
// checkpoint.
//
// `cargo run --release --example teacher_training -- [steps]`

use sunplug::checkpoint::{teacher_checkpoint, teacher_from_checkpoint, Checkpoint};
use sunplug::data::{make_dataset, DataConfig, Style};
use sunplug::denoiser::{train_teacher, TeacherModel, TeacherTrainConfig, UNetConfig};
use sunplug::Result;

fn run(steps: usize) -> Result<()> {
    let data = make_dataset(512, 1, &DataConfig::default())?;
    let mut teacher = TeacherModel::new(UNetConfig::tiny(), 1);
    println!("teacher parameters: {}", teacher.store.num_scalars());
    let cfg = TeacherTrainConfig { steps, batch: 16, ..Default::default() };
    let losses = train_teacher(&mut teacher, &data, &cfg, |step, loss| {
        if step % (steps / 5).max(1) == 0 {
            println!("step {step:>5}  loss {loss:.4}");
        }
    })?;
    let window = (steps / 10).max(1);
    let mean = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    println!("loss {:.4} -> {:.4}", mean(&losses[..window]), mean(&losses[steps - window..]));

    let inverted = make_dataset(512, 2, &DataConfig { style: Style::Inverted, ..Default::default() })?;
    let mut tuned = teacher.clone();
    let ft = TeacherTrainConfig { steps: steps / 4, batch: 16, ..Default::default() };
    let l = train_teacher(&mut tuned, &inverted, &ft, |_, _| {})?;
    println!("inverted fine-tune, final loss {:.4}", l.last().copied().unwrap_or(f64::NAN));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("teacher.ckpt");
    teacher_checkpoint(&tuned).save(&path)?;
    let back = teacher_from_checkpoint(&Checkpoint::load(&path)?)?;
    assert_eq!(back.store.checksum(), tuned.store.checksum());
    println!("checkpoint round trip ok ({} bytes)", std::fs::metadata(&path)?.len());
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(40)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(400);
    run(steps)
}
