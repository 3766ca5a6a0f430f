// Distills an adapter from a frozen guided teacher with and without the
// multi-step consistency term and shows the teacher is untouched.
//
// `cargo run --release --example adapter_distillation -- [teacher.ckpt] [steps]`

use sunplug::adapter::plug_into;
use sunplug::checkpoint::{teacher_from_checkpoint, Checkpoint};
use sunplug::data::{make_dataset, DataConfig};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::distill::{total_loss, train_adapter, DistillBatch, DistillConfig};
use sunplug::rng::stream;
use sunplug::schedule::NoiseSchedule;
use sunplug::Result;

fn run(teacher: &TeacherModel, steps: usize) -> Result<()> {
    let data = make_dataset(512, 1, &DataConfig::default())?;
    let schedule = NoiseSchedule::default();
    let probe = DistillBatch::draw(&data, &DistillConfig::default(), &schedule, &mut stream(5, "probe", 0))?;
    let before = teacher.store.checksum();
    for lambda in [0.1, 0.0] {
        let cfg = DistillConfig { lambda, steps, batch: 8, ..Default::default() };
        let (adapter, log) = train_adapter(teacher, &data, &cfg, |row, _| {
            if row.step % (steps / 4).max(1) == 0 {
                println!("  lambda={lambda} step {:>4}  guided {:.5}  consistency {:.5}", row.step, row.loss_cfg, row.loss_msc);
            }
            Ok(())
        })?;
        let parts = total_loss(plug_into(&adapter, teacher)?, &schedule, &probe, &cfg)?;
        println!(
            "lambda={lambda}: {} steps, probe losses guided {:.5} consistency {:.5}; alphas {:?}",
            log.len(),
            parts.cfg,
            parts.msc,
            adapter.alphas()
        );
    }
    assert_eq!(before, teacher.store.checksum());
    println!("teacher parameters unchanged");
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(&TeacherModel::new(UNetConfig::tiny(), 1), 4)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let teacher = match args.first() {
        Some(p) => teacher_from_checkpoint(&Checkpoint::load(p)?)?,
        None => TeacherModel::new(UNetConfig::tiny(), 1),
    };
    run(&teacher, args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200))
}
