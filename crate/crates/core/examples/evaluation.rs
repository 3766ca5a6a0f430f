// Distance of few-step samplers to a many-step guided reference, the
// negative-prompt control table and cross-step consistency.
//
// `cargo run --release --example evaluation -- <teacher.ckpt> <adapter.ckpt> [samples]`

use sunplug::adapter::{plug_into, SunAdapter};
use sunplug::checkpoint::{adapter_from_checkpoint, teacher_from_checkpoint, Checkpoint};
use sunplug::data::{make_dataset, DataConfig};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::eval::{heldout_requests, kd_consistency, msc_ablation, negative_control_eval, reference_set, EVAL_CSV_HEADER};
use sunplug::prompt::Vocabulary;
use sunplug::sampler::Sampler;
use sunplug::Result;

fn run(teacher: &TeacherModel, adapter: &SunAdapter, samples: usize) -> Result<()> {
    let student = Sampler::Student(plug_into(adapter, teacher)?);
    let guided = Sampler::TeacherCfg { teacher, w: 8.0 };

    let requests = heldout_requests(samples, 999)?;
    let reference = reference_set(teacher, &requests, 25, 8.0, 1)?;
    println!("{EVAL_CSV_HEADER}");
    for (name, model) in [("student", student), ("teacher-cfg", guided)] {
        println!("{}", kd_consistency(name, model, &requests, 4, &reference, 1)?.csv_row());
    }

    let prompts = make_dataset(64, 999, &DataConfig::default())?;
    let phrases: Vec<usize> = ["blur", "speckle", "hole"].iter().filter_map(|p| Vocabulary::index(p)).collect();
    let table = negative_control_eval(student, &prompts, &phrases, samples, 4, 9, 1)?;
    print!("{}", table.csv());
    for (i, &p) in phrases.iter().enumerate() {
        println!("{}: relative drop {:.2}", Vocabulary::name(p), table.reduction(i));
    }

    for row in msc_ablation(&[("student".into(), student)], &requests, 4, 8, 1)? {
        println!("{}", row.csv_row());
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    let teacher = TeacherModel::new(UNetConfig::tiny(), 1);
    run(&teacher, &SunAdapter::new(&teacher), 8)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        println!("no checkpoints given; evaluating an untrained teacher");
        return run_example();
    }
    let teacher = teacher_from_checkpoint(&Checkpoint::load(&args[0])?)?;
    let adapter = adapter_from_checkpoint(&Checkpoint::load(&args[1])?)?;
    run(&teacher, &adapter, args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256))
}
