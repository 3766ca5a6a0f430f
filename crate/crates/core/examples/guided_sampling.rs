// Few-step DDIM sampling with classifier-free guidance, writing an image
// grid and the per-sample evaluation counts.
//
// `cargo run --release --example guided_sampling -- [teacher.ckpt] [steps] [out.pgm]`

use std::path::PathBuf;

use sunplug::checkpoint::{teacher_from_checkpoint, Checkpoint};
use sunplug::data::{attribute_oracle, write_pgm_grid};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::prompt::{Prompt, Vocabulary};
use sunplug::sampler::{images, sample_teacher_cfg, SampleOptions, SampleRequest};
use sunplug::Result;

fn run(teacher: &TeacherModel, steps: usize, out: Option<PathBuf>) -> Result<()> {
    let positive = Prompt::parse("square large bright")?;
    let requests: Vec<SampleRequest> = (0..16)
        .map(|seed| SampleRequest { positive: positive.clone(), negative: Prompt::parse("blur").unwrap(), seed })
        .collect();
    for w in [1.0, 3.0, 8.0] {
        let traces = sample_teacher_cfg(teacher, &requests, w, SampleOptions::new(steps))?;
        let imgs = images(&traces);
        let square = Vocabulary::index("square").expect("shape phrase");
        let hits = imgs.iter().filter(|x| attribute_oracle(x).present(square)).count();
        println!(
            "w={w:<4} steps={steps} evaluations/sample={} squares detected {hits}/{}",
            traces[0].nfe,
            imgs.len()
        );
        if let (Some(path), true) = (&out, w == 8.0) {
            write_pgm_grid(path, &imgs, 4, 4)?;
            println!("grid written to {}", path.display());
        }
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(&TeacherModel::new(UNetConfig::tiny(), 1), 4, None)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let teacher = match args.first() {
        Some(p) => teacher_from_checkpoint(&Checkpoint::load(p)?)?,
        None => TeacherModel::new(UNetConfig::tiny(), 1),
    };
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    run(&teacher, steps, args.get(2).map(PathBuf::from))
}
