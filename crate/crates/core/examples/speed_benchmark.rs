// Evaluation counts and single-thread wall clock of the guided teacher and
// the adapted student over a grid of step counts.
//
// `cargo run --release --example speed_benchmark -- [samples]`

use sunplug::adapter::{plug_into, SunAdapter};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::eval::heldout_requests;
use sunplug::sampler::{bench, Sampler, BENCH_CSV_HEADER};
use sunplug::Result;

fn run(samples: usize, repeats: usize) -> Result<()> {
    let teacher = TeacherModel::new(UNetConfig::tiny(), 1);
    let adapter = SunAdapter::new(&teacher);
    let models = [
        ("teacher-cfg".to_string(), Sampler::TeacherCfg { teacher: &teacher, w: 8.0 }),
        ("student".to_string(), Sampler::Student(plug_into(&adapter, &teacher)?)),
    ];
    let requests = heldout_requests(samples, 1)?;
    let rows = bench(&models, &requests, &[4, 8, 25], 64, repeats)?;
    println!("{BENCH_CSV_HEADER}");
    for r in &rows {
        println!("{}", r.csv_row());
    }
    let find = |m: &str, s: usize| rows.iter().find(|r| r.model == m && r.steps == s).expect("benchmarked");
    let (t, s) = (find("teacher-cfg", 25), find("student", 4));
    println!(
        "25-step guided vs 4-step student: {:.1}x evaluations, {:.1}x wall clock",
        t.nfe as f64 / s.nfe as f64,
        t.wall_ms / s.wall_ms
    );
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(4, 1)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run(std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64), 3)
}
