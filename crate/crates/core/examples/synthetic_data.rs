// Renders captioned 16x16 images, writes a preview and checks the attribute
// oracle against the captions it was rendered from.
//
// `cargo run --release --example synthetic_data -- [count] [out.pgm]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use sunplug::data::{attribute_oracle, make_dataset, write_pgm_grid, DataConfig, Style};
use sunplug::prompt::Vocabulary;
use sunplug::Result;

fn run(count: usize, preview: Option<PathBuf>) -> Result<()> {
    for style in [Style::Base, Style::Inverted, Style::Striped] {
        let data = make_dataset(4, 7, &DataConfig { style, ..Default::default() })?;
        println!("{style:?}: {}", data.examples[0].prompt);
    }

    let data = make_dataset(count, 1, &DataConfig::default())?;
    let mut agree = 0;
    let mut misses: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &data.examples {
        let report = attribute_oracle(&ex.pixels);
        let missing: Vec<usize> = ex
            .prompt
            .tokens()
            .iter()
            .map(|&t| t as usize)
            .filter(|&t| !report.present(t))
            .collect();
        let extra = report.detected().into_iter().filter(|&d| !ex.prompt.contains(d)).count();
        for &m in &missing {
            *misses.entry(Vocabulary::name(m)).or_default() += 1;
        }
        if missing.is_empty() && extra == 0 {
            agree += 1;
        }
    }
    println!("oracle agrees with the caption on {agree}/{count} images; missed phrases {misses:?}");

    if let Some(path) = preview {
        let images: Vec<Vec<f32>> = data.examples.iter().take(32).map(|e| e.pixels.clone()).collect();
        write_pgm_grid(&path, &images, 8, 4)?;
        println!("preview written to {}", path.display());
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    run(200, None)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let count = args.next().map_or(Ok(1000), |a| a.parse()).map_err(|_| sunplug::Error::Usage("count".into()))?;
    run(count, args.next().map(PathBuf::from))
}
