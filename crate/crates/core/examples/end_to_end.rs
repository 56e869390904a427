// The whole experiment from a TOML config: generate, corrupt, split, probe,
// score, refine, refit and evaluate, with every artifact written to disk.

use dimrisk::pipeline::{render_text, run_pipeline, PipelineConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/pipeline.toml"))?;
    let dir = tempfile::tempdir()?;
    cfg.output_dir = Some(dir.path().to_path_buf());

    let report = run_pipeline(&cfg)?;
    print!("{}", render_text(&report));

    let mut files: Vec<String> = std::fs::read_dir(dir.path())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    files.sort();
    println!("\nartifacts: {}", files.join(", "));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
