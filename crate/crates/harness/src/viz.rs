//! `emit-viz`: per-iteration 2D PCA scatter data for external plotting.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adaicl_core::calibration::pca_2d;

use crate::config::ExperimentConfig;
use crate::run::{io_err, write_file, Dataset, IterationScores, RunError, Workbench};

/// Writes `viz/<strategy>/seed-<s>/iter-<i>.csv` under `run_dir` for every
/// cell found there, with rows `id,pca_x,pca_y,confidence,selected`.
/// Returns the files written, in a stable order.
pub fn emit_viz(run_dir: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, RunError> {
    let config_path = run_dir.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| RunError::Setup(format!("{}: {e}", config_path.display())))?;
    let out_root = out_dir.map_or_else(|| run_dir.join("viz"), Path::to_path_buf);
    let dataset = Dataset::load(&config)?;

    let mut written = Vec::new();
    for entry in &config.strategies {
        for &seed in &config.seeds {
            let cell = run_dir.join(entry.label()).join(format!("seed-{seed}"));
            let trace = cell.join("trace.jsonl");
            if !trace.exists() {
                return Err(RunError::Setup(format!("missing trace {}", trace.display())));
            }
            let scores_path = cell.join("scores.jsonl");
            let scores_text = fs::read_to_string(&scores_path).map_err(io_err(&scores_path))?;
            let iterations: Vec<IterationScores> = scores_text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(|e| RunError::Setup(format!("{}: {e}", scores_path.display())))?;

            let bench = Workbench::new(&dataset, &config, seed)?;
            let pool = &bench.candidates;
            let points: Vec<&[f64]> = (0..pool.len()).map(|i| pool.embedding(i)).collect();
            let xy = pca_2d(&points);
            for it in &iterations {
                let picked: BTreeSet<&str> = it.picked.iter().map(String::as_str).collect();
                let mut csv = String::from("id,pca_x,pca_y,confidence,selected\n");
                for (i, ex) in pool.examples().iter().enumerate() {
                    let conf = it.confidence.get(&ex.id).map(|c| c.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{}",
                        ex.id,
                        xy[i][0],
                        xy[i][1],
                        conf,
                        u8::from(picked.contains(ex.id.as_str()))
                    );
                }
                let path = out_root
                    .join(entry.label())
                    .join(format!("seed-{seed}"))
                    .join(format!("iter-{}.csv", it.iteration));
                write_file(&path, &csv)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
