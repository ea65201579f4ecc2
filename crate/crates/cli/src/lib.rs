//! Experiment runner for split federated co-learning: configuration files,
//! PGM and CSV formats, a threaded client executor and the `sfcl` binary.

pub mod config;
pub mod error;
pub mod pgm;
pub mod report;
pub mod runner;

use std::path::Path;

use sfcl_core::annsim::{deform_multiclass, DifficultyParams};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Deforms a label PGM guided by an image PGM and writes the result.
pub fn corrupt_files(image: &Path, label: &Path, out: &Path, params: &DifficultyParams, classes: u8) -> CliResult<()> {
    params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if classes < 2 {
        return Err(CliError::Config("--classes must be at least 2".into()));
    }
    let img = pgm::Graymap::read(image)?;
    let lab = pgm::Graymap::read(label)?;
    if (img.width, img.height) != (lab.width, lab.height) {
        return Err(CliError::format(label, "label and image differ in size"));
    }
    let mask = lab.to_labels(classes).map_err(|m| CliError::format(label, m))?;
    let present: Vec<u8> = (1..classes).filter(|&c| mask.contains(c)).collect();
    let deformed = deform_multiclass(&img.to_image(), &mask, params, &present)?;
    pgm::Graymap { maxval: lab.maxval.max(classes as u16 - 1), ..pgm::Graymap::from_labels(&deformed) }.write(out)
}
