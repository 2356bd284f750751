//! Library surface of the s3tu command-line tool: the trainer plus the
//! dataset-argument plumbing shared by the subcommands.

pub mod trainer;

use std::path::Path;

use s3tu::data::{generate_synthetic, load_manifest, SamplePair, SynthConfig};
use s3tu::error::{Error, Result};

/// A `--data` argument is a JSON file: an array is a dataset manifest, an
/// object is a `SynthConfig` describing a generated dataset.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value {
        serde_json::Value::Array(_) => load_manifest(path),
        serde_json::Value::Object(_) => {
            let cfg: SynthConfig = serde_json::from_value(value)?;
            generate_synthetic(&cfg)
        }
        _ => Err(Error::Format(format!(
            "{}: expected a manifest array or a synth-config object",
            path.display()
        ))),
    }
}
