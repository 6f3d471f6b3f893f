//! Point-set files: a JSON array of coordinate arrays, or an object
//! `{"points": [[...], ...], "weights": [...]}`.

use std::path::Path;

use entot::measures::DiscreteMeasure;
use serde::Deserialize;

use crate::CliError;

#[derive(Deserialize)]
#[serde(untagged)]
enum PointSetFile {
    Bare(Vec<Vec<f64>>),
    Weighted(DiscreteMeasure),
}

pub fn parse_point_set(text: &str) -> Result<DiscreteMeasure, CliError> {
    let file: PointSetFile = serde_json::from_str(text).map_err(|e| {
        CliError::Config(format!(
            "point set is neither an array of points nor {{points, weights}}: {e}"
        ))
    })?;
    match file {
        PointSetFile::Bare(rows) => DiscreteMeasure::from_rows(&rows, None).map_err(CliError::from),
        PointSetFile::Weighted(m) => Ok(m),
    }
}

pub fn read_point_set(path: &Path) -> Result<DiscreteMeasure, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_point_set(&text)
}

/// Object form with explicit weights; floats are written in shortest
/// round-trip form, so re-reading gives back the same measure.
pub fn point_set_json(m: &DiscreteMeasure) -> String {
    serde_json::to_string_pretty(m).expect("measures always serialize")
}
