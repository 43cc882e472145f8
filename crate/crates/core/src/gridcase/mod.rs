//! MATPOWER case parsing and the DC measurement model.

mod model;
mod parse;

use std::path::Path;

pub use model::{
    build_grid_model, Branch, GridFile, GridFileBranch, GridModel, MeterConfig, MeterDescriptor,
    MeterKind, GRID_JSON_VERSION,
};
pub use parse::{parse_matpower_case, BusType, RawBranch, RawBus, RawCase};

use crate::{Error, Result};

const CASE14: &str = include_str!("../../data/case14.m");
const CASE30: &str = include_str!("../../data/case30.m");
const CASE118: &str = include_str!("../../data/case118.m");

/// Names of the case files compiled into the crate.
pub const BUNDLED_CASES: [&str; 3] = ["case14", "case30", "case118"];

pub fn bundled_case_text(name: &str) -> Option<&'static str> {
    match name {
        "case14" => Some(CASE14),
        "case30" => Some(CASE30),
        "case118" => Some(CASE118),
        _ => None,
    }
}

pub fn bundled_case(name: &str) -> Result<RawCase> {
    let text = bundled_case_text(name)
        .ok_or_else(|| Error::Validation(format!("no bundled case named {name:?}")))?;
    parse_matpower_case(text)
}

/// Load a case from a path, or from the bundled set when `spec` names one.
pub fn load_case(spec: &str) -> Result<RawCase> {
    if let Some(text) = bundled_case_text(spec) {
        return parse_matpower_case(text);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matpower_case(&text)
}

pub fn load_grid_json(path: &Path) -> Result<GridModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: GridFile = serde_json::from_str(&text)?;
    file.into_model()
}

pub fn save_grid_json(grid: &GridModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&GridFile::from_model(grid))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
