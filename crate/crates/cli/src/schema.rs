//! The shipped JSON schemas and schema-checked config loading.

use std::fs;
use std::path::Path;

use jsonschema::{Resource, Validator};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{CliError, Result};

/// Every shipped schema, addressed as `urn:netdisguise:<name>`.
pub const SCHEMAS: [(&str, &str); 10] = [
    ("task", include_str!("../schemas/task.schema.json")),
    ("layer", include_str!("../schemas/layer.schema.json")),
    ("template", include_str!("../schemas/template.schema.json")),
    ("arch", include_str!("../schemas/arch.schema.json")),
    ("train", include_str!("../schemas/train.schema.json")),
    ("disguise", include_str!("../schemas/disguise.schema.json")),
    ("pool", include_str!("../schemas/pool.schema.json")),
    ("report", include_str!("../schemas/report.schema.json")),
    ("output", include_str!("../schemas/output.schema.json")),
    ("error", include_str!("../schemas/error.schema.json")),
];

fn contents(name: &str) -> Value {
    let (_, text) = SCHEMAS.iter().find(|(n, _)| *n == name).expect("known schema");
    serde_json::from_str(text).expect("shipped schema parses")
}

pub fn validator(name: &str) -> Validator {
    let resources = SCHEMAS.iter().map(|(n, _)| (format!("urn:netdisguise:{n}"), Resource::from_contents(contents(n)).expect("shipped schema resource")));
    jsonschema::options().with_resources(resources).build(&contents(name)).expect("shipped schema compiles")
}

/// Reads `path`, checks it against schema `name`, then deserializes it.
pub fn load<T: DeserializeOwned>(path: &Path, name: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let problems: Vec<String> = validator(name).iter_errors(&value).map(|e| format!("{e} at `{}`", e.instance_path)).collect();
    if !problems.is_empty() {
        return Err(CliError::config(format!("{} does not match the {name} schema: {}", path.display(), problems.join("; "))));
    }
    serde_json::from_value(value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}
