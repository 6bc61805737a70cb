use std::path::{Path, PathBuf};

use super::Scenario;
use crate::error::{Error, Result};

/// Parse a scenario document. Unknown fields are ignored with a warning;
/// malformed input reports the offending field path.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let mut record = |path: serde_ignored::Path<'_>| ignored.push(path.to_string());
    let wrapped = serde_ignored::Deserializer::new(&mut de, &mut record);
    let scenario: Scenario = serde_path_to_error::deserialize(wrapped).map_err(|e| {
        let message = e.inner().to_string();
        let mut field = e.path().to_string();
        // Missing fields are reported against their parent; name the field itself.
        if let Some(name) = message
            .strip_prefix("missing field `")
            .and_then(|m| m.split('`').next())
        {
            field = if field == "." {
                name.to_string()
            } else {
                format!("{field}.{name}")
            };
        }
        Error::Parse { field, message }
    })?;
    de.end().map_err(|e| Error::Parse {
        field: ".".into(),
        message: e.to_string(),
    })?;
    for path in ignored {
        tracing::warn!(field = %path, scenario = %scenario.id, "ignoring unknown scenario field");
    }
    Ok(scenario)
}

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string(s).expect("scenario serialises")
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scenario_to_json(s)).map_err(|e| Error::io(path, e))
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text)
}

/// One scenario file of a corpus directory, with its text as read from disk.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub text: String,
    pub scenario: Scenario,
}

/// Every `*.json` file of `dir`, ordered by file name. Scenario ids must be unique.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut seen = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let scenario = parse_scenario(&text).map_err(|e| match e {
            Error::Parse { field, message } => Error::Parse {
                field,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        if let Some(prev) = seen.insert(scenario.id.clone(), path.clone()) {
            return Err(Error::Config(format!(
                "scenario id `{}` appears in both {} and {}",
                scenario.id,
                prev.display(),
                path.display()
            )));
        }
        out.push(CorpusEntry { path, text, scenario });
    }
    Ok(out)
}
