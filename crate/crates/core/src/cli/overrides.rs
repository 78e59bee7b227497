//! `KEY=VALUE` overrides applied to a TOML document before it is parsed.

use crate::error::{Error, Result};
use toml::{Table, Value};

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Returns `text` with each `a.b.c=value` assignment applied. Values use TOML
/// syntax; anything that does not parse is taken as a bare string.
pub fn apply(text: &str, assignments: &[String]) -> Result<String> {
    let mut doc: Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for a in assignments {
        let (key, raw) = a
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got `{a}`")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidArgument(format!("bad key `{key}`")));
        }
        let mut table = &mut doc;
        for part in &path[..path.len() - 1] {
            let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("`{part}` in `{key}` is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    }
    toml::to_string(&doc).map_err(|e| Error::InvalidConfig(e.to_string()))
}
