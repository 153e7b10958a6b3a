//! Output files, each carrying the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rsv_core::Result;
use serde::Serialize;
use serde_json::Value;

pub fn out_dir(dir: &str) -> Result<PathBuf> {
    let p = PathBuf::from(dir);
    fs::create_dir_all(&p)?;
    Ok(p)
}

/// `{"run_config": .., "result": ..}`, pretty-printed.
pub fn json_payload<T: Serialize>(echo: &Value, result: &T) -> Result<String> {
    let v = serde_json::json!({ "run_config": echo, "result": result });
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// CSV body preceded by a `# run_config: {..}` comment line.
pub fn csv_payload(echo: &Value, header: &str, rows: &[String]) -> String {
    let mut s = format!("# run_config: {echo}\n{header}\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}
