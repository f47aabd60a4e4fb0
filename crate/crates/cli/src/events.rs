//! Line-delimited JSON event log, mirrored to `tracing`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{Map, Value};

use crate::error::{PipelineError, Result};

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl EventLog {
    /// Appends to `path`, creating it and its parent directory.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one event. `fields` must be a JSON object.
    pub fn emit(&self, fields: Value) -> Result<()> {
        let obj: Map<String, Value> = match fields {
            Value::Object(m) => m,
            other => Map::from_iter([("value".to_string(), other)]),
        };
        let line = serde_json::to_string(&obj).expect("event serializes");
        tracing::info!(target: "mocl_seg", event = %line);
        let mut f = self.file.lock().expect("event log lock");
        writeln!(f, "{line}").map_err(|e| PipelineError::io(&self.path, e))
    }

    /// All events recorded so far, oldest first.
    pub fn read_all(path: &Path) -> Result<Vec<Value>> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| PipelineError::Format {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}
