use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{io_err, Result};

/// One structured event; serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub event: String,
    #[serde(flatten)]
    pub fields: serde_json::Map<String, Value>,
}

/// Line-oriented JSON event log of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    events: Vec<Event>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `kind` with the fields of `payload`, which must be a JSON
    /// object (anything else is stored under `value`).
    pub fn push(&mut self, kind: &str, payload: Value) {
        let fields = match payload {
            Value::Object(m) => m,
            other => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        self.events.push(Event {
            event: kind.to_string(),
            fields,
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.event == kind).count()
    }

    pub fn extend(&mut self, other: RunLog) {
        self.events.extend(other.events);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }
}
