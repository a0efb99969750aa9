//! File formats: protocol JSON, number formatting for CSV output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlVector, Protocol, Segment, ENDPOINT};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolDoc {
    total_time: f64,
    segments: Vec<SegmentDoc>,
    #[serde(default = "default_endpoint")]
    endpoint: [f64; 3],
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    duration: f64,
    delta: [f64; 3],
}

fn default_endpoint() -> [f64; 3] {
    ENDPOINT
}

impl Protocol {
    pub fn to_json(&self) -> String {
        let doc = ProtocolDoc {
            total_time: self.total_time(),
            segments: self
                .segments()
                .iter()
                .map(|s| SegmentDoc {
                    duration: s.duration,
                    delta: s.control.as_array(),
                })
                .collect(),
            endpoint: ENDPOINT,
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("protocol serializes")
    }

    /// Parses a protocol document; `source_name` labels diagnostics.
    pub fn from_json(text: &str, source_name: &str) -> Result<Protocol> {
        let doc: ProtocolDoc = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                source_name,
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        if doc.endpoint != ENDPOINT {
            return Err(Error::parse(
                source_name,
                "field `endpoint`",
                format!("expected {ENDPOINT:?}, found {:?}", doc.endpoint),
            ));
        }
        let mut segments = Vec::with_capacity(doc.segments.len());
        for (n, s) in doc.segments.iter().enumerate() {
            let control = ControlVector::new(s.delta).map_err(|e| {
                Error::parse(source_name, format!("segments[{n}].delta"), e.to_string())
            })?;
            segments.push(Segment {
                duration: s.duration,
                control,
            });
        }
        let mut p = Protocol::new(segments, doc.total_time)
            .map_err(|e| Error::parse(source_name, "segments", e.to_string()))?;
        p.metadata = doc.metadata;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Protocol> {
        let text = std::fs::read_to_string(path)?;
        Protocol::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
