use serde::{Deserialize, Serialize};

use super::engine::Record;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: f64,
    pub device: String,
    pub kind: String,
    pub duration: f64,
    pub bytes: f64,
}

/// Activities in start-time order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

impl EventTrace {
    pub(crate) fn from_records(records: &[Record], participants: &[String]) -> Self {
        EventTrace {
            records: records
                .iter()
                .map(|r| TraceRecord {
                    time: r.start,
                    device: participants[r.device].clone(),
                    kind: r.kind.as_str().to_string(),
                    duration: r.duration,
                    bytes: r.bytes,
                })
                .collect(),
        }
    }

    /// Comma-delimited table with a `time,device,kind,duration,bytes` header.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("time,device,kind,duration,bytes\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.time, r.device, r.kind, r.duration, r.bytes));
        }
        out
    }

    pub fn is_time_ordered(&self) -> bool {
        self.records.windows(2).all(|w| w[0].time <= w[1].time)
    }
}
