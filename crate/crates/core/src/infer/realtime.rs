use std::sync::mpsc::SyncSender;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::capture::FrameSource;
use crate::dataset::labelmap::LabelMap;
use crate::error::{Error, Result};
use crate::geometry::BoxCorner;
use crate::infer::Detector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDetection {
    pub label: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxCorner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub timestamp: f64,
    pub latency_ms: f64,
    pub detections: Vec<NamedDetection>,
}

impl FrameDetections {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("detections serialize")
    }
}

/// Runs the detector on every frame until the source is exhausted. The sink
/// is a bounded channel, so a slow consumer throttles the loop. Returns the
/// number of frames processed; stops early if the receiver hangs up.
pub fn run_realtime(
    source: &mut dyn FrameSource,
    detector: &dyn Detector,
    labels: &LabelMap,
    sink: &SyncSender<FrameDetections>,
) -> Result<u64> {
    let mut frame_id = 0;
    loop {
        let (frame, timestamp) = match source.next_frame() {
            Ok(f) => f,
            Err(Error::SourceExhausted) => return Ok(frame_id),
            Err(e) => return Err(e),
        };
        let started = Instant::now();
        let detections = detector
            .detect(&frame)?
            .into_iter()
            .map(|d| {
                let label = labels
                    .name_of(d.class_id)
                    .ok_or_else(|| Error::UnknownLabel(format!("class id {}", d.class_id)))?;
                Ok(NamedDetection {
                    label: label.to_string(),
                    class_id: d.class_id,
                    score: d.score,
                    bbox: d.bbox,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = FrameDetections {
            frame_id,
            timestamp,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            detections,
        };
        frame_id += 1;
        if sink.send(out).is_err() {
            return Ok(frame_id);
        }
    }
}
