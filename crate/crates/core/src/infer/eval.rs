use serde::{Deserialize, Serialize};

use crate::dataset::labelmap::LabelMap;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::infer::{postprocess, Detection, PostprocessConfig};
use crate::net::TinyNet;

/// Anything that turns a frame into detections.
pub trait Detector: Sync {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>>;

    fn detect_batch(&self, images: &[RgbImage]) -> Result<Vec<Vec<Detection>>> {
        images.iter().map(|i| self.detect(i)).collect()
    }
}

/// A trained network plus post-processing; frames are resized to the model input.
pub struct ModelDetector {
    pub model: TinyNet<f32>,
    pub config: PostprocessConfig,
}

impl ModelDetector {
    pub fn new(model: TinyNet<f32>, config: PostprocessConfig) -> Self {
        ModelDetector { model, config }
    }

    fn prepare(&self, image: &RgbImage) -> RgbImage {
        let s = self.model.config().input_size;
        image.resize(s, s)
    }
}

impl Detector for ModelDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        Ok(self.detect_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn detect_batch(&self, images: &[RgbImage]) -> Result<Vec<Vec<Detection>>> {
        let inputs: Vec<RgbImage> = images.iter().map(|i| self.prepare(i)).collect();
        self.model
            .forward(&inputs)?
            .iter()
            .map(|p| postprocess(p, self.model.anchors(), &self.config))
            .collect()
    }
}

/// One validation image with the class it shows.
#[derive(Debug, Clone)]
pub struct ValidationItem {
    pub image: RgbImage,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    /// Percent per class; `None` when the class had no validation images.
    pub rates: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub average: f64,
    /// Classes left out of the average for lack of samples.
    pub excluded: Vec<String>,
}

/// Builds a report from per-class rates (percent). The average is the plain
/// mean over classes that have a rate.
pub fn aggregate_rates(labels: &LabelMap, rates: &[Option<f64>], counts: &[usize]) -> Result<EvalReport> {
    if rates.len() != labels.len() || counts.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels, {} rates, {} counts",
            labels.len(),
            rates.len(),
            counts.len()
        )));
    }
    let present: Vec<f64> = rates.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::ValidationError("no class has any validation samples".into()));
    }
    let names: Vec<String> = labels.names().map(str::to_string).collect();
    Ok(EvalReport {
        excluded: names
            .iter()
            .zip(rates)
            .filter(|(_, r)| r.is_none())
            .map(|(n, _)| n.clone())
            .collect(),
        labels: names,
        rates: rates.to_vec(),
        counts: counts.to_vec(),
        average: present.iter().sum::<f64>() / present.len() as f64,
    })
}

/// Confidence rate of a class: the mean, over that class's validation
/// images, of the best score the detector gives that class (0 if none).
pub fn evaluate_confidence(detector: &dyn Detector, items: &[ValidationItem], labels: &LabelMap) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::ValidationError("validation set is empty".into()));
    }
    let mut sums = vec![0.0; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for chunk in items.chunks(32) {
        let images: Vec<RgbImage> = chunk.iter().map(|i| i.image.clone()).collect();
        let dets = detector.detect_batch(&images)?;
        for (item, d) in chunk.iter().zip(dets) {
            if item.class_id == 0 || item.class_id > labels.len() {
                return Err(Error::ValidationError(format!("class id {} not in label map", item.class_id)));
            }
            let best = d
                .iter()
                .filter(|x| x.class_id == item.class_id)
                .map(|x| x.score)
                .fold(0.0, f64::max);
            sums[item.class_id - 1] += best;
            counts[item.class_id - 1] += 1;
        }
    }
    let rates: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| 100.0 * s / n as f64))
        .collect();
    aggregate_rates(labels, &rates, &counts)
}

impl EvalReport {
    /// Nine classes per row, names above their rates.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (names, rates) in self.labels.chunks(9).zip(self.rates.chunks(9)) {
            out.push_str(&names.join("\t"));
            out.push('\n');
            let cells: Vec<String> = rates
                .iter()
                .map(|r| match r {
                    Some(v) => format!("{}%", v.round()),
                    None => "n/a".into(),
                })
                .collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out.push_str(&format!("Average confidence rate: {:.2}%\n", self.average));
        if !self.excluded.is_empty() {
            out.push_str(&format!("Excluded (no samples): {}\n", self.excluded.join(", ")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
