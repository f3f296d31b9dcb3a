//! Object-detection `Example` records built from VOC annotations.

use crate::dataset::labelmap::LabelMap;
use crate::dataset::proto::{self, Feature, Features};
use crate::dataset::voc::{Annotation, PixelBox, VocObject};
use crate::error::{Error, Result};
use crate::geometry::BoxCorner;
use crate::loss::GroundTruth;

pub const KEY_HEIGHT: &str = "image/height";
pub const KEY_WIDTH: &str = "image/width";
pub const KEY_FILENAME: &str = "image/filename";
pub const KEY_SOURCE_ID: &str = "image/source_id";
pub const KEY_FORMAT: &str = "image/format";
pub const KEY_ENCODED: &str = "image/encoded";
pub const KEY_XMIN: &str = "image/object/bbox/xmin";
pub const KEY_XMAX: &str = "image/object/bbox/xmax";
pub const KEY_YMIN: &str = "image/object/bbox/ymin";
pub const KEY_YMAX: &str = "image/object/bbox/ymax";
pub const KEY_CLASS_TEXT: &str = "image/object/class/text";
pub const KEY_CLASS_LABEL: &str = "image/object/class/label";

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub height: i64,
    pub width: i64,
    pub filename: String,
    pub source_id: String,
    pub format: String,
    pub encoded: Vec<u8>,
    pub xmins: Vec<f32>,
    pub xmaxs: Vec<f32>,
    pub ymins: Vec<f32>,
    pub ymaxs: Vec<f32>,
    pub class_texts: Vec<String>,
    pub class_labels: Vec<i64>,
}

impl ExampleRecord {
    pub fn num_objects(&self) -> usize {
        self.class_labels.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut f = Features::new();
        let text = |s: &str| Feature::Bytes(vec![s.as_bytes().to_vec()]);
        f.insert(KEY_HEIGHT.into(), Feature::Int64(vec![self.height]));
        f.insert(KEY_WIDTH.into(), Feature::Int64(vec![self.width]));
        f.insert(KEY_FILENAME.into(), text(&self.filename));
        f.insert(KEY_SOURCE_ID.into(), text(&self.source_id));
        f.insert(KEY_FORMAT.into(), text(&self.format));
        f.insert(KEY_ENCODED.into(), Feature::Bytes(vec![self.encoded.clone()]));
        f.insert(KEY_XMIN.into(), Feature::Float(self.xmins.clone()));
        f.insert(KEY_XMAX.into(), Feature::Float(self.xmaxs.clone()));
        f.insert(KEY_YMIN.into(), Feature::Float(self.ymins.clone()));
        f.insert(KEY_YMAX.into(), Feature::Float(self.ymaxs.clone()));
        f.insert(
            KEY_CLASS_TEXT.into(),
            Feature::Bytes(self.class_texts.iter().map(|s| s.as_bytes().to_vec()).collect()),
        );
        f.insert(KEY_CLASS_LABEL.into(), Feature::Int64(self.class_labels.clone()));
        proto::encode_example(&f)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = proto::decode_example(bytes)?;
        let missing = |k: &str| Error::DecodeError {
            offset: bytes.len(),
            message: format!("missing or mistyped feature {k}"),
        };
        let int = |k: &str| match f.get(k) {
            Some(Feature::Int64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(missing(k)),
        };
        let floats = |k: &str| match f.get(k) {
            Some(Feature::Float(v)) => Ok(v.clone()),
            // an empty list written by another encoder may carry any type
            other if list_is_empty(other) => Ok(Vec::new()),
            _ => Err(missing(k)),
        };
        let single_bytes = |k: &str| match f.get(k) {
            Some(Feature::Bytes(v)) if v.len() == 1 => Ok(v[0].clone()),
            _ => Err(missing(k)),
        };
        let text = |k: &str| -> Result<String> {
            String::from_utf8(single_bytes(k)?).map_err(|_| missing(k))
        };
        let class_texts = match f.get(KEY_CLASS_TEXT) {
            Some(Feature::Bytes(v)) => v
                .iter()
                .map(|b| String::from_utf8(b.clone()).map_err(|_| missing(KEY_CLASS_TEXT)))
                .collect::<Result<Vec<_>>>()?,
            other if list_is_empty(other) => Vec::new(),
            _ => return Err(missing(KEY_CLASS_TEXT)),
        };
        let class_labels = match f.get(KEY_CLASS_LABEL) {
            Some(Feature::Int64(v)) => v.clone(),
            other if list_is_empty(other) => Vec::new(),
            _ => return Err(missing(KEY_CLASS_LABEL)),
        };
        let rec = ExampleRecord {
            height: int(KEY_HEIGHT)?,
            width: int(KEY_WIDTH)?,
            filename: text(KEY_FILENAME)?,
            source_id: text(KEY_SOURCE_ID).unwrap_or_default(),
            format: text(KEY_FORMAT)?,
            encoded: single_bytes(KEY_ENCODED)?,
            xmins: floats(KEY_XMIN)?,
            xmaxs: floats(KEY_XMAX)?,
            ymins: floats(KEY_YMIN)?,
            ymaxs: floats(KEY_YMAX)?,
            class_texts,
            class_labels,
        };
        let n = rec.class_labels.len();
        if [rec.xmins.len(), rec.xmaxs.len(), rec.ymins.len(), rec.ymaxs.len(), rec.class_texts.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::DecodeError {
                offset: bytes.len(),
                message: "object feature lists have different lengths".into(),
            });
        }
        Ok(rec)
    }

    /// Normalized object boxes.
    pub fn boxes(&self) -> Vec<BoxCorner> {
        (0..self.num_objects())
            .map(|i| {
                BoxCorner::new(
                    self.xmins[i] as f64,
                    self.ymins[i] as f64,
                    self.xmaxs[i] as f64,
                    self.ymaxs[i] as f64,
                )
            })
            .collect()
    }

    pub fn ground_truth(&self, num_classes: usize) -> Result<GroundTruth> {
        let ids = self
            .class_labels
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| Error::ValidationError(format!("class label {l}"))))
            .collect::<Result<Vec<_>>>()?;
        GroundTruth::new(self.boxes(), ids, num_classes)
    }

    /// Pixel-space annotation view (coordinates rounded back from the
    /// normalized values).
    pub fn to_annotation(&self) -> Annotation {
        let (w, h) = (self.width as f64, self.height as f64);
        let px = |v: f32, dim: f64| ((v as f64) * dim).round().max(0.0) as u32;
        let mut a = Annotation::new("", self.filename.clone(), self.width as u32, self.height as u32);
        a.objects = (0..self.num_objects())
            .map(|i| {
                VocObject::new(
                    self.class_texts[i].clone(),
                    PixelBox {
                        xmin: px(self.xmins[i], w),
                        ymin: px(self.ymins[i], h),
                        xmax: px(self.xmaxs[i], w),
                        ymax: px(self.ymaxs[i], h),
                    },
                )
            })
            .collect();
        a
    }
}

fn list_is_empty(f: Option<&Feature>) -> bool {
    match f {
        None => true,
        Some(Feature::Bytes(v)) => v.is_empty(),
        Some(Feature::Float(v)) => v.is_empty(),
        Some(Feature::Int64(v)) => v.is_empty(),
    }
}

/// Builds a record from an annotation and its encoded image.
pub fn encode_example(a: &Annotation, image: &[u8], format: &str, labels: &LabelMap) -> Result<ExampleRecord> {
    a.validate()?;
    if image.is_empty() {
        return Err(Error::ValidationError(format!("{}: empty image bytes", a.filename)));
    }
    let (w, h) = (a.width as f64, a.height as f64);
    let mut rec = ExampleRecord {
        height: a.height as i64,
        width: a.width as i64,
        filename: a.filename.clone(),
        source_id: a.filename.clone(),
        format: format.to_string(),
        encoded: image.to_vec(),
        xmins: Vec::new(),
        xmaxs: Vec::new(),
        ymins: Vec::new(),
        ymaxs: Vec::new(),
        class_texts: Vec::new(),
        class_labels: Vec::new(),
    };
    for o in &a.objects {
        let id = labels.require_id(&o.name)?;
        let b = o.bndbox;
        rec.xmins.push((b.xmin as f64 / w) as f32);
        rec.xmaxs.push((b.xmax as f64 / w) as f32);
        rec.ymins.push((b.ymin as f64 / h) as f32);
        rec.ymaxs.push((b.ymax as f64 / h) as f32);
        rec.class_texts.push(o.name.clone());
        rec.class_labels.push(id as i64);
    }
    Ok(rec)
}

/// Parses a serialized record and checks its classes against `labels`.
pub fn decode_example(bytes: &[u8], labels: &LabelMap) -> Result<ExampleRecord> {
    let rec = ExampleRecord::from_bytes(bytes)?;
    for (text, &id) in rec.class_texts.iter().zip(&rec.class_labels) {
        let known = labels.require_id(text)?;
        if known as i64 != id {
            return Err(Error::ValidationError(format!(
                "record labels {text:?} as id {id}, label map says {known}"
            )));
        }
    }
    Ok(rec)
}
