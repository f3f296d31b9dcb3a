//! Default-box generation over one or more feature-map grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCenter, BoxCorner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLayer {
    pub grid_w: usize,
    pub grid_h: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSpec {
    pub layers: Vec<AnchorLayer>,
    /// Adds one square box per cell at the geometric mean of the layer's
    /// last scale and the next layer's first scale (1.0 after the last layer).
    pub add_interpolated_scale: bool,
    pub clip_to_image: bool,
}

impl Default for AnchorSpec {
    /// Two layers sized for the 96x96 tiny network (strides 8 and 16).
    fn default() -> Self {
        AnchorSpec {
            layers: vec![
                AnchorLayer {
                    grid_w: 12,
                    grid_h: 12,
                    scales: vec![0.2],
                    aspect_ratios: vec![1.0, 2.0, 0.5],
                },
                AnchorLayer {
                    grid_w: 6,
                    grid_h: 6,
                    scales: vec![0.5],
                    aspect_ratios: vec![1.0, 2.0, 0.5],
                },
            ],
            add_interpolated_scale: true,
            clip_to_image: false,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.grid_w == 0 || layer.grid_h == 0 {
                return Err(Error::InvalidSpec(format!("layer {i}: empty grid")));
            }
            if layer.scales.is_empty() || layer.aspect_ratios.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: scales and aspect ratios must be nonempty"
                )));
            }
            if let Some(s) = layer
                .scales
                .iter()
                .find(|s| !(s.is_finite() && **s > 0.0 && **s <= 1.0))
            {
                return Err(Error::InvalidSpec(format!("layer {i}: scale {s} not in (0,1]")));
            }
            if let Some(r) = layer
                .aspect_ratios
                .iter()
                .find(|r| !(r.is_finite() && **r > 0.0))
            {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: aspect ratio {r} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Number of boxes emitted per grid cell of `layer`.
    pub fn anchors_per_cell(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.scales.len() * l.aspect_ratios.len() + usize::from(self.add_interpolated_scale)
    }

    pub fn anchor_count(&self) -> usize {
        (0..self.layers.len())
            .map(|i| self.layers[i].grid_w * self.layers[i].grid_h * self.anchors_per_cell(i))
            .sum()
    }
}

/// Immutable ordered set of default boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    boxes: Vec<BoxCenter>,
    corners: Vec<BoxCorner>,
    layer_offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn from_boxes(boxes: Vec<BoxCenter>) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::InvalidSpec(format!("anchor {b:?} is degenerate")));
        }
        let corners = boxes.iter().map(BoxCenter::to_corner).collect();
        let layer_offsets = vec![0, boxes.len()];
        Ok(AnchorSet {
            boxes,
            corners,
            layer_offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BoxCenter] {
        &self.boxes
    }

    pub fn corners(&self) -> &[BoxCorner] {
        &self.corners
    }

    pub fn get(&self, i: usize) -> BoxCenter {
        self.boxes[i]
    }

    /// Start index of each layer, followed by the total count.
    pub fn layer_offsets(&self) -> &[usize] {
        &self.layer_offsets
    }
}

pub fn generate_anchors(spec: &AnchorSpec) -> Result<AnchorSet> {
    spec.validate()?;
    let mut boxes = Vec::with_capacity(spec.anchor_count());
    let mut layer_offsets = Vec::with_capacity(spec.layers.len() + 1);

    for (li, layer) in spec.layers.iter().enumerate() {
        layer_offsets.push(boxes.len());
        let next_scale = spec
            .layers
            .get(li + 1)
            .map(|l| l.scales[0])
            .unwrap_or(1.0);
        let interpolated = (layer.scales[layer.scales.len() - 1] * next_scale).sqrt();

        for row in 0..layer.grid_h {
            let cy = (row as f64 + 0.5) / layer.grid_h as f64;
            for col in 0..layer.grid_w {
                let cx = (col as f64 + 0.5) / layer.grid_w as f64;
                for &s in &layer.scales {
                    for &r in &layer.aspect_ratios {
                        let sr = r.sqrt();
                        boxes.push(BoxCenter::new(cx, cy, s * sr, s / sr));
                    }
                }
                if spec.add_interpolated_scale {
                    boxes.push(BoxCenter::new(cx, cy, interpolated, interpolated));
                }
            }
        }
    }
    layer_offsets.push(boxes.len());

    if spec.clip_to_image {
        for b in boxes.iter_mut() {
            *b = b.to_corner().clip_unit().to_center()?;
        }
    }

    let corners = boxes.iter().map(BoxCenter::to_corner).collect();
    Ok(AnchorSet {
        boxes,
        corners,
        layer_offsets,
    })
}
