//! Synthetic shape scenes used as a stand-in for captured sign images.
//!
//! Each class has a fixed shape and color. Backgrounds are uniform noise in a
//! mid-intensity band while every palette color has one channel at 200 or
//! above, so shape pixels are always separable from the background.

use rand::Rng;

use crate::dataset::labelmap::class_name;
use crate::dataset::voc::{Annotation, PixelBox, VocObject};
use crate::image::RgbImage;

pub const BACKGROUND_RANGE: (u8, u8) = (40, 160);

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 220, 60],
    [50, 80, 235],
    [235, 220, 40],
    [220, 50, 220],
    [40, 220, 220],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
}

/// Shape and color used for class index `k` (0-based).
pub fn class_style(k: usize) -> (Shape, [u8; 3]) {
    let shape = match (k / 6 + k) % 3 {
        0 => Shape::Square,
        1 => Shape::Disk,
        _ => Shape::Triangle,
    };
    (shape, PALETTE[k % PALETTE.len()])
}

#[derive(Debug, Clone, Copy)]
pub struct SceneOptions {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side as a fraction of the shorter image side.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            min_objects: 1,
            max_objects: 3,
            min_size: 0.2,
            max_size: 0.5,
        }
    }
}

/// Whether the pixel centre `(px, py)` lies inside `shape` drawn in the
/// square `[x0, x0+s) x [y0, y0+s)`.
fn covers(shape: Shape, x0: f64, y0: f64, s: f64, px: f64, py: f64) -> bool {
    let (u, v) = ((px - x0) / s, (py - y0) / s);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        // apex at the top centre, base along the bottom edge
        Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
    }
}

pub fn gen_synthetic_scene<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: usize,
    width: usize,
    height: usize,
) -> (RgbImage, Annotation) {
    gen_synthetic_scene_with(rng, num_classes, width, height, &SceneOptions::default())
}

pub fn gen_synthetic_scene_with<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: usize,
    width: usize,
    height: usize,
    opts: &SceneOptions,
) -> (RgbImage, Annotation) {
    assert!(num_classes >= 1, "need at least one class");
    assert!(width >= 8 && height >= 8, "image too small for a scene");
    let mut img = RgbImage::new(width, height);
    for px in img.data.iter_mut() {
        *px = rng.random_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1);
    }
    let mut ann = Annotation::new("synthetic", "synthetic.ppm", width as u32, height as u32);
    let side = width.min(height) as f64;
    let want = rng.random_range(opts.min_objects..=opts.max_objects.max(opts.min_objects));
    // Placed squares, kept two pixels apart so shapes never touch.
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..want {
        for _attempt in 0..50 {
            let s = (rng.random_range(opts.min_size..=opts.max_size) * side).max(4.0);
            let x0 = rng.random_range(0.0..=(width as f64 - s));
            let y0 = rng.random_range(0.0..=(height as f64 - s));
            let clear = placed.iter().all(|&(px, py, ps)| {
                x0 + s + 2.0 <= px || px + ps + 2.0 <= x0 || y0 + s + 2.0 <= py || py + ps + 2.0 <= y0
            });
            if !clear {
                continue;
            }
            let k = rng.random_range(0..num_classes);
            let (shape, color) = class_style(k);
            if let Some(bndbox) = draw(&mut img, shape, color, x0, y0, s) {
                placed.push((x0, y0, s));
                ann.objects.push(VocObject::new(class_name(k), bndbox));
                break;
            }
        }
    }
    (img, ann)
}

/// Rasterizes one shape and returns its tight pixel-edge bounding box.
fn draw(img: &mut RgbImage, shape: Shape, color: [u8; 3], x0: f64, y0: f64, s: f64) -> Option<PixelBox> {
    let cols = (x0.floor() as usize)..((x0 + s).ceil() as usize).min(img.width);
    let rows = (y0.floor() as usize)..((y0 + s).ceil() as usize).min(img.height);
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in rows {
        for x in cols.clone() {
            if covers(shape, x0, y0, s, x as f64 + 0.5, y as f64 + 0.5) {
                img.put(x, y, color);
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    let (xmin, ymin, xmax, ymax) = bb?;
    Some(PixelBox {
        xmin: xmin as u32,
        ymin: ymin as u32,
        xmax: xmax as u32 + 1,
        ymax: ymax as u32 + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, BoxCorner};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape_pixel(p: [u8; 3]) -> bool {
        p.iter().any(|&c| c > BACKGROUND_RANGE.1)
    }

    #[test]
    fn boxes_satisfy_annotation_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..10_000 {
            let (w, h) = (32 + i % 41, 32 + (i * 7) % 53);
            let (_, ann) = gen_synthetic_scene(&mut rng, 1 + i % 26, w, h);
            ann.validate().unwrap();
            assert!((1..=3).contains(&ann.objects.len()));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = gen_synthetic_scene(&mut ChaCha8Rng::seed_from_u64(5), 3, 96, 96);
        let b = gen_synthetic_scene(&mut ChaCha8Rng::seed_from_u64(5), 3, 96, 96);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn boxes_match_pixel_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        let mut n = 0;
        for _ in 0..300 {
            let (img, ann) = gen_synthetic_scene(&mut rng, 6, 96, 96);
            for o in &ann.objects {
                let b = o.bndbox;
                // shapes are two pixels apart, so a one-pixel margin isolates this one
                let (x0, y0) = (b.xmin.saturating_sub(1) as usize, b.ymin.saturating_sub(1) as usize);
                let (x1, y1) = ((b.xmax as usize + 1).min(96), (b.ymax as usize + 1).min(96));
                let mut scan: Option<(usize, usize, usize, usize)> = None;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if shape_pixel(img.get(x, y)) {
                            scan = Some(match scan {
                                None => (x, y, x + 1, y + 1),
                                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                            });
                        }
                    }
                }
                let (a, bb, c, d) = scan.expect("shape pixels present");
                let emitted = BoxCorner::new(b.xmin as f64, b.ymin as f64, b.xmax as f64, b.ymax as f64);
                let scanned = BoxCorner::new(a as f64, bb as f64, c as f64, d as f64);
                total += iou(&emitted, &scanned);
                n += 1;
            }
        }
        assert!(total / n as f64 >= 0.99, "mean IoU {}", total / n as f64);
    }

    #[test]
    fn class_styles_are_distinct_for_first_six() {
        let styles: Vec<_> = (0..6).map(class_style).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(styles[i], styles[j]);
            }
        }
    }
}
