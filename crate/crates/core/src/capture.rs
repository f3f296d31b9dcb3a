//! Timed capture sessions against an abstract frame source.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::Sender;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::dataset::labelmap::class_name;
use crate::dataset::synthetic::gen_synthetic_scene;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{decode_image, encode_ppm, format_for_extension, RgbImage};

/// A stream of frames with source timestamps in seconds.
pub trait FrameSource {
    fn next_frame(&mut self) -> Result<(RgbImage, f64)>;
}

/// Time source for sessions; tests use [`SimClock`] so no real waiting happens.
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
    fn sleep(&mut self, seconds: f64);
}

#[derive(Debug, Default, Clone)]
pub struct SimClock {
    t: f64,
}

impl SimClock {
    pub fn new() -> Self {
        SimClock::default()
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        self.t
    }

    fn sleep(&mut self, seconds: f64) {
        self.t += seconds.max(0.0);
    }
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn sleep(&mut self, seconds: f64) {
        if seconds > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(seconds));
        }
    }
}

/// Frames of random synthetic scenes, optionally limited in count.
pub struct SyntheticSource {
    rng: ChaCha8Rng,
    width: usize,
    height: usize,
    num_classes: usize,
    remaining: Option<usize>,
    frame: u64,
    fps: f64,
}

impl SyntheticSource {
    pub fn new(seed: u64, width: usize, height: usize, num_classes: usize) -> Self {
        SyntheticSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            width,
            height,
            num_classes: num_classes.max(1),
            remaining: None,
            frame: 0,
            fps: 30.0,
        }
    }

    pub fn with_limit(mut self, frames: usize) -> Self {
        self.remaining = Some(frames);
        self
    }
}

impl FrameSource for SyntheticSource {
    fn next_frame(&mut self) -> Result<(RgbImage, f64)> {
        if let Some(r) = self.remaining.as_mut() {
            if *r == 0 {
                return Err(Error::SourceExhausted);
            }
            *r -= 1;
        }
        let (img, _) = gen_synthetic_scene(&mut self.rng, self.num_classes, self.width, self.height);
        let t = self.frame as f64 / self.fps;
        self.frame += 1;
        Ok((img, t))
    }
}

/// Replays image files from a directory tree in sorted path order.
///
/// Frames are resized to the first frame's size so dimensions stay constant.
pub struct DirectoryReplayer {
    files: Vec<PathBuf>,
    next: usize,
    looping: bool,
    size: Option<(usize, usize)>,
    fps: f64,
}

impl DirectoryReplayer {
    pub fn open(dir: &Path, looping: bool) -> Result<Self> {
        let mut files = Vec::new();
        collect_images(dir, &mut files)?;
        files.sort();
        Ok(DirectoryReplayer {
            files,
            next: 0,
            looping,
            size: None,
            fps: 30.0,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(format_for_extension)
            .is_some()
        {
            out.push(path);
        }
    }
    Ok(())
}

impl FrameSource for DirectoryReplayer {
    fn next_frame(&mut self) -> Result<(RgbImage, f64)> {
        if self.next >= self.files.len() {
            if !self.looping || self.files.is_empty() {
                return Err(Error::SourceExhausted);
            }
            self.next = 0;
        }
        let path = &self.files[self.next];
        let format = path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(format_for_extension)
            .unwrap_or("ppm");
        let img = decode_image(format, &fs::read(path)?)?;
        let img = match self.size {
            None => {
                self.size = Some((img.width, img.height));
                img
            }
            Some((w, h)) => img.resize(w, h),
        };
        let t = self.next as f64 / self.fps;
        self.next += 1;
        Ok((img, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    pub labels: Vec<String>,
    pub images_per_label: usize,
    /// Seconds between frames of one label.
    pub capture_interval: f64,
    /// Seconds of pause after a label is announced.
    pub inter_label_pause: f64,
    pub output_root: PathBuf,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            labels: (0..26).map(class_name).collect(),
            images_per_label: 25,
            capture_interval: 2.0,
            inter_label_pause: 5.0,
            output_root: PathBuf::from("images"),
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_label == 0 {
            return Err(Error::ValidationError("images_per_label must be at least 1".into()));
        }
        if !(self.capture_interval >= 0.0 && self.inter_label_pause >= 0.0)
            || !self.capture_interval.is_finite()
            || !self.inter_label_pause.is_finite()
        {
            return Err(Error::ValidationError("capture intervals must be finite and nonnegative".into()));
        }
        for l in &self.labels {
            if l.is_empty() || l.contains(['/', '\\']) || l == "." || l == ".." {
                return Err(Error::ValidationError(format!("label {l:?} is not a usable folder name")));
            }
        }
        Ok(())
    }

    /// Simulated session length in seconds.
    pub fn expected_duration(&self) -> f64 {
        self.labels.len() as f64
            * (self.inter_label_pause + (self.images_per_label.saturating_sub(1)) as f64 * self.capture_interval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub path: PathBuf,
    /// Clock time of the capture, seconds since session start.
    pub timestamp: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
    /// Session length on the session clock.
    pub elapsed: f64,
}

impl SessionManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    Label { label: String, index: usize },
    Captured { label: String, count: usize, path: PathBuf },
    Done { files: usize },
}

/// Splits `<label>.<uuid>.<ext>` into the label and uuid; any uuid version is accepted.
pub fn parse_capture_filename(name: &str) -> Option<(String, Uuid)> {
    let mut parts = name.rsplitn(3, '.');
    let _ext = parts.next()?;
    let id = Uuid::parse_str(parts.next()?).ok()?;
    Some((parts.next()?.to_string(), id))
}

pub fn run_capture_session(
    source: &mut dyn FrameSource,
    cfg: &CaptureConfig,
    clock: &mut dyn Clock,
    sink: Option<&Sender<Progress>>,
) -> Result<SessionManifest> {
    cfg.validate()?;
    let report = |p: Progress| {
        if let Some(s) = sink {
            // a dropped receiver only means nobody is watching
            let _ = s.send(p);
        }
    };
    let mut manifest = SessionManifest {
        format: "ppm".into(),
        ..Default::default()
    };
    // Create every folder up front so an unwritable root fails before capturing.
    for label in &cfg.labels {
        fs::create_dir_all(cfg.output_root.join(label))?;
    }
    let start = clock.now();
    let mut dims: Option<(usize, usize)> = None;
    for (li, label) in cfg.labels.iter().enumerate() {
        report(Progress::Label {
            label: label.clone(),
            index: li,
        });
        clock.sleep(cfg.inter_label_pause);
        for i in 0..cfg.images_per_label {
            if i > 0 {
                clock.sleep(cfg.capture_interval);
            }
            let frame = match source.next_frame() {
                Ok((img, _)) => img,
                Err(Error::SourceExhausted) => {
                    manifest.elapsed = clock.now() - start;
                    return Err(Error::SessionAborted {
                        reason: format!("frame source exhausted during label {label:?}"),
                        manifest: Box::new(manifest),
                    });
                }
                Err(e) => return Err(e),
            };
            match dims {
                None => dims = Some((frame.width, frame.height)),
                Some(d) if d != (frame.width, frame.height) => {
                    return Err(Error::InvalidInput(format!(
                        "frame size changed from {}x{} to {}x{}",
                        d.0, d.1, frame.width, frame.height
                    )))
                }
                Some(_) => {}
            }
            let path = cfg
                .output_root
                .join(label)
                .join(format!("{label}.{}.ppm", Uuid::new_v4()));
            fs::write(&path, encode_ppm(&frame))?;
            manifest.entries.push(ManifestEntry {
                label: label.clone(),
                path: path.clone(),
                timestamp: clock.now() - start,
            });
            report(Progress::Captured {
                label: label.clone(),
                count: i + 1,
                path,
            });
        }
    }
    manifest.elapsed = clock.now() - start;
    report(Progress::Done {
        files: manifest.entries.len(),
    });
    Ok(manifest)
}
