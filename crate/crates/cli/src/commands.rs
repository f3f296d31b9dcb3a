use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signdet::capture::{
    run_capture_session, Clock, DirectoryReplayer, FrameSource, Progress, SimClock, SyntheticSource, SystemClock,
};
use signdet::dataset::{
    decode_example, encode_example, gen_synthetic_scene, parse_label_map, parse_voc_xml, read_records,
    split_dataset, write_label_map, write_records, write_voc_xml, DatasetSplit, ExampleRecord, LabelMap,
};
use signdet::fsutil::write_atomic;
use signdet::geometry::iou;
use signdet::image::{decode_image, encode_ppm, format_for_extension, probe_dimensions};
use signdet::infer::{
    evaluate_confidence, format_training_log, run_realtime, Detector, ModelDetector, ValidationItem,
};
use signdet::net::{restore_latest, TinyNet, TrainExample, Trainer};
use signdet::Error;

use crate::config::PipelineConfig;
use crate::{CaptureArgs, CliError, CliResult, DetectArgs, EvalArgs, GenArgs, LabelMapArgs, ServeArgs, SplitArgs, TrainArgs};

const TRAIN_RECORD: &str = "train.record";
const VALIDATION_RECORD: &str = "validation.record";

fn load_labels(cfg: &PipelineConfig) -> CliResult<LabelMap> {
    let path = &cfg.paths.label_map;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read label map {}: {e}", path.display())))?;
    Ok(parse_label_map(&text)?)
}

/// Label map plus a model config that agrees with it.
fn load_labels_for_model(cfg: &PipelineConfig) -> CliResult<LabelMap> {
    let labels = load_labels(cfg)?;
    cfg.check_labels(&labels)?;
    cfg.validate_model()?;
    Ok(labels)
}

fn read_examples(path: &Path, labels: &LabelMap) -> CliResult<Vec<ExampleRecord>> {
    read_records(path)
        .map_err(|e| CliError {
            message: format!("{}: {e}", path.display()),
            ..CliError::from(e)
        })?
        .iter()
        .map(|bytes| decode_example(bytes, labels).map_err(CliError::from))
        .collect()
}

fn load_model(cfg: &PipelineConfig) -> CliResult<TinyNet<f32>> {
    let ckpt = restore_latest(&cfg.paths.checkpoint_dir).map_err(|e| match e {
        Error::NotFound(_) => CliError {
            code: 2,
            kind: e.kind().into(),
            message: format!("no checkpoint in {}; run train first", cfg.paths.checkpoint_dir.display()),
        },
        e => e.into(),
    })?;
    log::info!("loaded checkpoint at step {}", ckpt.step);
    Ok(TinyNet::from_checkpoint(cfg.model.clone(), &ckpt)?)
}

fn manifest_path(root: &Path) -> PathBuf {
    let mut name = root.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "images".into());
    name.push(".manifest.json");
    root.with_file_name(name)
}

pub fn capture(cfg: &PipelineConfig, args: &CaptureArgs) -> CliResult {
    let capture = &cfg.capture;
    let mut source: Box<dyn FrameSource> = match &args.from_dir {
        Some(dir) => Box::new(DirectoryReplayer::open(dir, true)?),
        None => {
            let (w, h) = args.frame_size;
            Box::new(SyntheticSource::new(args.seed, w, h, capture.labels.len().max(1)))
        }
    };
    let mut clock: Box<dyn Clock> = if args.simulate_clock {
        Box::new(SimClock::new())
    } else {
        Box::new(SystemClock::default())
    };
    let (tx, rx) = mpsc::channel();
    let total = capture.labels.len();
    let reporter = thread::spawn(move || {
        for p in rx {
            match p {
                Progress::Label { label, index } => {
                    eprintln!("[{}/{total}] get ready to sign {label}", index + 1)
                }
                Progress::Captured { label, count, .. } => log::debug!("{label}: image {count}"),
                Progress::Done { files } => eprintln!("captured {files} images"),
            }
        }
    });
    let result = run_capture_session(source.as_mut(), capture, clock.as_mut(), Some(&tx));
    drop(tx);
    let _ = reporter.join();
    let manifest_file = args.manifest.clone().unwrap_or_else(|| manifest_path(&capture.output_root));
    match result {
        Ok(manifest) => {
            manifest.save(&manifest_file)?;
            println!(
                "{} images in {} folders, {:.1} s, manifest {}",
                manifest.entries.len(),
                capture.labels.len(),
                manifest.elapsed,
                manifest_file.display()
            );
            Ok(())
        }
        Err(Error::SessionAborted { reason, manifest }) => {
            manifest.save(&manifest_file)?;
            Err(Error::SessionAborted { reason, manifest }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn make_label_map(cfg: &PipelineConfig, args: &LabelMapArgs) -> CliResult {
    let labels = match (&args.labels, args.classes) {
        (Some(names), _) => LabelMap::from_names(names)?,
        (None, Some(n)) => LabelMap::first_classes(n),
        (None, None) => LabelMap::from_names(&cfg.capture.labels)?,
    };
    let path = &cfg.paths.label_map;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, write_label_map(&labels).as_bytes())?;
    println!("wrote {} labels to {}", labels.len(), path.display());
    if labels.len() != cfg.model.num_classes {
        eprintln!(
            "note: model.num_classes is {}; pass --set model.num_classes={} to train on this map",
            cfg.model.num_classes,
            labels.len()
        );
    }
    Ok(())
}

pub fn split(cfg: &PipelineConfig, args: &SplitArgs) -> CliResult {
    let ratio = args.ratio.unwrap_or(cfg.split.ratio);
    let seed = args.seed.unwrap_or(cfg.split.seed);
    let root = &cfg.paths.dataset_root;
    let images = signdet_annotate::list_images(root)
        .map_err(|e| CliError::io(format!("cannot scan {}: {e}", root.display())))?;
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for img in images {
        if img.label.is_empty() {
            return Err(CliError::validation(format!(
                "image {} is not inside a label folder",
                img.id
            )));
        }
        groups.entry(img.label).or_default().push(img.id);
    }
    if groups.is_empty() {
        return Err(CliError::validation(format!("no images under {}", root.display())));
    }
    let split = split_dataset(&groups, ratio, seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let json = serde_json::to_vec_pretty(&split).map_err(Error::from)?;
    write_atomic(&cfg.paths.split_file, &json)?;
    for class in groups.keys() {
        let t = split.train.iter().filter(|(c, _)| c == class).count();
        let v = split.validation.iter().filter(|(c, _)| c == class).count();
        println!("{class}: {t} train / {v} validation");
    }
    Ok(())
}

fn encode_item(root: &Path, id: &str, labels: &LabelMap) -> CliResult<Vec<u8>> {
    let image_path = root.join(id);
    let ext = image_path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let format = format_for_extension(ext)
        .ok_or_else(|| CliError::validation(format!("{id}: unsupported image type")))?;
    let xml_path = image_path.with_extension("xml");
    let xml = match fs::read(&xml_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::validation(format!("{id} has no annotation")))
        }
        Err(e) => return Err(e.into()),
    };
    let annotation = parse_voc_xml(&xml).map_err(|e| CliError {
        message: format!("{}: {e}", xml_path.display()),
        ..CliError::from(e)
    })?;
    let bytes = fs::read(&image_path)?;
    let (w, h) = probe_dimensions(format, &bytes)?;
    if (w, h) != (annotation.width as usize, annotation.height as usize) {
        return Err(CliError::validation(format!(
            "{id}: annotation says {}x{} but the image is {w}x{h}",
            annotation.width, annotation.height
        )));
    }
    let rec = encode_example(&annotation, &bytes, format, labels)?;
    Ok(rec.to_bytes())
}

pub fn make_records(cfg: &PipelineConfig) -> CliResult {
    let labels = load_labels(cfg)?;
    let text = fs::read(&cfg.paths.split_file)
        .map_err(|e| CliError::io(format!("cannot read split {}: {e}", cfg.paths.split_file.display())))?;
    let split: DatasetSplit<String> = serde_json::from_slice(&text).map_err(Error::from)?;
    fs::create_dir_all(&cfg.paths.records_dir)?;
    for (name, items) in [(TRAIN_RECORD, &split.train), (VALIDATION_RECORD, &split.validation)] {
        let records = items
            .iter()
            .map(|(_, id)| encode_item(&cfg.paths.dataset_root, id, &labels))
            .collect::<CliResult<Vec<_>>>()?;
        let path = cfg.paths.records_dir.join(name);
        write_records(&path, &records)?;
        println!("{}: {} records", path.display(), records.len());
    }
    Ok(())
}

pub fn train(cfg: &PipelineConfig, args: &TrainArgs) -> CliResult {
    let mut tc = cfg.train.clone();
    if let Some(steps) = args.steps {
        tc.steps = steps;
    }
    let labels = load_labels_for_model(cfg)?;
    let records = read_examples(&cfg.paths.records_dir.join(TRAIN_RECORD), &labels)?;
    let data = records
        .iter()
        .map(|r| TrainExample::from_record(r, cfg.model.input_size, cfg.model.num_classes))
        .collect::<signdet::Result<Vec<_>>>()?;
    let dir = &cfg.paths.checkpoint_dir;
    let mut trainer = match restore_latest(dir) {
        Ok(ckpt) => {
            log::info!("resuming from step {}", ckpt.step);
            Trainer::from_checkpoint(cfg.model.clone(), tc.clone(), &ckpt)?
        }
        Err(Error::NotFound(_)) => Trainer::new(TinyNet::new(cfg.model.clone())?, tc.clone())?,
        Err(e) => return Err(e.into()),
    };
    if trainer.step() >= tc.steps {
        println!("checkpoint already at step {}; nothing to do", trainer.step());
        return Ok(());
    }
    log::info!(
        "training on {} images, steps {}..{}",
        data.len(),
        trainer.step(),
        tc.steps
    );
    let stdout = std::io::stdout();
    let mut out_err = None;
    trainer.run(&data, Some(dir), &mut |e| {
        let line = format_training_log(e.step, e.per_step_time, &e.breakdown);
        if let Err(err) = stdout.lock().write_all(line.as_bytes()) {
            out_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = out_err {
        return Err(e.into());
    }
    Ok(())
}

/// Validation images with their first object's class and boxes.
fn validation_set(records: &[ExampleRecord], num_classes: usize) -> CliResult<Vec<(ValidationItem, signdet::loss::GroundTruth)>> {
    let mut out = Vec::new();
    for r in records {
        let Some(&first) = r.class_labels.first() else { continue };
        let image = decode_image(&r.format, &r.encoded)?;
        out.push((
            ValidationItem {
                image,
                class_id: first as usize,
            },
            r.ground_truth(num_classes)?,
        ));
    }
    Ok(out)
}

pub fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> CliResult {
    let labels = load_labels_for_model(cfg)?;
    let records = read_examples(&cfg.paths.records_dir.join(VALIDATION_RECORD), &labels)?;
    let set = validation_set(&records, cfg.model.num_classes)?;
    if set.is_empty() {
        return Err(CliError::validation("validation set has no annotated images".into()));
    }
    let detector = ModelDetector::new(load_model(cfg)?, cfg.inference);
    let items: Vec<ValidationItem> = set.iter().map(|(i, _)| i.clone()).collect();
    let report = evaluate_confidence(&detector, &items, &labels)?;
    let mut correct = 0;
    for (item, gt) in &set {
        let dets = detector.detect(&item.image)?;
        if let Some(top) = dets.first() {
            let hit = gt
                .boxes
                .iter()
                .zip(&gt.class_ids)
                .any(|(b, &c)| c == top.class_id && iou(b, &top.bbox) >= 0.5);
            correct += hit as usize;
        }
    }
    let accuracy = correct as f64 / set.len() as f64;
    if args.json {
        let mut v: serde_json::Value = serde_json::from_str(&report.to_json()).map_err(Error::from)?;
        v["detection_accuracy"] = serde_json::json!(accuracy);
        v["detection_correct"] = serde_json::json!(correct);
        v["images"] = serde_json::json!(set.len());
        println!("{v}");
    } else {
        print!("{}", report.render_table());
        println!(
            "Detection accuracy: {correct}/{} ({:.2}%)",
            set.len(),
            accuracy * 100.0
        );
    }
    Ok(())
}

pub fn detect(cfg: &PipelineConfig, args: &DetectArgs) -> CliResult {
    let labels = load_labels_for_model(cfg)?;
    let detector = ModelDetector::new(load_model(cfg)?, cfg.inference);
    let mut source: Box<dyn FrameSource> = match (&args.source, args.synthetic) {
        (Some(dir), _) => {
            let looping = args.limit.is_some();
            Box::new(LimitedSource::new(DirectoryReplayer::open(dir, looping)?, args.limit))
        }
        (None, Some(n)) => {
            let side = cfg.model.input_size;
            let src = SyntheticSource::new(args.seed, side, side, labels.len()).with_limit(n);
            Box::new(LimitedSource::new(src, args.limit))
        }
        (None, None) => {
            return Err(CliError::validation("detect needs --source DIR or --synthetic N".into()))
        }
    };
    let (tx, rx) = mpsc::sync_channel::<signdet::infer::FrameDetections>(8);
    let printer = thread::spawn(move || -> std::io::Result<()> {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for frame in rx {
            writeln!(out, "{}", frame.to_json_line())?;
        }
        out.flush()
    });
    let result = run_realtime(source.as_mut(), &detector, &labels, &tx);
    drop(tx);
    let printed = printer.join().expect("printer thread panicked");
    let frames = result?;
    printed?;
    log::info!("processed {frames} frames");
    Ok(())
}

/// Stops a source after a fixed number of frames.
struct LimitedSource<S> {
    inner: S,
    remaining: Option<u64>,
}

impl<S> LimitedSource<S> {
    fn new(inner: S, limit: Option<u64>) -> Self {
        LimitedSource { inner, remaining: limit }
    }
}

impl<S: FrameSource> FrameSource for LimitedSource<S> {
    fn next_frame(&mut self) -> signdet::Result<(signdet::image::RgbImage, f64)> {
        if let Some(n) = self.remaining.as_mut() {
            if *n == 0 {
                return Err(Error::SourceExhausted);
            }
            *n -= 1;
        }
        self.inner.next_frame()
    }
}

pub fn serve(cfg: &PipelineConfig, args: &ServeArgs) -> CliResult {
    let labels = load_labels(cfg)?;
    let mut addr = args.addr;
    if args.lan {
        addr.set_ip(std::net::Ipv4Addr::UNSPECIFIED.into());
    }
    let root = &cfg.paths.dataset_root;
    if !root.is_dir() {
        return Err(CliError::io(format!("dataset root {} is not a directory", root.display())));
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(signdet_annotate::serve(root, labels, addr))?;
    Ok(())
}

/// Writes `<label>/<label>.synth-NNNNN.ppm` plus its VOC XML, filed under the
/// label of the scene's first object.
pub fn gen_synthetic(cfg: &PipelineConfig, args: &GenArgs) -> CliResult {
    if args.classes == 0 || args.classes > 26 {
        return Err(CliError::validation(format!("--classes {} must be in 1..=26", args.classes)));
    }
    if args.size < 8 {
        return Err(CliError::validation(format!("--size {} is below 8 pixels", args.size)));
    }
    let root = &cfg.paths.dataset_root;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for i in 0..args.count {
        let (image, mut ann) = gen_synthetic_scene(&mut rng, args.classes, args.size, args.size);
        let label = ann.objects[0].name.clone();
        let dir = root.join(&label);
        fs::create_dir_all(&dir)?;
        let stem = format!("{label}.synth-{i:05}");
        ann.folder = label;
        ann.filename = format!("{stem}.ppm");
        ann.path = dir.join(&ann.filename).to_string_lossy().into_owned();
        write_atomic(&dir.join(&ann.filename), &encode_ppm(&image))?;
        write_atomic(&dir.join(format!("{stem}.xml")), &write_voc_xml(&ann)?)?;
    }
    println!("wrote {} images under {}", args.count, root.display());
    Ok(())
}
