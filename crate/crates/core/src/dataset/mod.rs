//! Dataset formats: annotations, label maps, example records and splits.

pub mod example;
pub mod labelmap;
pub mod proto;
pub mod record;
pub mod split;
pub mod synthetic;
pub mod voc;

pub use example::{decode_example, encode_example, ExampleRecord};
pub use labelmap::{class_name, parse_label_map, write_label_map, LabelEntry, LabelMap};
pub use record::{crc32c, frame_record, masked_crc32c, read_records, read_records_from_bytes, write_records, RecordReader};
pub use split::{split_dataset, DatasetSplit};
pub use synthetic::{gen_synthetic_scene, gen_synthetic_scene_with, SceneOptions};
pub use voc::{parse_voc_xml, write_voc_xml, Annotation, PixelBox, VocObject};
