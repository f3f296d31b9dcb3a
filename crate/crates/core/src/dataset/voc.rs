//! Pascal VOC annotation files as written by LabelImg.

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer pixel-space box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocObject {
    pub name: String,
    pub pose: String,
    pub truncated: bool,
    pub difficult: bool,
    pub bndbox: PixelBox,
}

impl VocObject {
    pub fn new(name: impl Into<String>, bndbox: PixelBox) -> Self {
        VocObject {
            name: name.into(),
            pose: "Unspecified".into(),
            truncated: false,
            difficult: false,
            bndbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub folder: String,
    pub filename: String,
    pub path: String,
    pub database: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub segmented: bool,
    pub objects: Vec<VocObject>,
}

impl Annotation {
    pub fn new(folder: impl Into<String>, filename: impl Into<String>, width: u32, height: u32) -> Self {
        let folder = folder.into();
        let filename = filename.into();
        Annotation {
            path: if folder.is_empty() {
                filename.clone()
            } else {
                format!("{folder}/{filename}")
            },
            folder,
            filename,
            database: "Unknown".into(),
            width,
            height,
            depth: 3,
            segmented: false,
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::ValidationError(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let b = o.bndbox;
            if o.name.is_empty() {
                return Err(Error::ValidationError(format!("object {i}: empty label")));
            }
            if b.xmin >= b.xmax || b.ymin >= b.ymax {
                return Err(Error::ValidationError(format!(
                    "object {i} ({}): box ({},{},{},{}) needs xmin<xmax and ymin<ymax",
                    o.name, b.xmin, b.ymin, b.xmax, b.ymax
                )));
            }
            if b.xmax > self.width || b.ymax > self.height {
                return Err(Error::ValidationError(format!(
                    "object {i} ({}): box ({},{},{},{}) outside {}x{} image",
                    o.name, b.xmin, b.ymin, b.xmax, b.ymax, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

fn push_element(out: &mut String, indent: usize, name: &str, value: &str) {
    out.push_str(&"\t".repeat(indent));
    out.push_str(&format!("<{name}>{}</{name}>\n", escape(value)));
}

pub fn write_voc_xml(a: &Annotation) -> Result<Vec<u8>> {
    a.validate()?;
    let mut out = String::from("<annotation>\n");
    push_element(&mut out, 1, "folder", &a.folder);
    push_element(&mut out, 1, "filename", &a.filename);
    push_element(&mut out, 1, "path", &a.path);
    out.push_str("\t<source>\n");
    out.push_str(&format!("\t\t<database>{}</database>\n", escape(&a.database)));
    out.push_str("\t</source>\n\t<size>\n");
    out.push_str(&format!(
        "\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>{}</depth>\n",
        a.width, a.height, a.depth
    ));
    out.push_str("\t</size>\n");
    out.push_str(&format!("\t<segmented>{}</segmented>\n", u8::from(a.segmented)));
    for o in &a.objects {
        let b = o.bndbox;
        out.push_str("\t<object>\n");
        out.push_str(&format!("\t\t<name>{}</name>\n", escape(&o.name)));
        out.push_str(&format!("\t\t<pose>{}</pose>\n", escape(&o.pose)));
        out.push_str(&format!("\t\t<truncated>{}</truncated>\n", u8::from(o.truncated)));
        out.push_str(&format!("\t\t<difficult>{}</difficult>\n", u8::from(o.difficult)));
        out.push_str(&format!(
            "\t\t<bndbox>\n\t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\t\t</bndbox>\n",
            b.xmin, b.ymin, b.xmax, b.ymax
        ));
        out.push_str("\t</object>\n");
    }
    out.push_str("</annotation>\n");
    Ok(out.into_bytes())
}

#[derive(Debug, Default)]
struct Node {
    name: String,
    text: String,
    children: Vec<Node>,
}

impl Node {
    fn child(&self, name: &str) -> Option<&Node> {
        self.children.iter().find(|c| c.name == name)
    }

    fn require(&self, name: &str, path: &str) -> Result<&Node> {
        self.child(name)
            .ok_or_else(|| Error::SchemaError(format!("{path}/{name}")))
    }

    fn text_of(&self, name: &str) -> Option<&str> {
        self.child(name).map(|c| c.text.as_str())
    }
}

fn line_at(bytes: &[u8], pos: usize) -> usize {
    1 + bytes[..pos.min(bytes.len())].iter().filter(|&&b| b == b'\n').count()
}

fn build_tree(bytes: &[u8]) -> Result<Node> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::ParseError {
        line: line_at(bytes, e.valid_up_to()),
        element: String::new(),
        message: "not valid utf-8".into(),
    })?;
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<Node> = vec![Node::default()];
    loop {
        let pos = reader.buffer_position() as usize;
        let current = stack.last().map(|n| n.name.clone()).unwrap_or_default();
        let fail = |message: String, at: usize| Error::ParseError {
            line: line_at(bytes, at),
            element: current.clone(),
            message,
        };
        match reader.read_event() {
            Ok(Event::Start(e)) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                stack.push(Node {
                    name,
                    ..Node::default()
                });
            }
            Ok(Event::Empty(e)) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                stack.last_mut().unwrap().children.push(Node {
                    name,
                    ..Node::default()
                });
            }
            Ok(Event::End(_)) => {
                let node = stack.pop().unwrap();
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => return Err(fail("unbalanced end tag".into(), pos)),
                }
            }
            Ok(Event::Text(t)) => {
                let s = t.unescape().map_err(|e| fail(e.to_string(), pos))?;
                stack.last_mut().unwrap().text.push_str(&s);
            }
            Ok(Event::CData(t)) => {
                let s = String::from_utf8_lossy(&t).into_owned();
                stack.last_mut().unwrap().text.push_str(&s);
            }
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => return Err(fail(e.to_string(), reader.error_position() as usize)),
        }
    }
    if stack.len() != 1 {
        let open = stack.last().map(|n| n.name.clone()).unwrap_or_default();
        return Err(Error::ParseError {
            line: line_at(bytes, bytes.len()),
            element: open,
            message: "unclosed element at end of document".into(),
        });
    }
    let mut root = stack.pop().unwrap();
    match root.children.len() {
        1 => Ok(root.children.pop().unwrap()),
        n => Err(Error::ParseError {
            line: 1,
            element: String::new(),
            message: format!("expected one root element, found {n}"),
        }),
    }
}

fn parse_uint(node: &Node, path: &str) -> Result<u32> {
    let t = node.text.trim();
    if let Ok(v) = t.parse::<u32>() {
        return Ok(v);
    }
    // some tools write float pixel coordinates
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v <= u32::MAX as f64 => Ok(v.round() as u32),
        _ => Err(Error::SchemaError(format!("{path} (not a nonnegative integer: {t:?})"))),
    }
}

fn parse_flag(node: Option<&Node>, path: &str) -> Result<bool> {
    match node.map(|n| n.text.trim()) {
        None | Some("") | Some("0") => Ok(false),
        Some("1") => Ok(true),
        Some(other) => Err(Error::SchemaError(format!("{path} (expected 0 or 1, got {other:?})"))),
    }
}

pub fn parse_voc_xml(bytes: &[u8]) -> Result<Annotation> {
    let root = build_tree(bytes)?;
    if root.name != "annotation" {
        return Err(Error::SchemaError("annotation".into()));
    }
    let filename = root.require("filename", "annotation")?.text.clone();
    let size = root.require("size", "annotation")?;
    let width = parse_uint(size.require("width", "annotation/size")?, "annotation/size/width")?;
    let height = parse_uint(size.require("height", "annotation/size")?, "annotation/size/height")?;
    let depth = match size.child("depth") {
        Some(d) => parse_uint(d, "annotation/size/depth")?,
        None => 3,
    };
    let mut objects = Vec::new();
    for o in root.children.iter().filter(|c| c.name == "object") {
        let p = "annotation/object";
        let name = o.require("name", p)?.text.clone();
        let bb = o.require("bndbox", p)?;
        let coord = |k: &str| -> Result<u32> {
            parse_uint(bb.require(k, "annotation/object/bndbox")?, &format!("annotation/object/bndbox/{k}"))
        };
        objects.push(VocObject {
            name,
            pose: o.text_of("pose").unwrap_or("Unspecified").to_string(),
            truncated: parse_flag(o.child("truncated"), "annotation/object/truncated")?,
            difficult: parse_flag(o.child("difficult"), "annotation/object/difficult")?,
            bndbox: PixelBox {
                xmin: coord("xmin")?,
                ymin: coord("ymin")?,
                xmax: coord("xmax")?,
                ymax: coord("ymax")?,
            },
        });
    }
    let a = Annotation {
        folder: root.text_of("folder").unwrap_or_default().to_string(),
        filename,
        path: root.text_of("path").unwrap_or_default().to_string(),
        database: root
            .child("source")
            .and_then(|s| s.text_of("database"))
            .unwrap_or("Unknown")
            .to_string(),
        width,
        height,
        depth,
        segmented: parse_flag(root.child("segmented"), "annotation/segmented")?,
        objects,
    };
    a.validate()?;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture() -> Annotation {
        let mut a = Annotation::new("A", "A.0f8c1d2e.jpg", 640, 480);
        a.objects.push(VocObject::new(
            "A",
            PixelBox {
                xmin: 120,
                ymin: 80,
                xmax: 360,
                ymax: 400,
            },
        ));
        a
    }

    const HAND_WRITTEN: &str = r#"<annotation>
	<folder>A</folder>
	<filename>A.0f8c1d2e.jpg</filename>
	<path>A/A.0f8c1d2e.jpg</path>
	<source>
		<database>Unknown</database>
	</source>
	<size>
		<width>640</width>
		<height>480</height>
		<depth>3</depth>
	</size>
	<segmented>0</segmented>
	<object>
		<name>A</name>
		<pose>Unspecified</pose>
		<truncated>0</truncated>
		<difficult>0</difficult>
		<bndbox>
			<xmin>120</xmin>
			<ymin>80</ymin>
			<xmax>360</xmax>
			<ymax>400</ymax>
		</bndbox>
	</object>
</annotation>
"#;

    #[test]
    fn hand_written_fixture() {
        let a = parse_voc_xml(HAND_WRITTEN.as_bytes()).unwrap();
        assert_eq!(a, fixture());
        assert_eq!(write_voc_xml(&a).unwrap(), HAND_WRITTEN.as_bytes());
    }

    #[test]
    fn zero_objects_round_trip() {
        let a = Annotation::new("B", "b.ppm", 32, 16);
        assert_eq!(parse_voc_xml(&write_voc_xml(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn inverted_box_is_validation_error() {
        let bad = HAND_WRITTEN.replace("<xmin>120</xmin>", "<xmin>400</xmin>");
        assert!(matches!(parse_voc_xml(bad.as_bytes()), Err(Error::ValidationError(_))));
        let outside = HAND_WRITTEN.replace("<xmax>360</xmax>", "<xmax>641</xmax>");
        assert!(matches!(parse_voc_xml(outside.as_bytes()), Err(Error::ValidationError(_))));
    }

    #[test]
    fn missing_elements_are_schema_errors() {
        let no_size = HAND_WRITTEN.replace("<width>640</width>", "");
        assert!(matches!(parse_voc_xml(no_size.as_bytes()), Err(Error::SchemaError(_))));
        let no_bbox = HAND_WRITTEN.replace("<ymax>400</ymax>", "");
        assert!(matches!(parse_voc_xml(no_bbox.as_bytes()), Err(Error::SchemaError(_))));
        let no_name = HAND_WRITTEN.replace("<name>A</name>", "");
        assert!(matches!(parse_voc_xml(no_name.as_bytes()), Err(Error::SchemaError(_))));
    }

    #[test]
    fn malformed_xml_reports_line() {
        let bad = HAND_WRITTEN.replace("</pose>", "</poze>");
        match parse_voc_xml(bad.as_bytes()) {
            Err(Error::ParseError { line, .. }) => assert_eq!(line, 16),
            other => panic!("{other:?}"),
        }
        match parse_voc_xml(b"<annotation><size>") {
            Err(Error::ParseError { element, .. }) => assert_eq!(element, "size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn escapes_special_characters() {
        let mut a = Annotation::new("x&y", "a<b>.ppm", 10, 10);
        a.objects.push(VocObject::new(
            "R&D",
            PixelBox {
                xmin: 0,
                ymin: 0,
                xmax: 10,
                ymax: 10,
            },
        ));
        assert_eq!(parse_voc_xml(&write_voc_xml(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn float_coordinates_are_rounded() {
        let f = HAND_WRITTEN.replace("<xmin>120</xmin>", "<xmin>120.0</xmin>");
        assert_eq!(parse_voc_xml(f.as_bytes()).unwrap().objects[0].bndbox.xmin, 120);
    }
}
