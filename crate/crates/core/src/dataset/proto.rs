//! Minimal protobuf wire-format codec for the `Example` message family
//! (`Example → Features → map<string, Feature>`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

const WIRE_VARINT: u8 = 0;
const WIRE_FIXED64: u8 = 1;
const WIRE_LEN: u8 = 2;
const WIRE_FIXED32: u8 = 5;

pub fn encode_varint(mut v: u64, out: &mut Vec<u8>) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Decodes a varint at `pos`, returning the value and the next position.
pub fn decode_varint(bytes: &[u8], pos: usize) -> Result<(u64, usize)> {
    let mut v = 0u64;
    for i in 0..10 {
        let b = *bytes.get(pos + i).ok_or_else(|| Error::DecodeError {
            offset: pos + i,
            message: "truncated varint".into(),
        })?;
        if i == 9 && b > 1 {
            return Err(Error::DecodeError {
                offset: pos + i,
                message: "varint overflows 64 bits".into(),
            });
        }
        v |= u64::from(b & 0x7f) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((v, pos + i + 1));
        }
    }
    Err(Error::DecodeError {
        offset: pos,
        message: "varint longer than 10 bytes".into(),
    })
}

fn encode_tag(field: u32, wire: u8, out: &mut Vec<u8>) {
    encode_varint(u64::from(field) << 3 | u64::from(wire), out);
}

fn encode_len_delimited(field: u32, payload: &[u8], out: &mut Vec<u8>) {
    encode_tag(field, WIRE_LEN, out);
    encode_varint(payload.len() as u64, out);
    out.extend_from_slice(payload);
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Bytes(Vec<Vec<u8>>),
    Float(Vec<f32>),
    Int64(Vec<i64>),
}

/// A decoded `Example` message.
pub type Features = BTreeMap<String, Feature>;

fn encode_feature(f: &Feature) -> Vec<u8> {
    let mut list = Vec::new();
    let field = match f {
        Feature::Bytes(values) => {
            for v in values {
                encode_len_delimited(1, v, &mut list);
            }
            1
        }
        Feature::Float(values) => {
            let packed: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            if !values.is_empty() {
                encode_len_delimited(1, &packed, &mut list);
            }
            2
        }
        Feature::Int64(values) => {
            let mut packed = Vec::new();
            for &v in values {
                encode_varint(v as u64, &mut packed);
            }
            if !values.is_empty() {
                encode_len_delimited(1, &packed, &mut list);
            }
            3
        }
    };
    let mut out = Vec::new();
    encode_len_delimited(field, &list, &mut out);
    out
}

/// Serializes features as an `Example` message. Keys are emitted in
/// sorted order, so encoding is deterministic.
pub fn encode_example(features: &Features) -> Vec<u8> {
    let mut inner = Vec::new();
    for (key, feature) in features {
        let mut entry = Vec::new();
        encode_len_delimited(1, key.as_bytes(), &mut entry);
        encode_len_delimited(2, &encode_feature(feature), &mut entry);
        encode_len_delimited(1, &entry, &mut inner);
    }
    let mut out = Vec::new();
    encode_len_delimited(1, &inner, &mut out);
    out
}

enum FieldValue<'a> {
    Varint(u64),
    Fixed64,
    Len(&'a [u8], usize),
    Fixed32(&'a [u8]),
}

/// Iterates over the fields of one message slice; `base` is the absolute
/// offset of `bytes[0]` for error reporting.
struct Fields<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Fields<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Fields { bytes, pos: 0, base }
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::DecodeError {
            offset: self.base + at,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("field needs {n} bytes past end of message"))),
        }
    }

    fn next_field(&mut self) -> Result<Option<(u32, FieldValue<'a>)>> {
        if self.pos >= self.bytes.len() {
            return Ok(None);
        }
        let start = self.pos;
        let (tag, next) = decode_varint(self.bytes, self.pos).map_err(|_| self.err(start, "bad tag"))?;
        self.pos = next;
        let field = (tag >> 3) as u32;
        if field == 0 || tag >> 3 > u64::from(u32::MAX >> 3) {
            return Err(self.err(start, "invalid field number"));
        }
        let value = match (tag & 7) as u8 {
            WIRE_VARINT => {
                let (v, next) = decode_varint(self.bytes, self.pos).map_err(|_| self.err(self.pos, "bad varint"))?;
                self.pos = next;
                FieldValue::Varint(v)
            }
            WIRE_FIXED64 => {
                self.take(8)?;
                FieldValue::Fixed64
            }
            WIRE_LEN => {
                let at = self.pos;
                let (len, next) = decode_varint(self.bytes, self.pos).map_err(|_| self.err(at, "bad length"))?;
                self.pos = next;
                let offset = self.base + self.pos;
                let len = usize::try_from(len).map_err(|_| self.err(at, "length overflow"))?;
                FieldValue::Len(self.take(len)?, offset)
            }
            WIRE_FIXED32 => FieldValue::Fixed32(self.take(4)?),
            w => return Err(self.err(start, format!("unsupported wire type {w}"))),
        };
        Ok(Some((field, value)))
    }
}

fn expect_len<'a>(v: FieldValue<'a>, at: usize, what: &str) -> Result<(&'a [u8], usize)> {
    match v {
        FieldValue::Len(b, off) => Ok((b, off)),
        _ => Err(Error::DecodeError {
            offset: at,
            message: format!("{what} must be length-delimited"),
        }),
    }
}

fn decode_feature(bytes: &[u8], base: usize) -> Result<Feature> {
    let mut fields = Fields::new(bytes, base);
    let mut result = None;
    while let Some((field, value)) = fields.next_field()? {
        let (list, off) = match field {
            1..=3 => expect_len(value, base + fields.pos, "feature list")?,
            _ => continue,
        };
        let mut items = Fields::new(list, off);
        let feature = match field {
            1 => {
                let mut out = Vec::new();
                while let Some((f, v)) = items.next_field()? {
                    if f == 1 {
                        out.push(expect_len(v, off, "bytes value")?.0.to_vec());
                    }
                }
                Feature::Bytes(out)
            }
            2 => {
                let mut out = Vec::new();
                while let Some((f, v)) = items.next_field()? {
                    if f != 1 {
                        continue;
                    }
                    match v {
                        FieldValue::Fixed32(b) => out.push(f32::from_le_bytes(b.try_into().unwrap())),
                        FieldValue::Len(b, o) => {
                            if b.len() % 4 != 0 {
                                return Err(Error::DecodeError {
                                    offset: o,
                                    message: "packed float list length not a multiple of 4".into(),
                                });
                            }
                            out.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
                        }
                        _ => {
                            return Err(Error::DecodeError {
                                offset: off,
                                message: "float list has wrong wire type".into(),
                            })
                        }
                    }
                }
                Feature::Float(out)
            }
            _ => {
                let mut out = Vec::new();
                while let Some((f, v)) = items.next_field()? {
                    if f != 1 {
                        continue;
                    }
                    match v {
                        FieldValue::Varint(x) => out.push(x as i64),
                        FieldValue::Len(b, o) => {
                            let mut p = 0;
                            while p < b.len() {
                                let (x, next) = decode_varint(b, p).map_err(|_| Error::DecodeError {
                                    offset: o + p,
                                    message: "bad packed varint".into(),
                                })?;
                                out.push(x as i64);
                                p = next;
                            }
                        }
                        _ => {
                            return Err(Error::DecodeError {
                                offset: off,
                                message: "int64 list has wrong wire type".into(),
                            })
                        }
                    }
                }
                Feature::Int64(out)
            }
        };
        result = Some(feature);
    }
    Ok(result.unwrap_or(Feature::Bytes(Vec::new())))
}

pub fn decode_example(bytes: &[u8]) -> Result<Features> {
    let mut features = Features::new();
    let mut top = Fields::new(bytes, 0);
    while let Some((field, value)) = top.next_field()? {
        if field != 1 {
            continue;
        }
        let (inner, off) = expect_len(value, top.pos, "features")?;
        let mut entries = Fields::new(inner, off);
        while let Some((f, v)) = entries.next_field()? {
            if f != 1 {
                continue;
            }
            let (entry, eoff) = expect_len(v, off, "feature map entry")?;
            let mut kv = Fields::new(entry, eoff);
            let mut key = None;
            let mut feature = None;
            while let Some((k, v)) = kv.next_field()? {
                match k {
                    1 => {
                        let (b, o) = expect_len(v, eoff, "feature key")?;
                        key = Some(String::from_utf8(b.to_vec()).map_err(|_| Error::DecodeError {
                            offset: o,
                            message: "feature key is not utf-8".into(),
                        })?);
                    }
                    2 => {
                        let (b, o) = expect_len(v, eoff, "feature value")?;
                        feature = Some(decode_feature(b, o)?);
                    }
                    _ => {}
                }
            }
            let key = key.ok_or_else(|| Error::DecodeError {
                offset: eoff,
                message: "feature map entry without key".into(),
            })?;
            features.insert(key, feature.unwrap_or(Feature::Bytes(Vec::new())));
        }
    }
    Ok(features)
}
