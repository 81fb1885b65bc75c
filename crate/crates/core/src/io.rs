//! CGF1 field-stack files.
//!
//! Layout (little endian): magic `CGF1`, `u16` version, `u32` field count,
//! `u32` frame count, then per field a `u16` name length, the UTF-8 name, a
//! `u8` kind tag and `u32` rows and cols. The payload follows as `f64`
//! values: frame by frame, and within a frame field by field, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Location};

pub const MAGIC: &[u8; 4] = b"CGF1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDesc {
    pub name: String,
    pub kind: Location,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    pub fields: Vec<FieldDesc>,
    /// One entry per time level, each holding one field per descriptor.
    pub frames: Vec<Vec<Field>>,
}

fn kind_tag(k: Location) -> u8 {
    match k {
        Location::Cell => 0,
        Location::FaceX => 1,
        Location::FaceY => 2,
        Location::Vertex => 3,
    }
}

fn tag_kind(t: u8) -> Option<Location> {
    Some(match t {
        0 => Location::Cell,
        1 => Location::FaceX,
        2 => Location::FaceY,
        3 => Location::Vertex,
        _ => return None,
    })
}

impl FieldStack {
    pub fn new(fields: Vec<FieldDesc>) -> Self {
        FieldStack {
            fields,
            frames: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: Vec<Field>) -> Result<()> {
        if frame.len() != self.fields.len() {
            return Err(Error::shape(
                "field stack",
                format!("frame has {} fields, expected {}", frame.len(), self.fields.len()),
            ));
        }
        for (f, d) in frame.iter().zip(&self.fields) {
            if f.shape() != (d.rows, d.cols) {
                return Err(Error::shape(
                    "field stack",
                    format!("field {} is {:?}, expected {:?}", d.name, f.shape(), (d.rows, d.cols)),
                ));
            }
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|d| d.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for d in &self.fields {
            out.extend_from_slice(&(d.name.len() as u16).to_le_bytes());
            out.extend_from_slice(d.name.as_bytes());
            out.push(kind_tag(d.kind));
            out.extend_from_slice(&(d.rows as u32).to_le_bytes());
            out.extend_from_slice(&(d.cols as u32).to_le_bytes());
        }
        for frame in &self.frames {
            for f in frame {
                for x in f.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad(format!("truncated at byte {pos}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic, expected CGF1".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let nfields = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let nframes = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut fields = Vec::with_capacity(nfields);
        for _ in 0..nfields {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("field name is not UTF-8".into()))?;
            let tag = take(1)?[0];
            let kind = tag_kind(tag).ok_or_else(|| bad(format!("unknown field kind {tag}")))?;
            let rows = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            fields.push(FieldDesc { name, kind, rows, cols });
        }
        let per_frame: usize = fields.iter().map(|d| d.rows * d.cols).sum();
        let expected = per_frame * nframes * 8;
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(bad(format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut frames = Vec::with_capacity(nframes);
        for _ in 0..nframes {
            let frame = fields
                .iter()
                .map(|d| {
                    let data: Vec<f64> = vals.by_ref().take(d.rows * d.cols).collect();
                    Field::from_vec(d.rows, d.cols, data)
                })
                .collect::<Result<Vec<_>>>()?;
            frames.push(frame);
        }
        Ok(FieldStack { fields, frames })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
