//! Datasets and their on-disk formats.
//!
//! Packed binary (`.pcds`, little-endian):
//!
//! ```text
//! "PCDS" | version u16 | num_samples u32 | num_classes u16 | num_parts u16
//! per sample: id u32 | class u16 | N u32 | N×3 f32 | N×u16 labels (iff num_parts > 0)
//! ```
//!
//! A class value of `0xFFFF` marks an unlabeled cloud.
//!
//! xyz text: one point per line (`x y z [part]`), clouds separated by blank
//! lines, each optionally preceded by a `# class <k>` header.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCDS";
pub const VERSION: u16 = 1;
pub const NO_CLASS: u16 = u16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    XyzText,
    PackedBinary,
}

impl DatasetFormat {
    /// `.xyz` / `.txt` are text, everything else is packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") | Some("txt") => DatasetFormat::XyzText,
            _ => DatasetFormat::PackedBinary,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<PointCloud>,
    pub split: Split,
    pub num_classes: u16,
    pub num_parts: u16,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<PointCloud>,
        split: Split,
        num_classes: u16,
        num_parts: u16,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            samples,
            split,
            num_classes,
            num_parts,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
            if let Some(c) = s.class_label {
                if c >= self.num_classes {
                    return Err(Error::Validation(format!(
                        "sample {}: class {c} not below declared {} classes",
                        s.id, self.num_classes
                    )));
                }
            }
            if let Some(labels) = &s.point_labels {
                if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_parts) {
                    return Err(Error::Validation(format!(
                        "sample {}: part label {bad} not below declared {} parts",
                        s.id, self.num_parts
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.class_label.map(usize::from).ok_or_else(|| {
                    Error::config(format!("dataset {}: sample {} has no class label", self.name, s.id))
                })
            })
            .collect()
    }

    pub fn has_point_labels(&self) -> bool {
        self.num_parts > 0 && self.samples.iter().all(|s| s.point_labels.is_some())
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let bytes = match format {
        DatasetFormat::PackedBinary => encode_binary(ds)?,
        DatasetFormat::XyzText => encode_text(ds).into_bytes(),
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path, format: DatasetFormat, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = match format {
        DatasetFormat::PackedBinary => decode_binary(&bytes)?,
        DatasetFormat::XyzText => decode_text(std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
            location: format!("byte {}", e.valid_up_to()),
            message: "not UTF-8".into(),
        })?)?,
    };
    ds.name = name;
    ds.split = split;
    Ok(ds)
}

pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(ds.samples.len() as u32)?;
    out.write_u16::<LittleEndian>(ds.num_classes)?;
    out.write_u16::<LittleEndian>(ds.num_parts)?;
    for s in &ds.samples {
        out.write_u32::<LittleEndian>(s.id)?;
        out.write_u16::<LittleEndian>(s.class_label.unwrap_or(NO_CLASS))?;
        out.write_u32::<LittleEndian>(s.points.len() as u32)?;
        for p in &s.points {
            for &c in p {
                out.write_f32::<LittleEndian>(c)?;
            }
        }
        if ds.num_parts > 0 {
            let labels = s.point_labels.as_ref().ok_or_else(|| {
                Error::Validation(format!("sample {} lacks point labels but num_parts > 0", s.id))
            })?;
            for &l in labels {
                out.write_u16::<LittleEndian>(l)?;
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                location: format!("byte offset {}", self.offset),
                message: format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn error(&self, at: usize, message: String) -> Error {
        Error::Parse {
            location: format!("byte offset {at}"),
            message,
        }
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, offset: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(cur.error(0, "bad magic, expected PCDS".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(cur.error(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("sample count")? as usize;
    let num_classes = cur.u16("class count")?;
    let num_parts = cur.u16("part count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let start = cur.offset;
        let id = cur.u32("sample id")?;
        let class = cur.u16("class label")?;
        let n = cur.u32("point count")? as usize;
        if n == 0 {
            return Err(cur.error(start, format!("sample {id} has zero points")));
        }
        let mut points = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            points.push([cur.f32("x")?, cur.f32("y")?, cur.f32("z")?]);
        }
        let point_labels = if num_parts > 0 {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                labels.push(cur.u16("point label")?);
            }
            Some(labels)
        } else {
            None
        };
        samples.push(PointCloud {
            id,
            points,
            class_label: (class != NO_CLASS).then_some(class),
            point_labels,
        });
    }
    if cur.offset != bytes.len() {
        return Err(cur.error(cur.offset, "trailing bytes after last sample".into()));
    }
    Dataset::new(String::new(), samples, Split::Train, num_classes, num_parts)
}

pub fn encode_text(ds: &Dataset) -> String {
    let mut out = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if let Some(c) = s.class_label {
            out.push_str(&format!("# class {c}\n"));
        }
        for (j, p) in s.points.iter().enumerate() {
            match &s.point_labels {
                Some(l) => out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[j])),
                None => out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
            }
        }
    }
    out
}

/// Parses xyz text. Label-space sizes are inferred as one past the largest
/// label seen.
pub fn decode_text(text: &str) -> Result<Dataset> {
    struct Pending {
        class: Option<u16>,
        points: Vec<[f32; 3]>,
        labels: Vec<u16>,
    }
    let mut samples = Vec::new();
    let mut cur = Pending {
        class: None,
        points: Vec::new(),
        labels: Vec::new(),
    };
    let flush = |cur: &mut Pending, samples: &mut Vec<PointCloud>, line: usize| -> Result<()> {
        if cur.points.is_empty() {
            if cur.class.is_some() {
                return Err(Error::Parse {
                    location: format!("line {line}"),
                    message: "class header without points".into(),
                });
            }
            return Ok(());
        }
        if !cur.labels.is_empty() && cur.labels.len() != cur.points.len() {
            return Err(Error::Parse {
                location: format!("line {line}"),
                message: "part labels must be given for all points of a cloud or none".into(),
            });
        }
        samples.push(PointCloud {
            id: samples.len() as u32,
            points: std::mem::take(&mut cur.points),
            class_label: cur.class.take(),
            point_labels: (!cur.labels.is_empty()).then(|| std::mem::take(&mut cur.labels)),
        });
        Ok(())
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut cur, &mut samples, lineno)?;
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            location: format!("line {lineno}"),
            message,
        };
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("class"), Some(k), None) => {
                    if !cur.points.is_empty() {
                        flush(&mut cur, &mut samples, lineno)?;
                    }
                    cur.class = Some(k.parse().map_err(|_| parse_err(format!("bad class {k:?}")))?);
                }
                _ => return Err(parse_err(format!("unrecognized header {line:?}"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let mut p = [0f32; 3];
        for k in 0..3 {
            p[k] = fields[k]
                .parse()
                .map_err(|_| parse_err(format!("bad coordinate {:?}", fields[k])))?;
            if !p[k].is_finite() {
                return Err(parse_err(format!("non-finite coordinate {:?}", fields[k])));
            }
        }
        if fields.len() == 4 {
            if cur.labels.len() != cur.points.len() {
                return Err(parse_err("part labels must be given for all points or none".into()));
            }
            cur.labels
                .push(fields[3].parse().map_err(|_| parse_err(format!("bad part label {:?}", fields[3])))?);
        } else if !cur.labels.is_empty() {
            return Err(parse_err("part labels must be given for all points or none".into()));
        }
        cur.points.push(p);
    }
    flush(&mut cur, &mut samples, text.lines().count() + 1)?;
    let num_classes = samples
        .iter()
        .filter_map(|s| s.class_label)
        .max()
        .map_or(0, |m| m + 1);
    let all_labeled = !samples.is_empty() && samples.iter().all(|s| s.point_labels.is_some());
    let num_parts = if all_labeled {
        samples
            .iter()
            .flat_map(|s| s.point_labels.iter().flatten().copied())
            .max()
            .map_or(0, |m| m + 1)
    } else {
        for s in &mut samples {
            s.point_labels = None;
        }
        0
    };
    Dataset::new(String::new(), samples, Split::Train, num_classes, num_parts)
}
