//! Tab-separated dataset manifests.
//!
//! ```text
//! # comment
//! dataset=DRIVE split=train resize=native
//! 21_training<TAB>images/21.tif<TAB>labels/21.gif<TAB>mask/21.gif
//! ```
//!
//! Paths are relative to the manifest's directory; the mask column is optional.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use super::{binarize_label, decode_image, resize_sample, DataError, Sample, SampleSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizePolicy {
    Native,
    Fixed { height: usize, width: usize },
}

impl fmt::Display for ResizePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResizePolicy::Native => f.write_str("native"),
            ResizePolicy::Fixed { height, width } => write!(f, "{height}x{width}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub dataset: String,
    pub split: Split,
    pub resize: ResizePolicy,
    pub records: Vec<Record>,
}

fn parse_resize(v: &str) -> Option<ResizePolicy> {
    if v == "native" {
        return Some(ResizePolicy::Native);
    }
    let (h, w) = v.split_once('x')?;
    let (height, width) = (h.parse().ok()?, w.parse().ok()?);
    (height > 0 && width > 0).then_some(ResizePolicy::Fixed { height, width })
}

impl DatasetManifest {
    /// Parses manifest text; `path` locates relative entries and error messages.
    pub fn parse(path: &Path, text: &str) -> Result<Self, DataError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let err = |line: usize, message: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header: Option<(String, Split, ResizePolicy)> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim_end_matches('\r');
            if content.trim().is_empty() || content.trim_start().starts_with('#') {
                continue;
            }
            if header.is_none() {
                let (mut dataset, mut split, mut resize) = (None, None, None);
                for field in content.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| err(line, format!("expected key=value in header, found {field:?}")))?;
                    match k {
                        "dataset" => dataset = Some(v.to_string()),
                        "split" => {
                            split = Some(match v {
                                "train" => Split::Train,
                                "test" => Split::Test,
                                _ => return Err(err(line, format!("split must be train or test, found {v:?}"))),
                            })
                        }
                        "resize" => {
                            resize = Some(
                                parse_resize(v)
                                    .ok_or_else(|| err(line, format!("resize must be native or HxW, found {v:?}")))?,
                            )
                        }
                        _ => return Err(err(line, format!("unknown header key {k:?}"))),
                    }
                }
                let dataset = dataset.ok_or_else(|| err(line, "header lacks dataset=".into()))?;
                let split = split.ok_or_else(|| err(line, "header lacks split=".into()))?;
                header = Some((dataset, split, resize.unwrap_or(ResizePolicy::Native)));
                continue;
            }
            let cols: Vec<&str> = content.split('\t').collect();
            if !(3..=4).contains(&cols.len()) || cols.iter().any(|c| c.trim().is_empty()) {
                return Err(err(
                    line,
                    format!("expected id, image, label and optional mask separated by tabs, found {} fields", cols.len()),
                ));
            }
            let id = cols[0].trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(DataError::DuplicateId {
                    path: path.to_path_buf(),
                    line,
                    id,
                });
            }
            let resolve = |c: &str| -> Result<PathBuf, DataError> {
                let p = base.join(c.trim());
                if p.is_file() {
                    Ok(p)
                } else {
                    Err(DataError::MissingFile {
                        path: path.to_path_buf(),
                        line,
                        id: id.clone(),
                        file: p,
                    })
                }
            };
            records.push(Record {
                image: resolve(cols[1])?,
                label: resolve(cols[2])?,
                mask: cols.get(3).map(|c| resolve(c)).transpose()?,
                id,
            });
        }
        let (dataset, split, resize) = header.ok_or_else(|| err(text.lines().count().max(1), "missing header line".into()))?;
        Ok(DatasetManifest {
            path: path.to_path_buf(),
            dataset,
            split,
            resize,
            records,
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetManifest::parse(path, &text)
}

/// Splits records into the first `first` and the rest, in manifest order.
pub fn split_records(manifest: &DatasetManifest, first: usize) -> (DatasetManifest, DatasetManifest) {
    let cut = first.min(manifest.records.len());
    let mut a = manifest.clone();
    let mut b = manifest.clone();
    a.records.truncate(cut);
    a.split = Split::Train;
    b.records.drain(..cut);
    b.split = Split::Test;
    (a, b)
}

/// Loads manifest records from disk on demand.
pub struct ManifestSource {
    manifest: DatasetManifest,
    channels: usize,
}

impl ManifestSource {
    pub fn new(manifest: DatasetManifest, channels: usize) -> Self {
        ManifestSource { manifest, channels }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, record: &Record) -> Result<Sample, DataError> {
        let image = decode_image(&record.image, self.channels)?;
        let label_img = decode_image(&record.label, 1)?;
        let mask = match &record.mask {
            Some(p) => {
                let m = decode_image(p, 1)?;
                if (m.height, m.width) != (image.height, image.width) {
                    return Err(DataError::InvalidSample {
                        id: record.id.clone(),
                        message: format!("mask is {}x{}, image is {}x{}", m.height, m.width, image.height, image.width),
                    });
                }
                Some(binarize_label(&m).into_iter().map(|v| v == 1).collect())
            }
            None => None,
        };
        if (label_img.height, label_img.width) != (image.height, image.width) {
            return Err(DataError::InvalidSample {
                id: record.id.clone(),
                message: format!(
                    "label is {}x{}, image is {}x{}",
                    label_img.height, label_img.width, image.height, image.width
                ),
            });
        }
        let sample = Sample::new(
            record.id.clone(),
            (image.height, image.width, image.channels),
            image.data,
            binarize_label(&label_img),
            mask,
        )?;
        match self.manifest.resize {
            ResizePolicy::Native => Ok(sample),
            ResizePolicy::Fixed { height, width } => resize_sample(&sample, height, width),
        }
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.records.len()
    }

    fn get(&self, index: usize) -> Result<Sample, DataError> {
        let record = self.manifest.records.get(index).ok_or(DataError::Index {
            index,
            len: self.manifest.records.len(),
        })?;
        self.load(record).map_err(|e| DataError::Sample {
            id: record.id.clone(),
            source: Box::new(e),
        })
    }
}
