use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::spec::DatasetSpec;
use crate::error::{Error, Result};

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub split: String,
    pub count: usize,
}

/// Write a header line then one JSON object per instance. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_dataset(
    path: &Path,
    spec: &DatasetSpec,
    split: &str,
    instances: &[Instance],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        spec: spec.clone(),
        split: split.to_string(),
        count: instances.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for x in instances {
        serde_json::to_writer(&mut out, x)?;
        out.write_all(b"\n")?;
    }
    out.flush().map_err(|e| Error::file(path, e))
}

/// Streaming reader: holds one line in memory at a time.
pub struct DatasetReader {
    header: DatasetHeader,
    tags: Vec<usize>,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    seen: usize,
    finished: bool,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        header.spec.validate()?;
        let tags = header.spec.layout()?.tags;
        Ok(DatasetReader {
            header,
            tags,
            lines,
            line_no: 1,
            seen: 0,
            finished: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let Some(line) = self.lines.next() else {
            self.finished = true;
            if self.seen != self.header.count {
                return Some(Err(Error::Parse {
                    line: self.line_no + 1,
                    message: format!(
                        "file ends after {} instances, header promises {}",
                        self.seen, self.header.count
                    ),
                }));
            }
            return None;
        };
        self.line_no += 1;
        let line_no = self.line_no;
        let parsed = line
            .map_err(Error::from)
            .and_then(|l| {
                serde_json::from_str::<Instance>(&l).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })
            })
            .and_then(|x| {
                x.validate(self.header.spec.vocab_size, &self.tags)
                    .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
                Ok(x)
            });
        if parsed.is_err() {
            self.finished = true;
        } else {
            self.seen += 1;
        }
        Some(parsed)
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Instance>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let instances = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, instances))
}
