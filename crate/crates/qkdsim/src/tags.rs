//! Timestamped detection events and their on-disk formats.
//!
//! Two interchangeable formats carry tag streams between the synthesizer,
//! the synchronizer and external tooling:
//!
//! * CSV with header `time_ps,channel`
//! * binary: 16-byte header (magic `QTAG`, `u16` version 1 little-endian,
//!   10 reserved bytes) followed by packed records of `u64` little-endian
//!   picosecond timestamp and `u8` channel, 9 bytes per record, no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TAG_MAGIC: &[u8; 4] = b"QTAG";
pub const TAG_FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 9;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a tag file")]
    BadMagic,
    #[error("unsupported tag format version {0}")]
    BadVersion(u16),
    #[error("truncated record section: {0} trailing bytes")]
    Truncated(usize),
    #[error("line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
    #[error("tag {index} has negative time {time_ps} ps")]
    NegativeTime { index: usize, time_ps: i64 },
    #[error("channel {0} out of range (detectors are 0..4)")]
    BadChannel(u8),
}

/// One single-photon detection: integer picoseconds since the epoch of its
/// stream and the detector index. Channel bit 1 encodes the basis (0 = z),
/// bit 0 the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTag {
    pub time_ps: i64,
    pub channel: u8,
}

impl TimeTag {
    pub fn basis_is_z(&self) -> bool {
        self.channel & 0b10 == 0
    }

    pub fn outcome(&self) -> bool {
        self.channel & 0b01 != 0
    }
}

/// Nominal clock transform a synthesized stream was generated with:
/// `t_recorded = t_physical * (1 + drift) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClockTruth {
    pub offset_s: f64,
    pub drift: f64,
}

/// Time-ordered sequence of tags from one party.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagStream {
    pub label: String,
    pub tags: Vec<TimeTag>,
    /// Clock transform applied during synthesis; identity for recorded data.
    pub clock: ClockTruth,
}

impl TagStream {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            tags: Vec::new(),
            clock: ClockTruth::default(),
        }
    }

    pub fn is_time_ordered(&self) -> bool {
        self.tags.windows(2).all(|w| w[0].time_ps <= w[1].time_ps)
    }

    /// Smallest spacing between consecutive tags on the same detector, in ps.
    pub fn min_same_detector_spacing(&self) -> Option<i64> {
        let mut last = [None::<i64>; 4];
        let mut min = None;
        for tag in &self.tags {
            let ch = (tag.channel & 0b11) as usize;
            if let Some(prev) = last[ch] {
                let gap = tag.time_ps - prev;
                min = Some(min.map_or(gap, |m: i64| m.min(gap)));
            }
            last[ch] = Some(tag.time_ps);
        }
        min
    }

    pub fn write_binary(&self, path: &Path) -> Result<(), TagError> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = [0u8; HEADER_LEN];
        header[..4].copy_from_slice(TAG_MAGIC);
        header[4..6].copy_from_slice(&TAG_FORMAT_VERSION.to_le_bytes());
        w.write_all(&header)?;
        let mut record = [0u8; RECORD_LEN];
        for (index, tag) in self.tags.iter().enumerate() {
            if tag.time_ps < 0 {
                return Err(TagError::NegativeTime {
                    index,
                    time_ps: tag.time_ps,
                });
            }
            record[..8].copy_from_slice(&(tag.time_ps as u64).to_le_bytes());
            record[8] = tag.channel;
            w.write_all(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path, label: impl Into<String>) -> Result<Self, TagError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != TAG_MAGIC {
            return Err(TagError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TAG_FORMAT_VERSION {
            return Err(TagError::BadVersion(version));
        }
        let body = &bytes[HEADER_LEN..];
        let trailing = body.len() % RECORD_LEN;
        if trailing != 0 {
            return Err(TagError::Truncated(trailing));
        }
        let mut tags = Vec::with_capacity(body.len() / RECORD_LEN);
        for rec in body.chunks_exact(RECORD_LEN) {
            let time = u64::from_le_bytes(rec[..8].try_into().expect("8-byte slice"));
            let channel = rec[8];
            if channel >= 4 {
                return Err(TagError::BadChannel(channel));
            }
            tags.push(TimeTag {
                time_ps: time as i64,
                channel,
            });
        }
        Ok(Self {
            label: label.into(),
            tags,
            clock: ClockTruth::default(),
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TagError> {
        writeln!(w, "time_ps,channel")?;
        for tag in &self.tags {
            writeln!(w, "{},{}", tag.time_ps, tag.channel)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, label: impl Into<String>) -> Result<Self, TagError> {
        let mut text = String::new();
        BufReader::new(r).read_to_string(&mut text)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "time_ps,channel" => {}
            _ => {
                return Err(TagError::BadCsv {
                    line: 1,
                    reason: "expected header `time_ps,channel`".into(),
                })
            }
        }
        let mut tags = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (t, c) = line.split_once(',').ok_or_else(|| TagError::BadCsv {
                line: i + 1,
                reason: "expected `time_ps,channel`".into(),
            })?;
            let time_ps: i64 = t.trim().parse().map_err(|e| TagError::BadCsv {
                line: i + 1,
                reason: format!("bad time: {e}"),
            })?;
            let channel: u8 = c.trim().parse().map_err(|e| TagError::BadCsv {
                line: i + 1,
                reason: format!("bad channel: {e}"),
            })?;
            if channel >= 4 {
                return Err(TagError::BadChannel(channel));
            }
            tags.push(TimeTag { time_ps, channel });
        }
        Ok(Self {
            label: label.into(),
            tags,
            clock: ClockTruth::default(),
        })
    }

    /// Reads either format, sniffing the binary magic.
    pub fn read_auto(path: &Path, label: impl Into<String>) -> Result<Self, TagError> {
        let mut probe = [0u8; 4];
        let n = File::open(path)?.read(&mut probe)?;
        if n == 4 && &probe == TAG_MAGIC {
            Self::read_binary(path, label)
        } else {
            Self::read_csv(File::open(path)?, label)
        }
    }
}
