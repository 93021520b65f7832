//! File formats: detection JSON Lines, MOTChallenge CSV, loss-batch JSON Lines, and
//! atomic writes for all of them.
//!
//! A detection file starts with a header line
//! `{"format":"hbtrack-detections","version":1,"embedding_dim":D}` followed by one
//! record per line. Records sharing a `pair_hint` within a frame form one paired record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aml::LossBatch;
use crate::geometry::BBox;
use crate::pairing::{Detection, FramePairs, PairedDetection, Part};
use crate::tracker::TrackRow;

pub const DETECTION_FORMAT: &str = "hbtrack-detections";
pub const DETECTION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: line {line}: {message}", path.display())]
    Line { path: PathBuf, line: usize, message: String },
    #[error("{}: line {line}: embedding length {actual}, expected {expected}", path.display())]
    EmbeddingLength { path: PathBuf, line: usize, expected: usize, actual: usize },
    #[error("{}: {message}", path.display())]
    Header { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn line_err(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Line { path: path.to_path_buf(), line, message: message.into() }
}

/// Writes through a temporary file in the target directory and renames it into place,
/// so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), FormatError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    builder.prefix(".hbtrack-");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| line_err(path, e.line(), e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionHeader {
    pub format: String,
    pub version: u32,
    pub embedding_dim: usize,
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame: u32,
    pub part: Part,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_hint: Option<u64>,
    pub embedding: Vec<f64>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection<f64>, tile_id: Option<usize>, pair_hint: Option<u64>) -> Self {
        let b = &d.bbox;
        Self { frame: d.frame, part: d.part, x: b.x, y: b.y, w: b.w, h: b.h, score: b.score, tile_id, pair_hint, embedding: d.embedding.clone() }
    }

    pub fn bbox(&self) -> BBox<f64> {
        BBox { x: self.x, y: self.y, w: self.w, h: self.h, score: self.score }
    }

    pub fn to_detection(&self) -> Detection<f64> {
        Detection::new(self.bbox(), self.part, self.embedding.clone(), self.frame)
    }
}

/// A parsed detection file; records are sorted by frame (stable), `lines[k]` is the
/// source line of `records[k]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub embedding_dim: usize,
    pub records: Vec<DetectionRecord>,
    pub lines: Vec<usize>,
}

impl DetectionFile {
    pub fn new(embedding_dim: usize, records: Vec<DetectionRecord>) -> Self {
        let lines = (0..records.len()).map(|k| k + 2).collect();
        Self { embedding_dim, records, lines }
    }

    /// Frame numbers with their records, ascending.
    pub fn frames(&self) -> Vec<(u32, Vec<&DetectionRecord>)> {
        let mut out: BTreeMap<u32, Vec<&DetectionRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.frame).or_default().push(r);
        }
        out.into_iter().collect()
    }
}

pub fn read_detections(path: &Path) -> Result<DetectionFile, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: DetectionHeader = loop {
        match lines.next() {
            None => return Err(FormatError::Header { path: path.to_path_buf(), message: "missing header line".into() }),
            Some((i, l)) => {
                let l = l.map_err(io_err(path))?;
                if l.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&l).map_err(|e| line_err(path, i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.format != DETECTION_FORMAT || header.version != DETECTION_VERSION {
        return Err(FormatError::Header {
            path: path.to_path_buf(),
            message: format!("expected format {DETECTION_FORMAT} version {DETECTION_VERSION}, found {} version {}", header.format, header.version),
        });
    }
    let mut numbered = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&l).map_err(|e| line_err(path, line, e.to_string()))?;
        if r.embedding.len() != header.embedding_dim {
            return Err(FormatError::EmbeddingLength { path: path.to_path_buf(), line, expected: header.embedding_dim, actual: r.embedding.len() });
        }
        if r.frame < 1 {
            return Err(line_err(path, line, "frame numbers start at 1"));
        }
        r.bbox().validate().map_err(|e| line_err(path, line, e.to_string()))?;
        if r.embedding.iter().any(|v| !v.is_finite()) {
            return Err(line_err(path, line, "non-finite embedding value"));
        }
        numbered.push((line, r));
    }
    numbered.sort_by_key(|(_, r)| r.frame);
    let (lines, records) = numbered.into_iter().unzip();
    Ok(DetectionFile { embedding_dim: header.embedding_dim, records, lines })
}

pub fn write_detections(path: &Path, file: &DetectionFile) -> Result<(), FormatError> {
    let header = DetectionHeader { format: DETECTION_FORMAT.into(), version: DETECTION_VERSION, embedding_dim: file.embedding_dim };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &header).map_err(std::io::Error::other)?;
        writeln!(w)?;
        for r in &file.records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Flattens paired records into detection records; the parts of the `k`-th record of a
/// frame share `pair_hint = k`.
pub fn paired_to_records(frames: &[(u32, Vec<PairedDetection<f64>>)]) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for (_, records) in frames {
        for (k, rec) in records.iter().enumerate() {
            for d in [rec.body(), rec.head()].into_iter().flatten() {
                out.push(DetectionRecord::from_detection(d, None, Some(k as u64)));
            }
        }
    }
    out
}

/// Rebuilds paired records per frame: records sharing a `pair_hint` are joined, records
/// without one stay single. Records appear in order of first occurrence.
pub fn records_to_paired(path: &Path, file: &DetectionFile) -> Result<FramePairs<f64>, FormatError> {
    type Slot = (usize, Option<Detection<f64>>, Option<Detection<f64>>);
    let mut frames: BTreeMap<u32, (Vec<Slot>, BTreeMap<u64, usize>)> = BTreeMap::new();
    for (r, &line) in file.records.iter().zip(&file.lines) {
        let (slots, by_hint) = frames.entry(r.frame).or_default();
        let k = match r.pair_hint {
            Some(hint) => *by_hint.entry(hint).or_insert_with(|| {
                slots.push((line, None, None));
                slots.len() - 1
            }),
            None => {
                slots.push((line, None, None));
                slots.len() - 1
            }
        };
        let slot = &mut slots[k];
        let target = if r.part == Part::Body { &mut slot.1 } else { &mut slot.2 };
        if target.is_some() {
            return Err(line_err(path, line, format!("pair_hint {:?} already has a {:?} in frame {}", r.pair_hint, r.part, r.frame)));
        }
        *target = Some(r.to_detection());
    }
    frames
        .into_iter()
        .map(|(frame, (slots, _))| {
            let recs = slots
                .into_iter()
                .map(|(line, b, h)| PairedDetection::new(b, h).map_err(|e| line_err(path, line, e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((frame, recs))
        })
        .collect()
}

/// MOTChallenge result rows: `frame,id,x,y,w,h,conf,-1,-1,-1`.
pub fn write_results(path: &Path, rows: &[TrackRow<f64>]) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        for r in rows {
            let b = &r.bbox;
            writeln!(w, "{},{},{},{},{},{},{},-1,-1,-1", r.frame, r.id, b.x, b.y, b.w, b.h, b.score)?;
        }
        Ok(())
    })
}

/// MOTChallenge ground truth: `frame,id,x,y,w,h,1,1,visibility`.
pub fn write_ground_truth(path: &Path, rows: &[(TrackRow<f64>, f64)]) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        for (r, vis) in rows {
            let b = &r.bbox;
            writeln!(w, "{},{},{},{},{},{},1,1,{}", r.frame, r.id, b.x, b.y, b.w, b.h, vis)?;
        }
        Ok(())
    })
}

/// Reads MOTChallenge rows (results or ground truth). The seventh column becomes the
/// box score, clamped to `[0, 1]`; a missing column reads as 1. Ground-truth rows whose
/// seventh column is 0 (ignored entries) are kept with score 0.
pub fn read_mot(path: &Path) -> Result<Vec<TrackRow<f64>>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, l) in BufReader::new(file).lines().enumerate() {
        let line = i + 1;
        let l = l.map_err(io_err(path))?;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        if cols.len() < 6 {
            return Err(line_err(path, line, format!("expected at least 6 columns, found {}", cols.len())));
        }
        let num = |k: usize| cols[k].parse::<f64>().map_err(|e| line_err(path, line, format!("column {}: {e}", k + 1)));
        let frame = cols[0].parse::<u32>().map_err(|e| line_err(path, line, format!("frame: {e}")))?;
        let id = cols[1].parse::<u64>().map_err(|e| line_err(path, line, format!("id: {e}")))?;
        let score = if cols.len() > 6 { num(6)?.clamp(0.0, 1.0) } else { 1.0 };
        let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?, score).map_err(|e| line_err(path, line, e.to_string()))?;
        out.push(TrackRow { frame, id, bbox });
    }
    Ok(out)
}

/// One loss batch per line.
pub fn read_loss_batches(path: &Path) -> Result<Vec<LossBatch<f64>>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, l) in BufReader::new(file).lines().enumerate() {
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let b: LossBatch<f64> = serde_json::from_str(&l).map_err(|e| line_err(path, i + 1, e.to_string()))?;
        b.validate().map_err(|e| line_err(path, i + 1, e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_loss_batches(path: &Path, batches: &[LossBatch<f64>]) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        for b in batches {
            serde_json::to_writer(&mut *w, b).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frame: u32, part: Part, hint: Option<u64>) -> DetectionRecord {
        DetectionRecord { frame, part, x: 1.5, y: 2.0, w: 10.0, h: 20.0, score: 0.75, tile_id: None, pair_hint: hint, embedding: vec![0.1, -0.2, 1.0 / 3.0] }
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let file = DetectionFile::new(3, vec![record(1, Part::Body, Some(0)), record(1, Part::Head, Some(0)), record(2, Part::Body, None)]);
        write_detections(&p, &file).unwrap();
        assert_eq!(read_detections(&p).unwrap(), file);
    }

    #[test]
    fn header_only_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"format\":\"hbtrack-detections\",\"version\":1,\"embedding_dim\":4}\n").unwrap();
        let f = read_detections(&p).unwrap();
        assert!(f.records.is_empty());
        assert_eq!(f.embedding_dim, 4);
    }

    #[test]
    fn bad_embedding_length_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut text = String::from("{\"format\":\"hbtrack-detections\",\"version\":1,\"embedding_dim\":3}\n");
        for k in 0..6 {
            let mut r = record(1, Part::Body, None);
            if k == 5 {
                r.embedding.push(0.0);
            }
            text.push_str(&serde_json::to_string(&r).unwrap());
            text.push('\n');
        }
        std::fs::write(&p, text).unwrap();
        match read_detections(&p).unwrap_err() {
            FormatError::EmbeddingLength { line, expected, actual, .. } => assert_eq!((line, expected, actual), (7, 3, 4)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"format\":\"hbtrack-detections\",\"version\":1,\"embedding_dim\":0}\n{\"frame\":1}\n").unwrap();
        assert!(matches!(read_detections(&p).unwrap_err(), FormatError::Line { line: 2, .. }));
        std::fs::write(&p, "{\"format\":\"other\",\"version\":1,\"embedding_dim\":0}\n").unwrap();
        assert!(matches!(read_detections(&p).unwrap_err(), FormatError::Header { .. }));
        let zero_w = "{\"format\":\"hbtrack-detections\",\"version\":1,\"embedding_dim\":0}\n{\"frame\":1,\"part\":\"body\",\"x\":0,\"y\":0,\"w\":0,\"h\":1,\"score\":0.5,\"embedding\":[]}\n";
        std::fs::write(&p, zero_w).unwrap();
        assert!(matches!(read_detections(&p).unwrap_err(), FormatError::Line { line: 2, .. }));
    }

    #[test]
    fn pair_hints_rebuild_records() {
        let file = DetectionFile::new(3, vec![record(1, Part::Body, Some(4)), record(1, Part::Head, None), record(1, Part::Head, Some(4))]);
        let paired = records_to_paired(Path::new("x"), &file).unwrap();
        assert_eq!(paired.len(), 1);
        let kinds: Vec<_> = paired[0].1.iter().map(|r| r.kind()).collect();
        assert_eq!(kinds, vec![crate::pairing::PairKind::Both, crate::pairing::PairKind::HeadOnly]);
        let again = records_to_paired(Path::new("x"), &DetectionFile::new(3, paired_to_records(&paired))).unwrap();
        assert_eq!(again, paired);

        let clash = DetectionFile::new(3, vec![record(1, Part::Body, Some(1)), record(1, Part::Body, Some(1))]);
        assert!(matches!(records_to_paired(Path::new("x"), &clash).unwrap_err(), FormatError::Line { line: 3, .. }));
    }

    #[test]
    fn mot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        let rows = vec![
            TrackRow { frame: 1, id: 3, bbox: BBox::new(0.1, 2.0, 30.25, 60.0, 0.875).unwrap() },
            TrackRow { frame: 2, id: 3, bbox: BBox::new(1.1, 2.0, 30.25, 60.0, 0.5).unwrap() },
        ];
        write_results(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next().unwrap(), "1,3,0.1,2,30.25,60,0.875,-1,-1,-1");
        assert_eq!(read_mot(&p).unwrap(), rows);

        let g = dir.path().join("gt.txt");
        write_ground_truth(&g, &[(rows[0], 0.25)]).unwrap();
        assert_eq!(std::fs::read_to_string(&g).unwrap(), "1,3,0.1,2,30.25,60,1,1,0.25\n");
        assert_eq!(read_mot(&g).unwrap()[0].bbox.score, 1.0);

        std::fs::write(&g, "1,3,0,0\n").unwrap();
        assert!(matches!(read_mot(&g).unwrap_err(), FormatError::Line { line: 1, .. }));
    }

    #[test]
    fn failed_write_leaves_target_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        std::fs::write(&p, "old").unwrap();
        let err = write_atomic(&p, |w| {
            w.write_all(b"partial")?;
            Err(std::io::Error::other("boom"))
        });
        assert!(err.is_err());
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "old");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "temporary file cleaned up");
    }
}
