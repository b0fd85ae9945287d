//! Slicing long videos into clips at speech-sentence boundaries.
//!
//! Each ASR sentence becomes one clip. The clip text is every OCR text whose interval
//! overlaps the sentence, in time order, followed by the sentence itself, all
//! space-joined. The clip's first and last frames sit at the sentence boundaries.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Asr,
    Ocr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEvent {
    pub kind: EventKind,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
    pub video_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRefs {
    pub first_frame_ms: u64,
    pub last_frame_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: u32,
    pub video_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub combined_text: String,
    pub frame_refs: FrameRefs,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmentation {
    pub clips: Vec<ClipManifest>,
    /// ASR events dropped because their text was blank.
    pub skipped_empty: usize,
    /// ASR events dropped because they have zero duration.
    pub skipped_zero_length: usize,
}

impl Segmentation {
    pub fn warnings(&self) -> usize {
        self.skipped_empty + self.skipped_zero_length
    }
}

fn overlaps(ocr: &TranscriptEvent, start: u64, end: u64) -> bool {
    if ocr.start_ms == ocr.end_ms {
        start <= ocr.start_ms && ocr.start_ms < end
    } else {
        ocr.start_ms < end && start < ocr.end_ms
    }
}

pub fn segment_transcript(events: &[TranscriptEvent]) -> Result<Segmentation> {
    let mut offenders = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if e.start_ms > e.end_ms {
            offenders.push(format!("event {i} ({}) ends before it starts: {}..{}", e.video_id, e.start_ms, e.end_ms));
        }
    }
    let mut last_asr: HashMap<&str, (usize, &TranscriptEvent)> = HashMap::new();
    for (i, e) in events.iter().enumerate().filter(|(_, e)| e.kind == EventKind::Asr) {
        if let Some(&(j, prev)) = last_asr.get(e.video_id.as_str()) {
            if e.start_ms < prev.start_ms {
                offenders.push(format!(
                    "ASR event {i} ({}) at {} ms precedes event {j} at {} ms",
                    e.video_id, e.start_ms, prev.start_ms
                ));
            } else if e.start_ms < prev.end_ms {
                offenders.push(format!(
                    "ASR events {j} and {i} ({}) overlap: {}..{} and {}..{}",
                    e.video_id, prev.start_ms, prev.end_ms, e.start_ms, e.end_ms
                ));
            }
        }
        last_asr.insert(&e.video_id, (i, e));
    }
    if !offenders.is_empty() {
        return Err(Error::Validation { offenders });
    }

    let mut ocr_by_video: HashMap<&str, Vec<(usize, &TranscriptEvent)>> = HashMap::new();
    for (i, e) in events.iter().enumerate().filter(|(_, e)| e.kind == EventKind::Ocr) {
        ocr_by_video.entry(&e.video_id).or_default().push((i, e));
    }
    for list in ocr_by_video.values_mut() {
        list.sort_by_key(|(i, e)| (e.start_ms, e.end_ms, *i));
    }

    let mut out = Segmentation::default();
    for e in events.iter().filter(|e| e.kind == EventKind::Asr) {
        let sentence = e.text.trim();
        if sentence.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        if e.start_ms == e.end_ms {
            out.skipped_zero_length += 1;
            continue;
        }
        let mut parts: Vec<&str> = ocr_by_video
            .get(e.video_id.as_str())
            .into_iter()
            .flatten()
            .filter(|(_, o)| overlaps(o, e.start_ms, e.end_ms))
            .map(|(_, o)| o.text.trim())
            .filter(|t| !t.is_empty())
            .collect();
        parts.push(sentence);
        out.clips.push(ClipManifest {
            clip_id: out.clips.len() as u32,
            video_id: e.video_id.clone(),
            start_ms: e.start_ms,
            end_ms: e.end_ms,
            combined_text: parts.join(" "),
            frame_refs: FrameRefs {
                first_frame_ms: e.start_ms,
                last_frame_ms: e.end_ms,
            },
        });
    }
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializing plain records cannot fail");
        buf.push(b'\n');
    }
    super::write_atomic(path, &buf)
}

/// Reads a transcript: one JSON object per line, blank lines ignored.
pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptEvent>> {
    read_jsonl(path.as_ref())
}

pub fn write_transcript(path: impl AsRef<Path>, events: &[TranscriptEvent]) -> Result<()> {
    write_jsonl(path.as_ref(), events)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ClipManifest>> {
    read_jsonl(path.as_ref())
}

pub fn write_manifest(path: impl AsRef<Path>, clips: &[ClipManifest]) -> Result<()> {
    write_jsonl(path.as_ref(), clips)
}
