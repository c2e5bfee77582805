use std::ops::Range;

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One clip: its frame embeddings plus AD text and timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: u32,
    pub movie_id: u32,
    pub start_ms: u64,
    pub end_ms: u64,
    /// `[n×C]` frame embeddings.
    pub frames: Tensor<f32>,
    pub ad_text: String,
}

impl ClipRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Clip records ordered by `(movie_id, start_ms)`, all with `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    channels: usize,
    records: Vec<ClipRecord>,
}

impl Corpus {
    /// Validates ordering, timing and channel invariants.
    pub fn new(channels: usize, records: Vec<ClipRecord>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channel count must be positive"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.start_ms >= r.end_ms {
                return Err(Error::invalid(format!(
                    "clip {} has start {} >= end {}",
                    r.clip_id, r.start_ms, r.end_ms
                )));
            }
            if r.frames.shape().len() != 2 || r.frames.rows() == 0 {
                return Err(Error::invalid(format!("clip {} has no frames", r.clip_id)));
            }
            if r.frames.cols() != channels {
                return Err(Error::shape(format!(
                    "clip {} has {} channels, corpus has {channels}",
                    r.clip_id,
                    r.frames.cols()
                )));
            }
            if i > 0 {
                let p = &records[i - 1];
                let ordered = (p.movie_id, p.start_ms) < (r.movie_id, r.start_ms);
                if !ordered {
                    return Err(Error::invalid(format!(
                        "clip {} is out of (movie, start) order",
                        r.clip_id
                    )));
                }
                if p.movie_id == r.movie_id && p.end_ms > r.start_ms {
                    return Err(Error::invalid(format!(
                        "clips {} and {} overlap",
                        p.clip_id, r.clip_id
                    )));
                }
            }
        }
        Ok(Self { channels, records })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index ranges of each movie's records.
    pub fn movies(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].movie_id != self.records[start].movie_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Sorted vocabulary over all AD texts.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_texts(self.records.iter().map(|r| r.ad_text.as_str()))
    }

    /// L2-normalized mean frame per clip, grouped by movie.
    pub fn pooled_features(&self) -> Vec<Tensor<f64>> {
        self.movies()
            .into_iter()
            .map(|range| {
                let rows: Vec<Vec<f64>> = self.records[range]
                    .iter()
                    .map(|r| {
                        let n = r.frames.rows() as f64;
                        let mut m = vec![0.0; self.channels];
                        for i in 0..r.frames.rows() {
                            for (a, &b) in m.iter_mut().zip(r.frames.row(i)) {
                                *a += b as f64 / n;
                            }
                        }
                        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        m.iter().map(|x| x / norm).collect()
                    })
                    .collect();
                Tensor::from_rows(&rows).expect("equal widths")
            })
            .collect()
    }
}
