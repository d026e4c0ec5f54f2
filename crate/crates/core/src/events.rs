//! Event records, a simplified threshold-crossing simulator, stream
//! splitting/reversal, and voxel-grid binning.
//!
//! An event is a tuple `(x, y, p, t)`: at normalized timestamp `t` the log
//! intensity at pixel `(x, y)` crossed a contrast threshold in direction
//! `p ∈ {-1, +1}`. Streams keep their records sorted by timestamp.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::Image;

/// Floor applied to intensities before taking logs.
pub const LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub x: u32,
    pub y: u32,
    pub polarity: i8,
    pub t: f64,
}

/// A time-sorted list of events over a closed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub t_start: f64,
    pub t_end: f64,
    pub records: Vec<EventRecord>,
}

impl EventStream {
    pub fn empty(t_start: f64, t_end: f64) -> Self {
        EventStream {
            t_start,
            t_end,
            records: Vec::new(),
        }
    }

    pub fn new(t_start: f64, t_end: f64, mut records: Vec<EventRecord>) -> Self {
        records.sort_by(compare_records);
        EventStream {
            t_start,
            t_end,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sum of polarities (net signed event mass).
    pub fn net_polarity(&self) -> f64 {
        self.records.iter().map(|r| r.polarity as f64).sum()
    }
}

fn compare_records(a: &EventRecord, b: &EventRecord) -> std::cmp::Ordering {
    a.t.partial_cmp(&b.t)
        .unwrap()
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.polarity.cmp(&b.polarity))
}

/// A `B x H x W` tensor of temporally binned signed event mass.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Array3<f64>,
}

impl VoxelGrid {
    pub fn bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn zeros(bins: usize, h: usize, w: usize) -> Self {
        VoxelGrid {
            data: Array3::zeros((bins, h, w)),
        }
    }

    pub fn signed_mass(&self) -> f64 {
        self.data.sum()
    }
}

/// Simulates events between two grayscale frames.
///
/// Log intensity is interpolated linearly per pixel between the frames; an
/// event fires at each crossing of an integer multiple of `threshold`, with
/// the timestamp recovered by inverse interpolation. The per-pixel reference
/// level resets to the last emitted threshold, so the emitted count is exactly
/// `floor(|delta_log| / threshold)`.
pub fn simulate_events(
    frame0: &Image,
    frame1: &Image,
    threshold: f64,
    t0: f64,
    t1: f64,
) -> Result<EventStream> {
    if !frame0.same_shape(frame1) {
        return Err(Error::shape(
            format!("{:?}", frame0.data.dim()),
            format!("{:?}", frame1.data.dim()),
        ));
    }
    if threshold <= 0.0 {
        return Err(Error::invalid(format!(
            "contrast threshold must be positive, got {threshold}"
        )));
    }
    if t0 >= t1 {
        return Err(Error::invalid(format!(
            "need t0 < t1, got [{t0}, {t1}]"
        )));
    }
    let (h, w, _) = frame0.data.dim();
    let mut records = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l0 = frame0.data[[y, x, 0]].clamp(LOG_EPS, 1.0).ln();
            let l1 = frame1.data[[y, x, 0]].clamp(LOG_EPS, 1.0).ln();
            let delta = l1 - l0;
            let count = (delta.abs() / threshold).floor() as usize;
            if count == 0 {
                continue;
            }
            let polarity: i8 = if delta > 0.0 { 1 } else { -1 };
            for k in 1..=count {
                let frac = k as f64 * threshold / delta.abs();
                records.push(EventRecord {
                    x: x as u32,
                    y: y as u32,
                    polarity,
                    t: t0 + frac * (t1 - t0),
                });
            }
        }
    }
    Ok(EventStream::new(t0, t1, records))
}

/// Splits a stream at `t`; records with timestamp exactly `t` go to the
/// earlier part.
pub fn split_stream(stream: &EventStream, t: f64) -> Result<(EventStream, EventStream)> {
    if t < stream.t_start || t > stream.t_end {
        return Err(Error::invalid(format!(
            "split time {t} outside [{}, {}]",
            stream.t_start, stream.t_end
        )));
    }
    let cut = stream.records.partition_point(|r| r.t <= t);
    Ok((
        EventStream {
            t_start: stream.t_start,
            t_end: t,
            records: stream.records[..cut].to_vec(),
        },
        EventStream {
            t_start: t,
            t_end: stream.t_end,
            records: stream.records[cut..].to_vec(),
        },
    ))
}

/// Time-reverses a stream: `t' = t_start + t_end - t` with polarity flipped.
pub fn reverse_stream(stream: &EventStream) -> EventStream {
    let records = stream
        .records
        .iter()
        .rev()
        .map(|r| EventRecord {
            x: r.x,
            y: r.y,
            polarity: -r.polarity,
            t: stream.t_start + stream.t_end - r.t,
        })
        .collect();
    EventStream::new(stream.t_start, stream.t_end, records)
}

/// Bins a stream into a voxel grid with bilinear temporal interpolation.
///
/// Bin centers sit at normalized times `k / (bins - 1)`; each event deposits
/// its polarity split between the two nearest centers. Events at the interval
/// edges land fully in the first/last bin.
pub fn voxelize(stream: &EventStream, bins: usize, h: usize, w: usize) -> Result<VoxelGrid> {
    if bins < 2 {
        return Err(Error::invalid(format!(
            "voxel grid needs at least 2 bins, got {bins}"
        )));
    }
    let mut grid = VoxelGrid::zeros(bins, h, w);
    let span = stream.t_end - stream.t_start;
    for r in &stream.records {
        let s = if span > 0.0 {
            ((r.t - stream.t_start) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = s * (bins - 1) as f64;
        let b0 = (q.floor() as usize).min(bins - 1);
        let frac = q - b0 as f64;
        let p = r.polarity as f64;
        let (y, x) = (r.y as usize, r.x as usize);
        grid.data[[b0, y, x]] += p * (1.0 - frac);
        if frac > 0.0 {
            grid.data[[b0 + 1, y, x]] += p * frac;
        }
    }
    Ok(grid)
}

/// Parses the `events.txt` format: one `t x y p` record per line.
pub fn read_events_file(path: &Path, t_start: f64, t_end: f64) -> Result<EventStream> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let fail = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {}", lineno + 1, reason),
        };
        let t: f64 = parts
            .next()
            .ok_or_else(|| fail("missing t"))?
            .parse()
            .map_err(|_| fail("bad t"))?;
        let x: u32 = parts
            .next()
            .ok_or_else(|| fail("missing x"))?
            .parse()
            .map_err(|_| fail("bad x"))?;
        let y: u32 = parts
            .next()
            .ok_or_else(|| fail("missing y"))?
            .parse()
            .map_err(|_| fail("bad y"))?;
        let p: i8 = parts
            .next()
            .ok_or_else(|| fail("missing p"))?
            .parse()
            .map_err(|_| fail("bad p"))?;
        if p != 1 && p != -1 {
            return Err(fail("polarity must be -1 or 1"));
        }
        records.push(EventRecord {
            x,
            y,
            polarity: p,
            t,
        });
    }
    Ok(EventStream::new(t_start, t_end, records))
}

pub fn write_events_file(path: &Path, stream: &EventStream) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &stream.records {
        writeln!(out, "{:.9} {} {} {}", r.t, r.x, r.y, r.polarity)?;
    }
    Ok(())
}
