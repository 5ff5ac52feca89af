//! Event stream parsing, fixed-window clip slicing, and sparse voxel-grid
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SparseTensor;

/// Size in bytes of one native binary event record.
pub const NATIVE_RECORD_BYTES: usize = 13;

/// A single camera event: timestamp (microseconds), pixel, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: u8,
}

/// On-disk event encodings understood by [`parse_events`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// Headerless little-endian records: t: u64, x: u16, y: u16, p: u8.
    NativeBinary,
    /// Lines "t,x,y,p" in decimal; a header line is skipped if present.
    Csv,
}

/// Events of one fixed-time window, half-open `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventClip {
    pub events: Vec<Event>,
    pub t_start: u64,
    pub t_end: u64,
    /// Sensor geometry (height, width).
    pub geometry: (u16, u16),
}

/// Polarity handling when binning events into voxel channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityMode {
    /// Both polarities count as +1 into the same bin channel (B channels).
    Merged,
    /// Separate channels per polarity (2B channels, channel = 2*bin + p).
    Split,
}

/// Spatial size and temporal binning of the voxel-grid input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGridConfig {
    pub height: u16,
    pub width: u16,
    /// Temporal bins per clip.
    pub bins: u16,
    pub polarity: PolarityMode,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        VoxelGridConfig {
            height: 64,
            width: 64,
            bins: 3,
            polarity: PolarityMode::Merged,
        }
    }
}

impl VoxelGridConfig {
    pub fn new(height: u16, width: u16, bins: u16, polarity: PolarityMode) -> Result<Self> {
        if bins < 1 {
            return Err(Error::argument("voxel grid needs at least one bin"));
        }
        if height < 8 || width < 8 {
            return Err(Error::argument("voxel grid geometry must be at least 8x8"));
        }
        Ok(VoxelGridConfig {
            height,
            width,
            bins,
            polarity,
        })
    }

    /// Channel count of the produced tensors.
    pub fn channels(&self) -> usize {
        match self.polarity {
            PolarityMode::Merged => self.bins as usize,
            PolarityMode::Split => 2 * self.bins as usize,
        }
    }
}

/// Parse an event stream, enforcing geometry bounds and non-decreasing
/// timestamps. `geometry` is (height, width), supplied out-of-band.
pub fn parse_events(bytes: &[u8], format: EventFormat, geometry: (u16, u16)) -> Result<Vec<Event>> {
    match format {
        EventFormat::NativeBinary => parse_native(bytes, geometry),
        EventFormat::Csv => parse_csv(bytes, geometry),
    }
}

fn check_event(ev: Event, record: usize, prev_t: Option<u64>, geometry: (u16, u16)) -> Result<()> {
    let (h, w) = geometry;
    if ev.x >= w || ev.y >= h {
        return Err(Error::Geometry {
            record,
            x: ev.x,
            y: ev.y,
            width: w,
            height: h,
        });
    }
    if let Some(prev) = prev_t {
        if ev.t < prev {
            return Err(Error::Ordering {
                record,
                t: ev.t,
                prev,
            });
        }
    }
    Ok(())
}

fn parse_native(bytes: &[u8], geometry: (u16, u16)) -> Result<Vec<Event>> {
    if !bytes.len().is_multiple_of(NATIVE_RECORD_BYTES) {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % NATIVE_RECORD_BYTES,
            reason: format!(
                "trailing {} bytes do not form a {NATIVE_RECORD_BYTES}-byte record",
                bytes.len() % NATIVE_RECORD_BYTES
            ),
        });
    }
    let mut events = Vec::with_capacity(bytes.len() / NATIVE_RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(NATIVE_RECORD_BYTES).enumerate() {
        let ev = Event {
            t: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
            x: u16::from_le_bytes(rec[8..10].try_into().unwrap()),
            y: u16::from_le_bytes(rec[10..12].try_into().unwrap()),
            p: rec[12],
        };
        if ev.p > 1 {
            return Err(Error::Parse {
                offset: i * NATIVE_RECORD_BYTES + 12,
                reason: format!("polarity {} is not 0 or 1", ev.p),
            });
        }
        check_event(ev, i + 1, events.last().map(|e: &Event| e.t), geometry)?;
        events.push(ev);
    }
    Ok(events)
}

fn parse_csv(bytes: &[u8], geometry: (u16, u16)) -> Result<Vec<Event>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        reason: "invalid utf-8".into(),
    })?;
    let mut events = Vec::new();
    let mut offset = 0usize;
    let mut record = 0usize;
    for line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        // Header line: skip if the first field is not a number.
        if record == 0 && trimmed.split(',').next().unwrap().trim().parse::<u64>().is_err() {
            record = usize::MAX; // mark header consumed; next data line is record 1
            continue;
        }
        if record == usize::MAX {
            record = 0;
        }
        record += 1;
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                offset: line_offset,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_field = |s: &str, name: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Parse {
                offset: line_offset,
                reason: format!("bad {name} field {s:?}"),
            })
        };
        let t = parse_field(fields[0], "t")?;
        let x = parse_field(fields[1], "x")?;
        let y = parse_field(fields[2], "y")?;
        let p = parse_field(fields[3], "p")?;
        if x > u16::MAX as u64 || y > u16::MAX as u64 || p > 1 {
            return Err(Error::Parse {
                offset: line_offset,
                reason: "field out of range".into(),
            });
        }
        let ev = Event {
            t,
            x: x as u16,
            y: y as u16,
            p: p as u8,
        };
        check_event(ev, record, events.last().map(|e: &Event| e.t), geometry)?;
        events.push(ev);
    }
    Ok(events)
}

/// Encode events in the native binary record format.
pub fn encode_events_native(events: &[Event]) -> Vec<u8> {
    let mut out = Vec::with_capacity(events.len() * NATIVE_RECORD_BYTES);
    for ev in events {
        out.extend_from_slice(&ev.t.to_le_bytes());
        out.extend_from_slice(&ev.x.to_le_bytes());
        out.extend_from_slice(&ev.y.to_le_bytes());
        out.push(ev.p);
    }
    out
}

/// Encode events as CSV with a header line.
pub fn encode_events_csv(events: &[Event]) -> String {
    let mut out = String::from("t,x,y,p\n");
    for ev in events {
        out.push_str(&format!("{},{},{},{}\n", ev.t, ev.x, ev.y, ev.p));
    }
    out
}

/// Slice an ordered event stream into consecutive fixed-width clips.
///
/// Clip `i` covers `[t0 + i*window_us, t0 + (i+1)*window_us)`. Empty clips
/// are emitted so the recurrent head still advances once per window, and at
/// least `min_clips` clips are produced even when the stream runs dry.
pub fn slice_clips(
    events: &[Event],
    window_us: u64,
    t0: u64,
    min_clips: usize,
    geometry: (u16, u16),
) -> Result<Vec<EventClip>> {
    if window_us == 0 {
        return Err(Error::argument("clip window must be positive"));
    }
    if let Some(first) = events.first() {
        if first.t < t0 {
            return Err(Error::argument(format!(
                "event at t={} precedes clip origin t0={t0}",
                first.t
            )));
        }
    }
    let needed = match events.last() {
        Some(last) => ((last.t - t0) / window_us + 1) as usize,
        None => 0,
    };
    let n_clips = needed.max(min_clips);
    let mut clips: Vec<EventClip> = (0..n_clips)
        .map(|i| EventClip {
            events: Vec::new(),
            t_start: t0 + i as u64 * window_us,
            t_end: t0 + (i as u64 + 1) * window_us,
            geometry,
        })
        .collect();
    for ev in events {
        let idx = ((ev.t - t0) / window_us) as usize;
        clips[idx].events.push(*ev);
    }
    Ok(clips)
}

/// Build the sparse voxel grid of one clip: per-pixel, per-temporal-bin event
/// counts, saturating at 255 per channel. A site is active iff at least one
/// of its channels is non-zero.
pub fn voxelize(clip: &EventClip, cfg: &VoxelGridConfig) -> Result<SparseTensor<f32>> {
    if clip.geometry != (cfg.height, cfg.width) {
        return Err(Error::argument(format!(
            "clip geometry {:?} does not match voxel config {}x{}",
            clip.geometry, cfg.height, cfg.width
        )));
    }
    let h = cfg.height as usize;
    let w = cfg.width as usize;
    let c = cfg.channels();
    let bins = cfg.bins as u128;
    let window = (clip.t_end - clip.t_start) as u128;

    // Dense count accumulation, then sparsified; clips are small.
    let mut counts = vec![0u16; h * w * c];
    for ev in &clip.events {
        debug_assert!(ev.t >= clip.t_start && ev.t < clip.t_end);
        let bin = ((ev.t - clip.t_start) as u128 * bins / window) as usize;
        let ch = match cfg.polarity {
            PolarityMode::Merged => bin,
            PolarityMode::Split => 2 * bin + ev.p as usize,
        };
        let idx = (ev.y as usize * w + ev.x as usize) * c + ch;
        counts[idx] = counts[idx].saturating_add(1);
    }
    let mut sites = Vec::new();
    let mut features = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            let cell = &counts[base..base + c];
            if cell.iter().any(|&v| v > 0) {
                sites.push((y as u16, x as u16));
                features.extend(cell.iter().map(|&v| v.min(255) as f32));
            }
        }
    }
    Ok(SparseTensor::from_sorted(h, w, c, sites, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEOM: (u16, u16) = (64, 64);

    #[test]
    fn parse_empty_input() {
        assert!(parse_events(&[], EventFormat::NativeBinary, GEOM)
            .unwrap()
            .is_empty());
        assert!(parse_events(b"", EventFormat::Csv, GEOM).unwrap().is_empty());
    }

    #[test]
    fn parse_single_native_record() {
        let ev = Event { t: 5, x: 3, y: 2, p: 1 };
        let bytes = encode_events_native(&[ev]);
        assert_eq!(bytes.len(), NATIVE_RECORD_BYTES);
        let parsed = parse_events(&bytes, EventFormat::NativeBinary, GEOM).unwrap();
        assert_eq!(parsed, vec![ev]);
    }

    #[test]
    fn parse_csv_decreasing_t_is_ordering_error() {
        let err = parse_events(b"10,1,1,0\n9,1,1,0", EventFormat::Csv, GEOM).unwrap_err();
        match err {
            Error::Ordering { record, t, prev } => {
                assert_eq!(record, 2);
                assert_eq!(t, 9);
                assert_eq!(prev, 10);
            }
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn parse_csv_skips_header() {
        let parsed = parse_events(b"t,x,y,p\n10,1,2,0\n", EventFormat::Csv, GEOM).unwrap();
        assert_eq!(parsed, vec![Event { t: 10, x: 1, y: 2, p: 0 }]);
    }

    #[test]
    fn parse_rejects_out_of_geometry() {
        let ev = Event { t: 5, x: 64, y: 2, p: 1 };
        let bytes = encode_events_native(&[ev]);
        let err = parse_events(&bytes, EventFormat::NativeBinary, GEOM).unwrap_err();
        assert!(matches!(err, Error::Geometry { record: 1, .. }));
    }

    #[test]
    fn parse_rejects_truncated_native_record() {
        let bytes = vec![0u8; NATIVE_RECORD_BYTES + 5];
        let err = parse_events(&bytes, EventFormat::NativeBinary, GEOM).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, NATIVE_RECORD_BYTES),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_bad_polarity() {
        let mut bytes = encode_events_native(&[Event { t: 5, x: 3, y: 2, p: 1 }]);
        bytes[12] = 2;
        assert!(parse_events(&bytes, EventFormat::NativeBinary, GEOM).is_err());
    }

    fn at(t: u64) -> Event {
        Event { t, x: 1, y: 1, p: 0 }
    }

    #[test]
    fn slice_clips_buckets_events() {
        let events = [at(100), at(250), at(900)];
        let clips = slice_clips(&events, 500, 0, 0, GEOM).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].events, vec![at(100), at(250)]);
        assert_eq!(clips[1].events, vec![at(900)]);
        assert_eq!(clips[0].t_start, 0);
        assert_eq!(clips[0].t_end, 500);
        assert_eq!(clips[1].t_start, 500);
    }

    #[test]
    fn slice_clips_emits_empty_clips_for_requested_span() {
        let clips = slice_clips(&[], 500, 0, 2, GEOM).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.events.is_empty()));
        assert_eq!(clips[1].t_end, 1000);
    }

    #[test]
    fn slice_clips_boundary_event_goes_to_next_clip() {
        let events = [at(500)];
        let clips = slice_clips(&events, 500, 0, 0, GEOM).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips[0].events.is_empty());
        assert_eq!(clips[1].events, vec![at(500)]);
    }

    #[test]
    fn slice_clips_zero_window_is_error() {
        assert!(slice_clips(&[at(1)], 0, 0, 0, GEOM).is_err());
    }

    #[test]
    fn slice_clips_partitions_all_events() {
        let events: Vec<Event> = (0..100).map(|i| at(i * 37)).collect();
        let clips = slice_clips(&events, 250, 0, 0, GEOM).unwrap();
        let total: usize = clips.iter().map(|c| c.events.len()).sum();
        assert_eq!(total, events.len());
        for clip in &clips {
            for ev in &clip.events {
                assert!(ev.t >= clip.t_start && ev.t < clip.t_end);
            }
        }
    }

    fn cfg_merged(bins: u16) -> VoxelGridConfig {
        VoxelGridConfig::new(64, 64, bins, PolarityMode::Merged).unwrap()
    }

    #[test]
    fn voxelize_empty_clip() {
        let clip = EventClip {
            events: vec![],
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let t = voxelize(&clip, &cfg_merged(2)).unwrap();
        assert_eq!(t.site_count(), 0);
        assert_eq!(t.channels(), 2);
    }

    #[test]
    fn voxelize_counts_events_per_bin() {
        // Three events at (y=2, x=3), all inside bin 0 of a 2-bin clip.
        let clip = EventClip {
            events: vec![
                Event { t: 10, x: 3, y: 2, p: 1 },
                Event { t: 20, x: 3, y: 2, p: 0 },
                Event { t: 499, x: 3, y: 2, p: 1 },
            ],
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let t = voxelize(&clip, &cfg_merged(2)).unwrap();
        assert_eq!(t.sites(), &[(2, 3)]);
        assert_eq!(t.feature(0), &[3.0, 0.0]);
    }

    #[test]
    fn voxelize_split_polarity_channels() {
        let clip = EventClip {
            events: vec![
                Event { t: 0, x: 1, y: 1, p: 0 },
                Event { t: 1, x: 1, y: 1, p: 1 },
                Event { t: 999, x: 1, y: 1, p: 1 },
            ],
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let cfg = VoxelGridConfig::new(64, 64, 2, PolarityMode::Split).unwrap();
        let t = voxelize(&clip, &cfg).unwrap();
        assert_eq!(t.channels(), 4);
        // channel = 2*bin + p
        assert_eq!(t.feature(0), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn voxelize_geometry_mismatch_is_error() {
        let clip = EventClip {
            events: vec![],
            t_start: 0,
            t_end: 1000,
            geometry: (32, 32),
        };
        assert!(voxelize(&clip, &cfg_merged(2)).is_err());
    }

    #[test]
    fn voxelize_saturates_at_255() {
        let events = (0..300)
            .map(|i| Event { t: i, x: 0, y: 0, p: 0 })
            .collect();
        let clip = EventClip {
            events,
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let t = voxelize(&clip, &cfg_merged(1)).unwrap();
        assert_eq!(t.feature(0), &[255.0]);
    }

    #[test]
    fn voxelize_is_deterministic() {
        let clip = EventClip {
            events: (0..200)
                .map(|i| Event { t: i, x: (i % 9) as u16, y: (i % 11) as u16, p: (i % 2) as u8 })
                .collect(),
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let cfg = cfg_merged(3);
        assert_eq!(voxelize(&clip, &cfg).unwrap(), voxelize(&clip, &cfg).unwrap());
    }

    #[test]
    fn voxelize_matches_dense_histogram_oracle() {
        // 1000 pseudo-random events on 64x64, B=1: the active-site set must
        // equal the distinct pixels of a dense 2-D histogram, and per-site
        // counts must match it.
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        let events: Vec<Event> = (0..1000)
            .map(|i| Event {
                t: i,
                x: (next() % 64) as u16,
                y: (next() % 64) as u16,
                p: (next() % 2) as u8,
            })
            .collect();
        let clip = EventClip {
            events: events.clone(),
            t_start: 0,
            t_end: 1000,
            geometry: GEOM,
        };
        let t = voxelize(&clip, &cfg_merged(1)).unwrap();

        let mut hist = vec![0u32; 64 * 64];
        for ev in &events {
            hist[ev.y as usize * 64 + ev.x as usize] += 1;
        }
        let expected_sites: Vec<(u16, u16)> = (0..64u16)
            .flat_map(|y| (0..64u16).map(move |x| (y, x)))
            .filter(|&(y, x)| hist[y as usize * 64 + x as usize] > 0)
            .collect();
        assert_eq!(t.sites(), expected_sites.as_slice());
        for (i, &(y, x)) in t.sites().iter().enumerate() {
            assert_eq!(t.feature(i)[0], hist[y as usize * 64 + x as usize] as f32);
        }
        // Conservation: summed features equal the event count.
        let total: f32 = (0..t.site_count()).map(|i| t.feature(i)[0]).sum();
        assert_eq!(total, 1000.0);
    }
}
