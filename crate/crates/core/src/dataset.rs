//! On-disk dataset format: a directory of numbered PGM frames plus odometry
//! and ground-truth CSVs and a small JSON meta file.
//!
//! ```text
//! dataset/
//!   meta.json          width, height, frame_rate, seed, scenario
//!   frames/000000.pgm  8-bit binary PGM (P5), or PPM (P6) for color
//!   odometry.csv       timestamp,dx,dy,dtheta   (body-frame increments)
//!   ground_truth.csv   timestamp,x,y
//! ```
//!
//! Floats are written with shortest-round-trip formatting, so CSV values read
//! back bit-identical; pixel values quantize to 8 bits on write.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FrameError, PixelMode};
use crate::synthstream::{FlightRecord, GroundTruthSample, OdomSample};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Meta { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path} line {line}: {detail}")]
    Csv { path: PathBuf, line: usize, detail: String },
    #[error("frame sequence gap: frames/{missing:06}.pgm is missing but later frames exist")]
    SequenceGap { missing: usize },
    #[error("stream lengths disagree: {frames} frames, {odometry} odometry rows, {ground_truth} ground-truth rows")]
    CountMismatch { frames: usize, odometry: usize, ground_truth: usize },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub width: u32,
    pub height: u32,
    pub frame_rate: f64,
    pub seed: u64,
    pub scenario: String,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

/// Quantize to 8 bits and write a binary PGM (P5) or PPM (P6) image.
pub fn write_frame_image(path: &Path, frame: &Frame) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let magic = match frame.mode {
        PixelMode::Gray => "P5",
        PixelMode::Rgb => "P6",
    };
    let header = format!("{magic}\n{} {}\n255\n", frame.width, frame.height);
    let bytes: Vec<u8> = frame.pixels().iter().map(|&v| (v * 255.0).round() as u8).collect();
    out.write_all(header.as_bytes())
        .and_then(|_| out.write_all(&bytes))
        .and_then(|_| out.flush())
        .map_err(|e| io_err(path, e))
}

/// Read a binary PGM/PPM written by [`write_frame_image`] (or any 8-bit P5/P6
/// file, `#` comments included). `id` and `timestamp` are caller-supplied;
/// the image file carries only pixels.
pub fn read_frame_image(path: &Path, id: u64, timestamp: f64) -> Result<Frame, DatasetError> {
    let bad = |detail: String| DatasetError::Image { path: path.to_path_buf(), detail };
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| io_err(path, e))?;

    // Header tokens separated by whitespace, with # comments running to end
    // of line; pixel data starts after the single whitespace byte that
    // terminates the maxval token.
    let mut pos = 0usize;
    let mut next_token = |raw: &[u8]| -> Option<(usize, usize)> {
        while pos < raw.len() {
            match raw[pos] {
                b'#' => {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() && raw[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then_some((start, pos))
    };

    let mut tokens = Vec::new();
    for _ in 0..4 {
        let (a, b) = next_token(&raw).ok_or_else(|| bad("truncated header".into()))?;
        tokens.push(std::str::from_utf8(&raw[a..b]).map_err(|_| bad("non-ASCII header".into()))?.to_string());
    }
    let mode = match tokens[0].as_str() {
        "P5" => PixelMode::Gray,
        "P6" => PixelMode::Rgb,
        other => return Err(bad(format!("unsupported magic {other:?} (expected P5 or P6)"))),
    };
    let width: u32 = tokens[1].parse().map_err(|_| bad(format!("bad width {:?}", tokens[1])))?;
    let height: u32 = tokens[2].parse().map_err(|_| bad(format!("bad height {:?}", tokens[2])))?;
    if tokens[3] != "255" {
        return Err(bad(format!("unsupported maxval {:?} (expected 255)", tokens[3])));
    }
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval".into()));
    }
    pos += 1;

    let expected = width as usize * height as usize * mode.channels();
    let data = &raw[pos..];
    if data.len() != expected {
        return Err(bad(format!("expected {expected} pixel bytes, found {}", data.len())));
    }
    let pixels: Vec<f64> = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Frame::new(id, timestamp, width, height, mode, pixels)?)
}

fn fmt_row(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    cells.join(",")
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let body: Result<(), std::io::Error> = (|| {
        writeln!(out, "{header}")?;
        for row in rows {
            writeln!(out, "{}", fmt_row(&row))?;
        }
        out.flush()
    })();
    body.map_err(|e| io_err(path, e))
}

fn read_csv(path: &Path, header: &str, columns: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
    let err = |line: usize, detail: String| DatasetError::Csv { path: path.to_path_buf(), line, detail };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end() == header => {}
        Some((_, first)) => return Err(err(1, format!("bad header {first:?} (expected {header:?})"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns {
            return Err(err(i + 1, format!("expected {columns} columns, found {}", cells.len())));
        }
        let mut row = Vec::with_capacity(columns);
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(i + 1, format!("bad number {cell:?}")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("non-finite value {v}")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub const ODOMETRY_HEADER: &str = "timestamp,dx,dy,dtheta";
pub const GROUND_TRUTH_HEADER: &str = "timestamp,x,y";

pub fn write_odometry_csv(path: &Path, samples: &[OdomSample]) -> Result<(), DatasetError> {
    write_csv(
        path,
        ODOMETRY_HEADER,
        samples.iter().map(|s| vec![s.timestamp, s.dx, s.dy, s.dtheta]),
    )
}

pub fn write_ground_truth_csv(path: &Path, samples: &[GroundTruthSample]) -> Result<(), DatasetError> {
    write_csv(path, GROUND_TRUTH_HEADER, samples.iter().map(|s| vec![s.timestamp, s.x, s.y]))
}

pub fn read_ground_truth_csv(path: &Path) -> Result<Vec<GroundTruthSample>, DatasetError> {
    let rows = read_csv(path, GROUND_TRUTH_HEADER, 3)?;
    Ok(rows.into_iter().map(|r| GroundTruthSample { timestamp: r[0], x: r[1], y: r[2] }).collect())
}

/// Write a complete dataset directory for a simulated flight.
pub fn write_dataset(dir: &Path, record: &FlightRecord, scenario: &str) -> Result<(), DatasetError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;

    let (width, height) = match record.frames.first() {
        Some(f) => (f.width, f.height),
        None => {
            return Err(DatasetError::CountMismatch { frames: 0, odometry: record.odometry.len(), ground_truth: record.ground_truth.len() })
        }
    };
    let meta = DatasetMeta {
        width,
        height,
        frame_rate: record.frame_rate,
        seed: record.seed,
        scenario: scenario.to_string(),
    };
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| DatasetError::Meta { path: meta_path.clone(), detail: e.to_string() })?;
    fs::write(&meta_path, meta_json + "\n").map_err(|e| io_err(&meta_path, e))?;

    for (i, frame) in record.frames.iter().enumerate() {
        write_frame_image(&frames_dir.join(frame_file_name(i)), frame)?;
    }
    write_odometry_csv(&dir.join("odometry.csv"), &record.odometry)?;
    write_ground_truth_csv(&dir.join("ground_truth.csv"), &record.ground_truth)?;
    Ok(())
}

/// Lazily-loading view of a dataset directory. Opening validates the layout
/// (contiguous frame files, matching stream lengths, sane meta); frames are
/// decoded on demand so long streams never sit in memory at once.
pub struct DatasetReader {
    frames_dir: PathBuf,
    meta: DatasetMeta,
    odometry: Vec<OdomSample>,
    ground_truth: Vec<GroundTruthSample>,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let meta_path = dir.join("meta.json");
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| DatasetError::Meta { path: meta_path.clone(), detail: e.to_string() })?;
        if meta.width == 0 || meta.height == 0 || !meta.frame_rate.is_finite() || meta.frame_rate <= 0.0 {
            return Err(DatasetError::Meta {
                path: meta_path,
                detail: format!(
                    "bad dimensions or rate: {}x{} at {}",
                    meta.width, meta.height, meta.frame_rate
                ),
            });
        }

        let odo_path = dir.join("odometry.csv");
        let rows = read_csv(&odo_path, ODOMETRY_HEADER, 4)?;
        let mut odometry = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if i > 0 && r[0] < rows[i - 1][0] {
                return Err(DatasetError::Csv {
                    path: odo_path.clone(),
                    line: i + 2,
                    detail: format!("timestamps go backwards: {} after {}", r[0], rows[i - 1][0]),
                });
            }
            odometry.push(OdomSample { timestamp: r[0], dx: r[1], dy: r[2], dtheta: r[3] });
        }
        let ground_truth = read_ground_truth_csv(&dir.join("ground_truth.csv"))?;

        let frames_dir = dir.join("frames");
        let mut indices = Vec::new();
        let entries = fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&frames_dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".pgm") {
                if let Ok(index) = stem.parse::<usize>() {
                    indices.push(index);
                }
            }
        }
        indices.sort_unstable();
        for (expect, &got) in indices.iter().enumerate() {
            if got != expect {
                return Err(DatasetError::SequenceGap { missing: expect });
            }
        }
        if indices.len() != odometry.len()
            || indices.is_empty()
            || ground_truth.is_empty()
            || ground_truth.len() != odometry.len()
        {
            return Err(DatasetError::CountMismatch {
                frames: indices.len(),
                odometry: odometry.len(),
                ground_truth: ground_truth.len(),
            });
        }

        let nominal = 1.0 / meta.frame_rate;
        for pair in odometry.windows(2) {
            let dt = pair[1].timestamp - pair[0].timestamp;
            if dt > 1.5 * nominal {
                log::warn!(
                    "timestamp gap of {dt:.3}s after t={:.3} (nominal frame interval {nominal:.3}s)",
                    pair[0].timestamp
                );
            }
        }

        Ok(DatasetReader { frames_dir, meta, odometry, ground_truth })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.odometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.odometry.is_empty()
    }

    pub fn odometry(&self) -> &[OdomSample] {
        &self.odometry
    }

    pub fn ground_truth(&self) -> &[GroundTruthSample] {
        &self.ground_truth
    }

    /// Decode frame `index`; its timestamp comes from the odometry row.
    pub fn frame(&self, index: usize) -> Result<Frame, DatasetError> {
        let path = self.frames_dir.join(frame_file_name(index));
        let frame = read_frame_image(&path, index as u64, self.odometry[index].timestamp)?;
        if frame.width != self.meta.width || frame.height != self.meta.height {
            return Err(DatasetError::Image {
                path,
                detail: format!(
                    "frame is {}x{}, meta says {}x{}",
                    frame.width, frame.height, self.meta.width, self.meta.height
                ),
            });
        }
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthstream::{BuiltinScenario, FlightPlan, WorldSpec};

    fn small_record() -> FlightRecord {
        let world = crate::synthstream::generate_world(&WorldSpec {
            image_size: (16, 12),
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let plan = FlightPlan {
            waypoints: vec![(6.0, 1.5), (6.0, 4.5)],
            noise_sigma_xy: 0.01,
            noise_sigma_theta: 0.001,
            ..Default::default()
        };
        crate::synthstream::simulate_flight(&world, &plan).unwrap()
    }

    #[test]
    fn dataset_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let record = small_record();
        write_dataset(dir.path(), &record, BuiltinScenario::Flight1.name()).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(reader.len(), record.frames.len());
        assert_eq!(reader.meta().width, 16);
        assert_eq!(reader.meta().scenario, "flight1");
        assert_eq!(reader.meta().seed, 9);
        assert_eq!(reader.odometry(), &record.odometry[..]);
        assert_eq!(reader.ground_truth(), &record.ground_truth[..]);
        for (i, original) in record.frames.iter().enumerate() {
            let loaded = reader.frame(i).unwrap();
            assert_eq!(loaded.id, i as u64);
            assert_eq!(loaded.timestamp, original.timestamp);
            let worst = loaded
                .pixels()
                .iter()
                .zip(original.pixels())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "frame {i} quantization error {worst}");
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let record = small_record();
        write_dataset(dir.path(), &record, "flight1").unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        let reloaded = reader.frame(3).unwrap();
        let path = dir.path().join("frames").join(frame_file_name(3));
        write_frame_image(&path, &reloaded).unwrap();
        let again = read_frame_image(&path, 3, reloaded.timestamp).unwrap();
        assert_eq!(again.pixels(), reloaded.pixels());
    }

    #[test]
    fn detects_frame_sequence_gaps() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small_record(), "flight1").unwrap();
        std::fs::remove_file(dir.path().join("frames").join(frame_file_name(5))).unwrap();
        match DatasetReader::open(dir.path()) {
            Err(DatasetError::SequenceGap { missing: 5 }) => {}
            other => panic!("expected a gap at 5, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn detects_stream_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small_record(), "flight1").unwrap();
        let odo = dir.path().join("odometry.csv");
        let text = std::fs::read_to_string(&odo).unwrap();
        let truncated: Vec<&str> = text.lines().take(text.lines().count() - 2).collect();
        std::fs::write(&odo, truncated.join("\n") + "\n").unwrap();
        assert!(matches!(
            DatasetReader::open(dir.path()),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small_record(), "flight1").unwrap();

        let frame0 = dir.path().join("frames").join(frame_file_name(0));
        std::fs::write(&frame0, b"P7\n16 12\n255\nxxxx").unwrap();
        assert!(matches!(DatasetReader::open(dir.path()).unwrap().frame(0), Err(DatasetError::Image { .. })));

        let odo = dir.path().join("odometry.csv");
        std::fs::write(&odo, "time,dx,dy,dtheta\n0,0,0,0\n").unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DatasetError::Csv { .. })));
    }

    #[test]
    fn rejects_backward_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small_record(), "flight1").unwrap();
        let odo = dir.path().join("odometry.csv");
        let mut lines: Vec<String> = std::fs::read_to_string(&odo).unwrap().lines().map(String::from).collect();
        lines.swap(4, 5);
        std::fs::write(&odo, lines.join("\n") + "\n").unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DatasetError::Csv { .. })));
    }

    #[test]
    fn pgm_comments_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pgm");
        let mut data = b"P5 # binary graymap\n# produced by hand\n2 2\n255\n".to_vec();
        data.extend_from_slice(&[0, 85, 170, 255]);
        std::fs::write(&path, data).unwrap();
        let frame = read_frame_image(&path, 0, 0.0).unwrap();
        assert_eq!(frame.width, 2);
        let px = frame.pixels();
        assert_eq!(px[0], 0.0);
        assert_eq!(px[3], 1.0);
        assert!((px[1] - 85.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn color_images_round_trip_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("color.pgm");
        let pixels: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64 / 11.0).collect();
        let frame = Frame::new(7, 1.25, 2, 2, PixelMode::Rgb, pixels).unwrap();
        write_frame_image(&path, &frame).unwrap();
        let loaded = read_frame_image(&path, 7, 1.25).unwrap();
        assert_eq!(loaded.mode, PixelMode::Rgb);
        assert_eq!(loaded.len(), 12);
        let worst = loaded
            .pixels()
            .iter()
            .zip(frame.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12);
    }
}
