//! Dataset model: manifests of categorized images, a synthetic generator
//! with drifting parameters, directory ingestion, and batch iteration.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod batch;
mod ingest;
mod synth;

pub use batch::{epoch_batches, ImageStore};
pub use ingest::{ingest_images, IngestReport};
pub use synth::{make_aux_corpus, make_dataset, render_image, AuxManifest, AuxRecord, DriftConfig, DriftProfile, SynthConfig};

pub const SUPPORTED_SIDES: [usize; 3] = [16, 32, 64];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Bar,
    Grid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Bar, ShapeKind::Grid];

    pub fn index(self) -> usize {
        match self {
            ShapeKind::Disc => 0,
            ShapeKind::Bar => 1,
            ShapeKind::Grid => 2,
        }
    }
}

/// Generation parameters of one movement: three style knobs and three
/// content knobs. Every record of a movement carries the same values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementParams {
    pub hue: f64,
    pub texture_freq: f64,
    pub palette_spread: f64,
    pub shape_kind: ShapeKind,
    pub shape_count: f64,
    pub shape_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    /// 1-based category index, contiguous and increasing over the file.
    pub category: usize,
    pub held_out: bool,
    /// Present for synthetic data, empty for ingested images.
    pub params: Option<MovementParams>,
}

#[derive(Debug, Clone)]
pub struct MovementManifest {
    pub root: PathBuf,
    pub side: usize,
    pub records: Vec<ManifestRecord>,
}

impl MovementManifest {
    pub fn categories(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.records.iter().map(|r| r.category).collect();
        ks.dedup();
        ks
    }

    pub fn category_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.category).or_insert(0) += 1;
        }
        m
    }

    pub fn train_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.held_out)
    }

    pub fn held_out_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.held_out)
    }

    pub fn abs_path(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    /// Structural invariants: contiguous 1-based categories, at least two
    /// records per category.
    pub fn check_structure(&self) -> Result<()> {
        let counts = self.category_counts();
        for (i, (k, n)) in counts.iter().enumerate() {
            if *k != i + 1 {
                return Err(DataError::Invalid(format!(
                    "categories must be contiguous starting at 1, found {k} at position {i}"
                )));
            }
            if *n < 2 {
                return Err(DataError::Invalid(format!("category {k} has {n} < 2 records")));
            }
        }
        Ok(())
    }

    /// Full validation: structure plus every referenced file decoding to
    /// side x side RGB.
    pub fn validate_files(&self) -> Result<()> {
        self.check_structure()?;
        for r in &self.records {
            let p = self.abs_path(r);
            let img = image::open(&p)
                .map_err(|e| DataError::Image { path: p.clone(), msg: e.to_string() })?;
            let rgb = img.to_rgb8();
            if rgb.width() as usize != self.side || rgb.height() as usize != self.side {
                return Err(DataError::Image {
                    path: p,
                    msg: format!(
                        "expected {0}x{0}, got {1}x{2}",
                        self.side,
                        rgb.width(),
                        rgb.height()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Write as CSV with header `path,category,held_out,param_json`, after
    /// `# key=value` comment lines (at least `# side=S`).
    pub fn save(&self, path: &Path, extra_comments: &[String]) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# side={}\n", self.side));
        for line in extra_comments {
            out.push_str(&format!("# {line}\n"));
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(["path", "category", "held_out", "param_json"])
            .map_err(|e| DataError::Invalid(format!("csv: {e}")))?;
        for r in &self.records {
            let pj = match &r.params {
                Some(p) => serde_json::to_string(p)
                    .map_err(|e| DataError::Invalid(format!("param json: {e}")))?,
                None => String::new(),
            };
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.category.to_string(),
                if r.held_out { "1" } else { "0" },
                &pj,
            ])
            .map_err(|e| DataError::Invalid(format!("csv: {e}")))?;
        }
        let body = w.into_inner().map_err(|e| DataError::Invalid(format!("csv: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(out.as_bytes()).map_err(io_err(path))?;
        f.write_all(&body).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        let reader = std::io::BufReader::new(f);
        let mut side = None;
        let mut body = String::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("side=") {
                    side = Some(v.trim().parse::<usize>().map_err(|e| DataError::Parse {
                        line: i + 1,
                        msg: format!("bad side: {e}"),
                    })?);
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let side = side.ok_or_else(|| DataError::Parse {
            line: 0,
            msg: "missing `# side=` header".into(),
        })?;
        let mut rd = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let mut records = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Parse { line: i + 2, msg: e.to_string() })?;
            if rec.len() != 4 {
                return Err(DataError::Parse {
                    line: i + 2,
                    msg: format!("expected 4 fields, got {}", rec.len()),
                });
            }
            let params = if rec[3].is_empty() {
                None
            } else {
                Some(serde_json::from_str(&rec[3]).map_err(|e| DataError::Parse {
                    line: i + 2,
                    msg: format!("bad param_json: {e}"),
                })?)
            };
            records.push(ManifestRecord {
                path: PathBuf::from(&rec[0]),
                category: rec[1].parse().map_err(|e| DataError::Parse {
                    line: i + 2,
                    msg: format!("bad category: {e}"),
                })?,
                held_out: &rec[2] == "1",
                params,
            });
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Self { root, side, records })
    }
}

/// Decode one image file to CHW float32 in [-1, 1].
pub fn load_image_pm1(path: &Path, side: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != side || rgb.height() as usize != side {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected {0}x{0}", side),
        });
    }
    let mut out = vec![0.0f32; 3 * side * side];
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                out[c * side * side + y * side + x] = px.0[c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Quantize one CHW float image in [-1, 1] to an 8-bit RGB image.
pub fn image_from_pm1(data: &[f32], side: usize) -> image::RgbImage {
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let px = [0, 1, 2].map(|c| {
                let v = (data[c * side * side + y * side + x] + 1.0) / 2.0;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = MovementManifest {
            root: dir.path().to_path_buf(),
            side: 16,
            records: vec![
                ManifestRecord {
                    path: PathBuf::from("a/x.png"),
                    category: 1,
                    held_out: false,
                    params: Some(MovementParams {
                        hue: 0.25,
                        texture_freq: 3.0,
                        palette_spread: 0.1,
                        shape_kind: ShapeKind::Bar,
                        shape_count: 4.0,
                        shape_scale: 0.3,
                    }),
                },
                ManifestRecord {
                    path: PathBuf::from("a/y.png"),
                    category: 1,
                    held_out: true,
                    params: None,
                },
            ],
        };
        let p = dir.path().join("manifest.csv");
        m.save(&p, &["config_hash=deadbeef".into()]).unwrap();
        let back = MovementManifest::load(&p).unwrap();
        assert_eq!(back.side, 16);
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[0].category, 1);
        assert!(back.records[1].held_out);
        assert_eq!(back.records[0].params.as_ref().unwrap().hue, 0.25);
        assert!(back.records[1].params.is_none());
    }

    #[test]
    fn structure_check_rejects_singletons_and_gaps() {
        let rec = |k: usize| ManifestRecord {
            path: PathBuf::from(format!("{k}.png")),
            category: k,
            held_out: false,
            params: None,
        };
        let m = MovementManifest {
            root: PathBuf::new(),
            side: 16,
            records: vec![rec(1), rec(1), rec(3), rec(3)],
        };
        assert!(m.check_structure().is_err());
        let m2 = MovementManifest {
            root: PathBuf::new(),
            side: 16,
            records: vec![rec(1), rec(1), rec(2)],
        };
        let err = m2.check_structure().unwrap_err().to_string();
        assert!(err.contains("category 2"), "{err}");
    }

    #[test]
    fn pm1_roundtrip_black_is_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        image::RgbImage::new(16, 16).save(&p).unwrap();
        let v = load_image_pm1(&p, 16).unwrap();
        assert!(v.iter().all(|&x| x == -1.0));
    }
}
