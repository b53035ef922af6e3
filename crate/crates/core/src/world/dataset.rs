//! Dataset generation and loading.
//!
//! A dataset directory holds `%06d.pgm` grayscale images, a `factors.csv`
//! table with the generating factors and exogenous noise per sample, and a
//! `manifest.json` describing the world. Generation is bit-deterministic in
//! the seed: each sample draws from its own derived stream, so the corpus is
//! reproducible and order-independent.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CdlError, Result};
use crate::rng::stream;
use crate::world::render::render;
use crate::world::scm::{pendulum_world, toy_bars_world, GroundTruthScm, SampleRecord};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub world_id: String,
    pub node_count: usize,
    pub image_size: usize,
    pub noise_scale: f64,
    pub count: usize,
    pub seed: u64,
}

/// In-memory dataset: flat images in `[0,1]` plus factor/noise rows.
pub struct Dataset {
    pub meta: DatasetMeta,
    pub images: Vec<Vec<f64>>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Reconstructs the generating world (ranges, graph, noise scale).
    pub fn world(&self) -> Result<GroundTruthScm> {
        world_by_id(&self.meta.world_id, self.meta.noise_scale)
    }
}

pub fn world_by_id(world_id: &str, noise_scale: f64) -> Result<GroundTruthScm> {
    match world_id {
        "pendulum" => pendulum_world(noise_scale),
        "toy-bars" => toy_bars_world(noise_scale),
        other => Err(CdlError::Config(format!("unknown world '{other}'"))),
    }
}

/// Writes a grayscale image (values in `[0,1]`) as a binary 8-bit PGM.
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CdlError::Shape(format!(
            "pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary 8-bit PGM back into `[0,1]` floats.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CdlError::Format("pgm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token(&raw)? != "P5" {
        return Err(CdlError::Format("pgm: expected binary P5 magic".into()));
    }
    let width: usize = token(&raw)?
        .parse()
        .map_err(|_| CdlError::Format("pgm: bad width".into()))?;
    let height: usize = token(&raw)?
        .parse()
        .map_err(|_| CdlError::Format("pgm: bad height".into()))?;
    let maxval: usize = token(&raw)?
        .parse()
        .map_err(|_| CdlError::Format("pgm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(CdlError::Format(format!("pgm: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    if raw.len() < pos + need {
        return Err(CdlError::Format(format!(
            "pgm: raster has {} bytes, need {need}",
            raw.len().saturating_sub(pos)
        )));
    }
    let pixels = raw[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, width, height))
}

fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.pgm"))
}

/// Generates `count` samples into `dir` (created if absent). Returns the
/// dataset it wrote. Byte-identical across runs with the same arguments.
pub fn generate_dataset(
    dir: &Path,
    world_id: &str,
    count: usize,
    image_size: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    let world = world_by_id(world_id, noise_scale)?;
    fs::create_dir_all(dir)?;
    let d = world.node_count();

    let meta = DatasetMeta {
        world_id: world_id.to_string(),
        node_count: d,
        image_size,
        noise_scale,
        count,
        seed,
    };
    let manifest = serde_json::to_string_pretty(&meta)
        .map_err(|e| CdlError::Format(format!("manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), manifest)?;

    let mut csv = csv::Writer::from_path(dir.join("factors.csv"))
        .map_err(|e| CdlError::Format(format!("factors.csv: {e}")))?;
    let mut header = vec!["index".to_string()];
    header.extend((1..=d).map(|i| format!("z{i}")));
    header.extend((1..=d).map(|i| format!("xi{i}")));
    csv.write_record(&header)
        .map_err(|e| CdlError::Format(format!("factors.csv: {e}")))?;

    let mut images = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(seed, "sample", i as u64);
        let record = world.sample(&mut rng)?;
        let pixels = render(&world, &record.factors, image_size)?;
        write_pgm(&image_path(dir, i), &pixels, image_size, image_size)?;

        let mut row = vec![i.to_string()];
        // `{}` on f64 prints the shortest string that parses back exactly.
        row.extend(record.factors.iter().map(|v| format!("{v}")));
        row.extend(record.noise.iter().map(|v| format!("{v}")));
        csv.write_record(&row)
            .map_err(|e| CdlError::Format(format!("factors.csv: {e}")))?;

        images.push(pixels);
        records.push(record);
    }
    csv.flush()?;
    Ok(Dataset { meta, images, records })
}

/// Loads a dataset directory produced by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(dir.join("manifest.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&manifest)
        .map_err(|e| CdlError::Format(format!("manifest: {e}")))?;
    let d = meta.node_count;

    let mut reader = csv::Reader::from_path(dir.join("factors.csv"))
        .map_err(|e| CdlError::Format(format!("factors.csv: {e}")))?;
    let mut records = Vec::with_capacity(meta.count);
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CdlError::Format(format!("factors.csv: {e}")))?;
        if row.len() != 1 + 2 * d {
            return Err(CdlError::Format(format!(
                "factors.csv row {i}: {} fields, expected {}",
                row.len(),
                1 + 2 * d
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CdlError::Format(format!("factors.csv row {i}: bad float '{s}'")))
        };
        let factors: Vec<f64> = row.iter().skip(1).take(d).map(parse).collect::<Result<_>>()?;
        let noise: Vec<f64> = row.iter().skip(1 + d).map(parse).collect::<Result<_>>()?;
        records.push(SampleRecord { factors, noise });
    }
    if records.len() != meta.count {
        return Err(CdlError::Format(format!(
            "dataset holds {} rows, manifest says {}",
            records.len(),
            meta.count
        )));
    }

    let mut images = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let (pixels, w, h) = read_pgm(&image_path(dir, i))?;
        if w != meta.image_size || h != meta.image_size {
            return Err(CdlError::Format(format!(
                "image {i} is {w}x{h}, manifest says {0}x{0}",
                meta.image_size
            )));
        }
        images.push(pixels);
    }
    Ok(Dataset { meta, images, records })
}
