//! Output directory bookkeeping and the file formats the CLI reads and writes.

use std::fs;
use std::path::{Path, PathBuf};

use kerrvapor_core::Interferogram;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header written next to every raw array as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Slowest-varying axis first.
    pub shape: Vec<usize>,
    /// Always "<f8" (little-endian f64).
    pub dtype: String,
    pub units: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory, '/' separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A run directory that remembers every file written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|source| CliError::Output {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let err = |source| CliError::Output {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        fs::write(&path, bytes).map_err(err)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(OutputFile {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf> {
        self.write(rel, &csv_bytes(header, rows)?)
    }

    /// Raw little-endian f64 array `<rel>.f64` with its sidecar `<rel>.json`.
    pub fn write_array(
        &mut self,
        rel: &str,
        data: &[f64],
        shape: &[usize],
        units: &str,
        metadata: serde_json::Value,
    ) -> Result<PathBuf> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CliError::Numeric(format!("array {rel}: shape {shape:?} does not match {} values", data.len())));
        }
        let sidecar = Sidecar {
            shape: shape.to_vec(),
            dtype: "<f8".into(),
            units: units.into(),
            metadata,
        };
        self.write_json(&format!("{rel}.json"), &sidecar)?;
        self.write(&format!("{rel}.f64"), &f64_bytes(data))
    }
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let num = |e: csv::Error| CliError::Numeric(e.to_string());
    w.write_record(header).map_err(num)?;
    for row in rows {
        // `{:e}` round-trips exactly and keeps files byte-stable
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(num)?;
    }
    w.into_inner().map_err(|e| CliError::Numeric(e.to_string()))
}

pub fn f64_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

fn bad_input(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {msg}", path.display()))
}

/// Reads `<stem>.f64` and its sidecar `<stem>.json`. `path` may name either file.
pub fn read_array(path: &Path) -> Result<(Vec<f64>, Sidecar)> {
    let raw = path.with_extension("f64");
    let side = path.with_extension("json");
    let sidecar: Sidecar = serde_json::from_slice(&read_bytes(&side)?).map_err(|e| bad_input(&side, e))?;
    if sidecar.dtype != "<f8" {
        return Err(bad_input(&side, format!("unsupported dtype {}", sidecar.dtype)));
    }
    let bytes = read_bytes(&raw)?;
    if bytes.len() != 8 * sidecar.shape.iter().product::<usize>() {
        return Err(bad_input(&raw, format!("size does not match shape {:?}", sidecar.shape)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((data, sidecar))
}

/// Reads a numeric CSV with a header row.
pub fn read_csv(path: &Path, min_columns: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bytes = read_bytes(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad_input(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < min_columns {
        return Err(bad_input(path, format!("expected at least {min_columns} columns")));
    }
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad_input(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad_input(path, format!("row {}: {e}", k + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Encodes a frame as a 16-bit greyscale PNG scaled by `scale` (counts per unit).
pub fn png_bytes(frame: &Interferogram, scale: f64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(|e| CliError::Numeric(e.to_string()))?;
        let data: Vec<u8> = frame
            .pixels
            .iter()
            .flat_map(|&p| ((p * scale).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
            .collect();
        w.write_image_data(&data).map_err(|e| CliError::Numeric(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8- or 16-bit greyscale PNG into raw counts.
pub fn read_png(path: &Path) -> Result<Interferogram> {
    let bytes = read_bytes(path)?;
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| bad_input(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad_input(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad_input(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad_input(path, "only greyscale frames are supported"));
    }
    let data = &buf[..info.buffer_size()];
    let pixels: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => data.iter().map(|&b| b as f64).collect(),
        png::BitDepth::Sixteen => data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect(),
        d => return Err(bad_input(path, format!("unsupported bit depth {d:?}"))),
    };
    Interferogram::new(info.width as usize, info.height as usize, pixels, 1.0).map_err(|e| bad_input(path, e))
}

/// Reads a frame from a PNG or a raw `.f64` array with a 2-D sidecar.
pub fn read_frame(path: &Path) -> Result<Interferogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("f64") | Some("json") => {
            let (data, side) = read_array(path)?;
            let [h, w] = side.shape[..] else {
                return Err(bad_input(path, "frame arrays must be 2-D"));
            };
            Interferogram::new(w, h, data, 1.0).map_err(|e| bad_input(path, e))
        }
        _ => Err(bad_input(path, "frames must be .png or .f64")),
    }
}

/// Frame files in `path` (a file or a directory), sorted by name.
pub fn frame_paths(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png") | Some("f64")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(bad_input(path, "no .png or .f64 frames found"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        let data: Vec<f64> = (0..6).map(|k| k as f64 * 0.1 - 0.2).collect();
        out.write_array("maps/a", &data, &[2, 3], "rad", serde_json::json!({"k": 1})).unwrap();
        let (back, side) = read_array(&dir.path().join("maps/a.f64")).unwrap();
        assert_eq!(back, data);
        assert_eq!(side.shape, vec![2, 3]);
        assert_eq!(out.files().len(), 2);
        assert_eq!(out.files()[1].sha256, sha256_hex(&f64_bytes(&data)));
        assert!(read_array(&dir.path().join("missing.f64")).is_err());
    }

    #[test]
    fn png_round_trip() {
        let px: Vec<f64> = (0..20).map(|k| (k * 3000) as f64).collect();
        let f = Interferogram::new(5, 4, px.clone(), 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        fs::write(&p, png_bytes(&f, 1.0).unwrap()).unwrap();
        let back = read_frame(&p).unwrap();
        assert_eq!((back.width, back.height), (5, 4));
        assert_eq!(back.pixels, px);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        let rows = vec![vec![1.0, -2.5e-7], vec![0.1, 3.0]];
        out.write_csv("t.csv", &["x", "y"], &rows).unwrap();
        let (h, back) = read_csv(&dir.path().join("t.csv"), 2).unwrap();
        assert_eq!(h, vec!["x", "y"]);
        assert_eq!(back, rows);
    }
}
