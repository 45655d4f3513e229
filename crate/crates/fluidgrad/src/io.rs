//! On-disk formats: per-frame particle dumps (CSV or binary), dataset and
//! run manifests, and the CSV writers used for optimizer traces, step
//! diagnostics, and control logs.
//!
//! Floats in CSV files are written with Rust's shortest round-trip
//! formatting, so text dumps parse back to bit-identical values. Binary
//! dumps are little-endian: u32 particle count, then per particle the seven
//! f64 values x, y, z, vx, vy, vz, m.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pbf::StepDiagnostics;
use crate::state::{FluidParams, ParticleState};
use crate::Error;

/// Header line of every particle CSV dump.
pub const FRAME_CSV_HEADER: &str = "x,y,z,vx,vy,vz,m";
/// File name of the run manifest inside an output directory.
pub const MANIFEST_FILE: &str = "manifest.json";
/// File name of the dataset manifest inside a dataset directory.
pub const DATASET_MANIFEST_FILE: &str = "dataset.json";

/// Particle dump encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    Csv,
    Bin,
}

impl DumpFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DumpFormat::Csv => "csv",
            DumpFormat::Bin => "bin",
        }
    }
}

impl FromStr for DumpFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "csv" => Ok(DumpFormat::Csv),
            "bin" => Ok(DumpFormat::Bin),
            other => Err(Error::invalid(format!("unknown dump format {other:?}, expected csv or bin"))),
        }
    }
}

impl std::fmt::Display for DumpFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.extension())
    }
}

/// Name of the dump file for a frame index, e.g. `frame_000042.csv`.
pub fn frame_file_name(frame: usize, format: DumpFormat) -> String {
    format!("frame_{frame:06}.{}", format.extension())
}

/// Write one frame into `dir` under its standard name; returns the path.
pub fn write_frame(dir: &Path, frame: usize, state: &ParticleState, format: DumpFormat) -> Result<PathBuf, Error> {
    let path = dir.join(frame_file_name(frame, format));
    match format {
        DumpFormat::Csv => write_frame_csv(&path, state)?,
        DumpFormat::Bin => write_frame_bin(&path, state)?,
    }
    Ok(path)
}

/// Read a frame dump, dispatching on the file extension.
pub fn read_frame(path: &Path) -> Result<ParticleState, Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_frame_csv(path),
        Some("bin") => read_frame_bin(path),
        _ => Err(Error::invalid(format!(
            "cannot infer dump format of {} (expected .csv or .bin)",
            path.display()
        ))),
    }
}

/// Write a particle dump as CSV with header [`FRAME_CSV_HEADER`].
pub fn write_frame_csv(path: &Path, state: &ParticleState) -> Result<(), Error> {
    state.validate()?;
    let mut text = String::with_capacity(32 * state.len() + FRAME_CSV_HEADER.len() + 1);
    text.push_str(FRAME_CSV_HEADER);
    text.push('\n');
    for i in 0..state.len() {
        let p = state.positions[i];
        let v = state.velocities[i];
        let _ = writeln!(text, "{},{},{},{},{},{},{}", p.x, p.y, p.z, v.x, v.y, v.z, state.masses[i]);
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Read a particle dump written by [`write_frame_csv`].
pub fn read_frame_csv(path: &Path) -> Result<ParticleState, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim_end) {
        Some(FRAME_CSV_HEADER) => {}
        got => {
            return Err(Error::format(format!(
                "{} line 1: expected header {FRAME_CSV_HEADER:?}, found {got:?}",
                path.display()
            )))
        }
    }
    let mut state = ParticleState::new();
    for (lineno, line) in lines.enumerate().map(|(i, l)| (i + 2, l.trim_end())) {
        if line.is_empty() {
            continue;
        }
        let mut fields = [0.0f64; 7];
        let mut count = 0;
        for (k, field) in line.split(',').enumerate() {
            if k >= 7 {
                count = k + 1;
                break;
            }
            fields[k] = field.parse().map_err(|e| {
                Error::format(format!("{} line {lineno}: bad float {field:?}: {e}", path.display()))
            })?;
            count = k + 1;
        }
        if count != 7 {
            return Err(Error::format(format!(
                "{} line {lineno}: expected 7 fields, found {count}",
                path.display()
            )));
        }
        state.positions.push(Vector3::new(fields[0], fields[1], fields[2]));
        state.velocities.push(Vector3::new(fields[3], fields[4], fields[5]));
        state.masses.push(fields[6]);
    }
    state.validate()?;
    Ok(state)
}

/// Write a particle dump as binary: u32 N (little-endian), then N records of
/// seven f64 little-endian values x, y, z, vx, vy, vz, m.
pub fn write_frame_bin(path: &Path, state: &ParticleState) -> Result<(), Error> {
    state.validate()?;
    let mut buf = Vec::with_capacity(4 + state.len() * 56);
    buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for i in 0..state.len() {
        for &x in state.positions[i].iter().chain(state.velocities[i].iter()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&state.masses[i].to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Read a particle dump written by [`write_frame_bin`].
pub fn read_frame_bin(path: &Path) -> Result<ParticleState, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    if bytes.len() < 4 {
        return Err(Error::format(format!("{}: truncated header", path.display())));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let expected = 4 + n * 56;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {n} particles, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut state = ParticleState::new();
    let mut vals = [0.0f64; 7];
    for rec in bytes[4..].chunks_exact(56) {
        for (k, chunk) in rec.chunks_exact(8).enumerate() {
            vals[k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        state.positions.push(Vector3::new(vals[0], vals[1], vals[2]));
        state.velocities.push(Vector3::new(vals[3], vals[4], vals[5]));
        state.masses.push(vals[6]);
    }
    state.validate()?;
    Ok(state)
}

/// List the frame dumps in a directory in frame order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && (n.ends_with(".csv") || n.ends_with(".bin")))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Describes a recorded trajectory directory: the frame dumps plus the
/// ground-truth parameters and scene that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Frames per second of the recording (1/dt).
    pub frame_rate: f64,
    /// Number of frame dumps.
    pub frames: usize,
    /// Dump encoding.
    pub format: DumpFormat,
    /// Parameters the trajectory was generated with.
    pub params: FluidParams,
    /// Scene file the trajectory was generated from.
    pub scene: String,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(DATASET_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(DATASET_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Provenance record written into every output directory: everything needed
/// to reproduce the run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Engine crate version that produced the outputs.
    pub engine_version: String,
    /// Command that ran, e.g. "simulate".
    pub command: String,
    /// Scene file path as given.
    pub scene_file: String,
    /// SHA-256 of the scene file contents, hex.
    pub scene_hash: String,
    /// Full resolved configuration after defaults and flag overrides.
    pub config: serde_json::Value,
    /// RNG seed used for any stochastic choices.
    pub seed: u64,
    /// Output directory layout: logical name to relative path/pattern.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, scene_file: &str, scene_hash: String, config: serde_json::Value, seed: u64) -> Self {
        Self {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            scene_file: scene_file.to_string(),
            scene_hash,
            config,
            seed,
            outputs: BTreeMap::new(),
        }
    }

    /// Register an output in the directory layout.
    pub fn output(mut self, name: &str, relative: &str) -> Self {
        self.outputs.insert(name.to_string(), relative.to_string());
        self
    }

    /// Write the manifest as `manifest.json` in `dir`, replacing any
    /// previous one so the directory holds exactly one manifest.
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 of a file's contents as lowercase hex.
pub fn sha256_hex_file(path: &Path) -> Result<String, Error> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Incremental CSV writer with a fixed column set; used for optimizer
/// traces (`iteration,<params...>,loss`), per-step diagnostics, and control
/// logs. Rows are written as given, floats in round-trip formatting.
pub struct CsvWriter {
    out: BufWriter<std::fs::File>,
    path: PathBuf,
    columns: usize,
}

impl CsvWriter {
    /// Create the file and write the header row.
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, Error> {
        if header.is_empty() {
            return Err(Error::invalid("csv header must not be empty"));
        }
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}: {e}", path.display())))?;
        let mut w = Self { out: BufWriter::new(file), path: path.to_path_buf(), columns: header.len() };
        w.write_line(&header.join(","))?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<(), Error> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(format!("writing {}: {e}", self.path.display())))
    }

    /// Write one row; the leading integer column (frame or iteration index)
    /// is followed by float cells.
    pub fn row(&mut self, index: usize, values: &[f64]) -> Result<(), Error> {
        if 1 + values.len() != self.columns {
            return Err(Error::invalid(format!(
                "csv row has {} cells, header declared {}",
                1 + values.len(),
                self.columns
            )));
        }
        let mut line = String::with_capacity(16 * self.columns);
        let _ = write!(line, "{index}");
        for v in values {
            let _ = write!(line, ",{v}");
        }
        self.write_line(&line)
    }

    /// Flush buffered rows to disk.
    pub fn finish(mut self) -> Result<(), Error> {
        self.out
            .flush()
            .map_err(|e| Error::io(format!("flushing {}: {e}", self.path.display())))
    }
}

/// Column order of the per-step diagnostics CSV.
pub const DIAGNOSTICS_HEADER: [&str; 9] = [
    "frame",
    "max_density_overshoot",
    "max_penetration",
    "max_pressure_correction",
    "max_cohesion_correction",
    "max_surface_correction",
    "max_viscosity_delta",
    "momentum_residual",
    "degenerate_normals",
];

/// Open the diagnostics CSV for an output directory.
pub fn diagnostics_writer(path: &Path) -> Result<CsvWriter, Error> {
    CsvWriter::create(path, &DIAGNOSTICS_HEADER)
}

/// Append one step's diagnostics.
pub fn write_diagnostics_row(w: &mut CsvWriter, frame: usize, d: &StepDiagnostics) -> Result<(), Error> {
    w.row(
        frame,
        &[
            d.max_density_overshoot,
            d.max_penetration,
            d.max_pressure_correction,
            d.max_cohesion_correction,
            d.max_surface_correction,
            d.max_viscosity_delta,
            d.momentum_residual,
            d.degenerate_normals as f64,
        ],
    )
}

/// Parse a CSV of one leading integer column plus float columns, as written
/// by [`CsvWriter`]; returns (header, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<f64>)>), Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file", path.display())))?
        .trim_end()
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate().map(|(i, l)| (i + 2, l.trim_end())) {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let index: usize = cells
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|e| Error::format(format!("{} line {lineno}: bad index: {e}", path.display())))?;
        let values: Result<Vec<f64>, Error> = cells
            .map(|c| {
                c.parse::<f64>().map_err(|e| {
                    Error::format(format!("{} line {lineno}: bad float {c:?}: {e}", path.display()))
                })
            })
            .collect();
        let values = values?;
        if 1 + values.len() != header.len() {
            return Err(Error::format(format!(
                "{} line {lineno}: expected {} cells, found {}",
                path.display(),
                header.len(),
                1 + values.len()
            )));
        }
        rows.push((index, values));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::fill_box;

    fn sample_state() -> ParticleState {
        let mut s = fill_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.1, 0.1, 0.1), 0.05, 0.1).unwrap();
        // Awkward values that stress round-trip formatting.
        s.positions[0] = Vector3::new(0.1, -1.0 / 3.0, 1e-300);
        s.velocities[1] = Vector3::new(f64::MIN_POSITIVE, -2.5e17, 0.30000000000000004);
        s.masses[2] = 0.1 + 1e-17;
        s
    }

    #[test]
    fn csv_dump_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let state = sample_state();
        let path = write_frame(dir.path(), 42, &state, DumpFormat::Csv).unwrap();
        assert_eq!(path.file_name().unwrap(), "frame_000042.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,z,vx,vy,vz,m\n"));
        let back = read_frame(&path).unwrap();
        assert_eq!(back.positions, state.positions);
        assert_eq!(back.velocities, state.velocities);
        assert_eq!(back.masses, state.masses);
    }

    #[test]
    fn bin_dump_round_trips_and_validates_length() {
        let dir = tempfile::tempdir().unwrap();
        let state = sample_state();
        let path = write_frame(dir.path(), 7, &state, DumpFormat::Bin).unwrap();
        assert_eq!(path.file_name().unwrap(), "frame_000007.bin");
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 56 * state.len() as u64);
        let back = read_frame(&path).unwrap();
        assert_eq!(back.positions, state.positions);
        assert_eq!(back.velocities, state.velocities);
        assert_eq!(back.masses, state.masses);

        // Truncation is a format error.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert_eq!(read_frame(&path).unwrap_err().kind(), crate::ErrorKind::Format);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_000000.csv");

        std::fs::write(&path, "a,b,c\n").unwrap();
        let err = read_frame_csv(&path).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Format);
        assert!(err.to_string().contains("line 1"), "{err}");

        std::fs::write(&path, "x,y,z,vx,vy,vz,m\n0,0,0,0,0,0,0.1\n1,2,oops,0,0,0,0.1\n").unwrap();
        let err = read_frame_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        std::fs::write(&path, "x,y,z,vx,vy,vz,m\n1,2,3\n").unwrap();
        let err = read_frame_csv(&path).unwrap_err();
        assert!(err.to_string().contains("expected 7 fields"), "{err}");
    }

    #[test]
    fn frame_listing_sorts_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let state = ParticleState::from_positions(vec![Vector3::zeros()], 0.1);
        for frame in [3usize, 0, 11] {
            write_frame(dir.path(), frame, &state, DumpFormat::Csv).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let frames = list_frames(dir.path()).unwrap();
        let names: Vec<_> = frames.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["frame_000000.csv", "frame_000003.csv", "frame_000011.csv"]);
    }

    #[test]
    fn dataset_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            frame_rate: 60.0,
            frames: 620,
            format: DumpFormat::Bin,
            params: FluidParams::default(),
            scene: "scenes/ladle.json".into(),
        };
        manifest.save(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back.frame_rate, manifest.frame_rate);
        assert_eq!(back.frames, manifest.frames);
        assert_eq!(back.format, manifest.format);
        assert_eq!(back.params, manifest.params);
        assert_eq!(back.scene, manifest.scene);
    }

    #[test]
    fn run_manifest_is_single_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("scene.json");
        std::fs::write(&scene, b"{\"duration\": 1.0}").unwrap();
        let hash = sha256_hex_file(&scene).unwrap();
        assert_eq!(hash.len(), 64);
        assert_eq!(hash, sha256_hex_file(&scene).unwrap());

        let manifest = RunManifest::new(
            "simulate",
            scene.to_str().unwrap(),
            hash,
            serde_json::json!({"frames": 60, "format": "csv"}),
            17,
        )
        .output("frames", "frame_%06d.csv")
        .output("diagnostics", "diagnostics.csv");
        manifest.save(dir.path()).unwrap();
        // Saving again replaces the file: still exactly one manifest.
        manifest.save(dir.path()).unwrap();
        let manifests: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name() == MANIFEST_FILE)
            .collect();
        assert_eq!(manifests.len(), 1);
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.engine_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn csv_writer_round_trips_with_exact_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let mut w = CsvWriter::create(&path, &["iteration", "lambda_cohesion", "loss"]).unwrap();
        w.row(0, &[0.1, 1.0 / 3.0]).unwrap();
        w.row(1, &[0.1 - 1e-18, 0.3333333]).unwrap();
        assert!(w.row(2, &[1.0]).is_err(), "wrong arity must be rejected");
        w.row(2, &[2e-308, 0.0]).unwrap();
        w.finish().unwrap();

        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, ["iteration", "lambda_cohesion", "loss"]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], (0, vec![0.1, 1.0 / 3.0]));
        assert_eq!(rows[1], (1, vec![0.1 - 1e-18, 0.3333333]));
        assert_eq!(rows[2], (2, vec![2e-308, 0.0]));
    }

    #[test]
    fn diagnostics_csv_has_stable_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diagnostics.csv");
        let mut w = diagnostics_writer(&path).unwrap();
        let d = StepDiagnostics {
            max_density_overshoot: 1.5,
            max_penetration: 0.0,
            max_pressure_correction: 1e-3,
            max_cohesion_correction: 2e-4,
            max_surface_correction: 0.0,
            max_viscosity_delta: 0.25,
            momentum_residual: 1e-16,
            degenerate_normals: 3,
        };
        write_diagnostics_row(&mut w, 0, &d).unwrap();
        w.finish().unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, DIAGNOSTICS_HEADER);
        assert_eq!(rows[0].0, 0);
        assert_eq!(rows[0].1[7], 3.0);
    }
}
