//! On-disk formats.
//!
//! # Binary container
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"GAUSSIFY"
//! 8       4     format version, u32 little-endian
//! 12      8     metadata length m in bytes, u64 little-endian
//! 20      m     metadata, UTF-8 JSON (see [`ContainerMeta`])
//! 20+m    ...   value blocks in metadata order, each rows × cols
//!               little-endian f64 in row-major order
//! ```
//!
//! # Text tables
//!
//! Tab-separated, one header line naming the columns, preceded by any number
//! of `# key: value` comment lines carrying metadata. Floats are written in
//! the shortest form that parses back to the same bit pattern.
//!
//! # Ingest tables
//!
//! One shot per row, one pixel per column, raw wrapped phases in rad.
//! Columns may be separated by tabs, commas or spaces. Blank lines and lines
//! starting with `#` are skipped. Every row must have the same number of
//! finite entries.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Propagators, QuadratureCovariance};
use crate::error::{Error, Result};
use crate::model::Geometry;
use crate::sampler::{FieldEnsemble, Provenance};
use crate::tomography::ReconstructionResult;

pub const MAGIC: &[u8; 8] = b"GAUSSIFY";
pub const FORMAT_VERSION: u32 = 1;

/// Shape of one value block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON metadata block of a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    /// `ensemble`, `propagators` or `reconstruction`.
    pub kind: String,
    pub blocks: Vec<BlockInfo>,
    #[serde(default)]
    pub attributes: BTreeMap<String, serde_json::Value>,
}

/// Metadata plus named matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: ContainerMeta,
    pub blocks: Vec<Array2<f64>>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { meta: ContainerMeta { kind: kind.into(), blocks: Vec::new(), attributes: BTreeMap::new() }, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: &str, block: Array2<f64>) {
        self.meta.blocks.push(BlockInfo { name: name.into(), rows: block.nrows(), cols: block.ncols() });
        self.blocks.push(block);
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::InvalidArgument(format!("attribute {key}: {e}")))?;
        self.meta.attributes.insert(key.into(), v);
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<&Array2<f64>> {
        self.meta.blocks.iter().position(|b| b.name == name).map(|i| &self.blocks[i])
    }

    fn attribute<T: for<'de> Deserialize<'de>>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.meta.attributes.get(key).ok_or_else(|| format_err(path, format!("missing attribute `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| format_err(path, format!("attribute `{key}`: {e}")))
    }

    fn required(&self, name: &str, path: &Path) -> Result<&Array2<f64>> {
        self.block(name).ok_or_else(|| format_err(path, format!("missing block `{name}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        for b in &self.blocks {
            for row in b.rows() {
                for &v in row {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| format_err(path, "file too short for header"))?;
        if &magic != MAGIC {
            return Err(format_err(path, "bad magic bytes"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| format_err(path, "truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, format!("unsupported format version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| format_err(path, "truncated header"))?;
        let mut meta = vec![0u8; usize::try_from(len).map_err(|_| format_err(path, "metadata too large"))?];
        r.read_exact(&mut meta).map_err(|_| format_err(path, "truncated metadata"))?;
        let meta: ContainerMeta =
            serde_json::from_slice(&meta).map_err(|e| format_err(path, format!("metadata: {e}")))?;
        let mut blocks = Vec::with_capacity(meta.blocks.len());
        for info in &meta.blocks {
            let mut values = vec![0.0; info.rows * info.cols];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(|_| format_err(path, format!("block `{}` is truncated", info.name)))?;
            blocks.push(
                Array2::from_shape_vec((info.rows, info.cols), values).map_err(|e| format_err(path, e.to_string()))?,
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err(path, "trailing bytes after the last block"));
        }
        Ok(Self { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, path)
    }
}

pub fn ensemble_container(ens: &FieldEnsemble) -> Result<Container> {
    let mut c = Container::new("ensemble");
    c.set("geometry", &ens.geometry)?;
    c.set("time", &ens.time)?;
    c.set("seed", &ens.seed)?;
    c.set("provenance", &ens.provenance)?;
    c.set("modes", &ens.modes)?;
    c.push("phase", ens.phase.clone());
    c.push("density", ens.density.clone());
    Ok(c)
}

pub fn save_ensemble(ens: &FieldEnsemble, path: &Path) -> Result<()> {
    ensemble_container(ens)?.save(path)
}

pub fn load_ensemble(path: &Path) -> Result<FieldEnsemble> {
    let c = Container::load(path)?;
    if c.meta.kind != "ensemble" {
        return Err(format_err(path, format!("expected an ensemble, found `{}`", c.meta.kind)));
    }
    let geometry: Geometry = c.attribute("geometry", path)?;
    let time: f64 = c.attribute("time", path)?;
    let seed: u64 = c.attribute("seed", path)?;
    let provenance: Provenance = c.attribute("provenance", path)?;
    let modes: Option<usize> = c.attribute("modes", path)?;
    let phase = c.required("phase", path)?.clone();
    let density = c.required("density", path)?.clone();
    FieldEnsemble::new(geometry, phase, density, time)
        .map(|e| FieldEnsemble { modes, ..e.with_origin(seed, provenance) })
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn save_propagators(p: &Propagators, geometry: &Geometry, t: f64, path: &Path) -> Result<()> {
    let mut c = Container::new("propagators");
    c.set("geometry", geometry)?;
    c.set("time", &t)?;
    c.push("phase_phase", p.phase_phase.clone());
    c.push("phase_density", p.phase_density.clone());
    c.save(path)
}

pub fn load_propagators(path: &Path) -> Result<(Propagators, Geometry, f64)> {
    let c = Container::load(path)?;
    if c.meta.kind != "propagators" {
        return Err(format_err(path, format!("expected propagators, found `{}`", c.meta.kind)));
    }
    let p = Propagators {
        phase_phase: c.required("phase_phase", path)?.clone(),
        phase_density: c.required("phase_density", path)?.clone(),
    };
    Ok((p, c.attribute("geometry", path)?, c.attribute("time", path)?))
}

pub fn save_reconstruction(r: &ReconstructionResult, path: &Path) -> Result<()> {
    let mut c = Container::new("reconstruction");
    c.set("omega", &r.gamma.omega())?;
    c.set("residual", &r.residual)?;
    c.set("iterations", &r.iterations)?;
    c.set("converged", &r.converged)?;
    c.set("under_rotated", &r.under_rotated)?;
    c.set("warnings", &r.warnings)?;
    c.push("gamma", r.gamma.matrix().clone());
    c.push("cost_log", Array2::from_shape_vec((r.cost_log.len(), 1), r.cost_log.clone()).expect("column shape"));
    c.save(path)
}

/// Reads back the covariance of a saved reconstruction.
pub fn load_reconstruction_covariance(path: &Path) -> Result<QuadratureCovariance> {
    let c = Container::load(path)?;
    if c.meta.kind != "reconstruction" {
        return Err(format_err(path, format!("expected a reconstruction, found `{}`", c.meta.kind)));
    }
    let omega: Vec<f64> = c.attribute("omega", path)?;
    QuadratureCovariance::new(omega, c.required("gamma", path)?.clone()).map_err(|e| format_err(path, e.to_string()))
}

/// Column-oriented text table with `# key: value` metadata lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub metadata: Vec<(String, String)>,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { metadata: Vec::new(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "{}", self.headers.join("\t"))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join("\t"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut table = Table::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# ") {
                if !header_seen {
                    if let Some((k, v)) = rest.split_once(": ") {
                        table.metadata.push((k.into(), v.into()));
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                table.headers = line.split('\t').map(String::from).collect();
                header_seen = true;
                continue;
            }
            let row = line
                .split('\t')
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
            if row.len() != table.headers.len() {
                return Err(format_err(path, format!("line {}: {} cells for {} columns", i + 1, row.len(), table.headers.len())));
            }
            table.rows.push(row);
        }
        if !header_seen {
            return Err(format_err(path, "no header line"));
        }
        Ok(table)
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Text interchange form of an ensemble: one row per (field, shot).
pub fn ensemble_table(ens: &FieldEnsemble) -> Result<Table> {
    let n = ens.n_pixels();
    let mut headers: Vec<String> = vec!["field".into(), "shot".into()];
    headers.extend((0..n).map(|i| format!("z{i}")));
    let geometry = serde_json::to_string(&ens.geometry).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let provenance = serde_json::to_string(&ens.provenance).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut t = Table { metadata: Vec::new(), headers, rows: Vec::new() }
        .meta("kind", "ensemble")
        .meta("geometry", geometry)
        .meta("time", ens.time)
        .meta("seed", ens.seed)
        .meta("provenance", provenance)
        .meta("modes", ens.modes.map_or("none".to_string(), |m| m.to_string()));
    for (field, data) in [(0.0, &ens.phase), (1.0, &ens.density)] {
        for (s, row) in data.rows().into_iter().enumerate() {
            let mut r = vec![field, s as f64];
            r.extend(row.iter());
            t.push(r);
        }
    }
    Ok(t)
}

pub fn ensemble_from_table(t: &Table, path: &Path) -> Result<FieldEnsemble> {
    let meta = |k: &str| t.get_meta(k).ok_or_else(|| format_err(path, format!("missing metadata `{k}`")));
    let geometry: Geometry = serde_json::from_str(meta("geometry")?).map_err(|e| format_err(path, e.to_string()))?;
    let provenance: Provenance =
        serde_json::from_str(meta("provenance")?).map_err(|e| format_err(path, e.to_string()))?;
    let time: f64 = meta("time")?.parse().map_err(|_| format_err(path, "bad time"))?;
    let seed: u64 = meta("seed")?.parse().map_err(|_| format_err(path, "bad seed"))?;
    let modes = match meta("modes")? {
        "none" => None,
        m => Some(m.parse::<usize>().map_err(|_| format_err(path, "bad mode count"))?),
    };
    let n = geometry.n_pixels();
    if t.headers.len() != n + 2 {
        return Err(format_err(path, format!("{} columns for {n} pixels", t.headers.len())));
    }
    let split = |field: f64| -> Vec<f64> {
        t.rows.iter().filter(|r| r[0] == field).flat_map(|r| r[2..].iter().copied()).collect()
    };
    let (phase, density) = (split(0.0), split(1.0));
    let shots = phase.len() / n;
    let to_array =
        |v: Vec<f64>| Array2::from_shape_vec((shots, n), v).map_err(|e| format_err(path, format!("ragged ensemble: {e}")));
    FieldEnsemble::new(geometry, to_array(phase)?, to_array(density)?, time)
        .map(|e| FieldEnsemble { modes, ..e.with_origin(seed, provenance) })
        .map_err(|e| format_err(path, e.to_string()))
}

/// Reads a raw phase table in the ingest layout described in the module docs.
pub fn read_phase_table(path: &Path) -> Result<Array2<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = trimmed
            .split([',', '\t', ' '])
            .filter(|c| !c.is_empty())
            .map(|c| c.parse::<f64>().map_err(|e| format_err(path, format!("line {}: `{c}`: {e}", i + 1))))
            .collect::<Result<_>>()?;
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(format_err(path, format!("line {}: non-finite entry {bad}", i + 1)));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format_err(path, format!("line {}: ragged row with {} entries, expected {w}", i + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let width = width.ok_or_else(|| format_err(path, "no data rows"))?;
    Array2::from_shape_vec((rows, width), values).map_err(|e| format_err(path, e.to_string()))
}

/// SHA-256 of a file as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run, enough to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    /// Command-specific arguments as given.
    pub arguments: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }
}

pub fn digest(path: &Path, relative_to: Option<&Path>) -> Result<FileDigest> {
    let shown = relative_to.and_then(|base| path.strip_prefix(base).ok()).unwrap_or(path);
    Ok(FileDigest { path: shown.display().to_string(), sha256: sha256_file(path)? })
}

pub const LOCK_FILE: &str = ".gaussify.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Creates `dir` if needed and claims it; fails if another writer holds it.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Trap;

    fn ensemble() -> FieldEnsemble {
        let geo = Geometry::new(Trap::BoxNeumann, 10.0, 4).unwrap();
        let phase = Array2::from_shape_fn((3, 4), |(s, i)| (s as f64 + 0.1) * (i as f64 - 1.7) / 3.0);
        let density = Array2::from_shape_fn((3, 4), |(s, i)| 1e-3 * (s * i) as f64 - 0.25);
        FieldEnsemble::new(geo, phase, density, 2.5).unwrap().with_origin(77, Provenance::SgClassical).with_modes(3)
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let e = ensemble();
        let mut buf = Vec::new();
        ensemble_container(&e).unwrap().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let c = Container::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(c.block("phase").unwrap(), &e.phase);
        assert_eq!(c.block("density").unwrap(), &e.density);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut buf = Vec::new();
        ensemble_container(&ensemble()).unwrap().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read_from(&mut bad.as_slice(), Path::new("m")), Err(Error::Format { .. })));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Container::read_from(&mut &short[..], Path::new("m")), Err(Error::Format { .. })));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(Container::read_from(&mut long.as_slice(), Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let e = ensemble();
        let mut buf = Vec::new();
        ensemble_table(&e).unwrap().write_to(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        fs::write(&p, &buf).unwrap();
        let back = ensemble_from_table(&Table::load(&p).unwrap(), &p).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn phase_table_rejects_ragged_and_non_finite_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.txt");
        fs::write(&p, "# raw\n0.1, 0.2, 0.3\n0.4\t0.5 0.6\n").unwrap();
        assert_eq!(read_phase_table(&p).unwrap().dim(), (2, 3));
        fs::write(&p, "0.1 0.2\n0.3\n").unwrap();
        assert!(read_phase_table(&p).is_err());
        fs::write(&p, "0.1 NaN\n").unwrap();
        assert!(read_phase_table(&p).is_err());
    }

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
