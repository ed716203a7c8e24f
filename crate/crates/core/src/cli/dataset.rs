//! Dataset loading and output-directory bookkeeping for the commands.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{fail, Classify, CliResult, Failure, RunConfig};
use crate::dicom::{parse_dicom, DicomImage};
use crate::fsio::write_atomic;
use crate::image::RealImage;
use crate::preprocess::{prepare_batch, PreprocessConfig};

/// Picks the flag value, else the configured path, else fails naming both.
pub fn require_path(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> CliResult<PathBuf> {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => fail(
            Failure::Config,
            format!("--{what} (or paths.{what} in the config) is required"),
        ),
    }
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_fail(Failure::Io)
}

pub fn read_dicom(path: &Path) -> CliResult<DicomImage> {
    parse_dicom(&read_file(path)?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_fail(Failure::Io)
}

/// `(id, cac)` pairs from a dataset's `cohort.csv`, in file order. Only the
/// `id` and `cac` columns are required.
pub fn read_labels(dir: &Path) -> CliResult<Vec<(String, f64)>> {
    let path = dir.join("cohort.csv");
    let bytes = read_file(&path)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let header = rd.headers().or_fail(Failure::Config)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(id_col), Some(cac_col)) = (col("id"), col("cac")) else {
        return fail(
            Failure::Config,
            format!("{}: needs id and cac columns", path.display()),
        );
    };
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.or_fail(Failure::Config)?;
        let cac: f64 = row[cac_col]
            .trim()
            .parse()
            .map_err(|_| {
                anyhow::anyhow!(
                    "{}: bad cac value {:?} for {}",
                    path.display(),
                    &row[cac_col],
                    &row[id_col]
                )
            })
            .or_fail(Failure::Config)?;
        if !(cac >= 0.0 && cac.is_finite()) {
            return fail(
                Failure::Config,
                format!("{}: cac must be nonnegative, got {cac}", path.display()),
            );
        }
        out.push((row[id_col].to_string(), cac));
    }
    if out.is_empty() {
        return fail(
            Failure::Degenerate,
            format!("{} lists no subjects", path.display()),
        );
    }
    Ok(out)
}

/// Prepared (cropped, unstandardized) images with their ids and scores.
pub struct Dataset {
    pub ids: Vec<String>,
    pub cac: Vec<f64>,
    pub images: Vec<RealImage>,
}

impl Dataset {
    pub fn load(dir: &Path, pc: &PreprocessConfig) -> CliResult<Self> {
        let labels = read_labels(dir)?;
        let dicoms = labels
            .iter()
            .map(|(id, _)| read_dicom(&dir.join("images").join(format!("{id}.dcm"))))
            .collect::<CliResult<Vec<_>>>()?;
        log::info!("preparing {} images from {}", dicoms.len(), dir.display());
        let images = prepare_batch(&dicoms, pc).or_fail(Failure::Config)?;
        let (ids, cac) = labels.into_iter().unzip();
        Ok(Self { ids, cac, images })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    files: Vec<String>,
}

/// An output directory whose files are written atomically and listed in a
/// closing `manifest.json`, next to the effective `config.toml`.
pub struct OutDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)
            .map_err(|e| anyhow::anyhow!("{}: {e}", root.display()))
            .or_fail(Failure::Io)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        })
    }

    /// Records a file written by library code under `rel`.
    pub fn note(&mut self, rel: impl Into<String>) {
        self.files.insert(rel.into());
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).or_fail(Failure::Io)?;
        }
        write_atomic(&path, bytes)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
            .or_fail(Failure::Io)?;
        self.note(rel);
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value).or_fail(Failure::Io)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Serializes rows with a header derived from the row type.
    pub fn write_rows<R: Serialize>(&mut self, rel: &str, rows: &[R]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).or_fail(Failure::Io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| anyhow::anyhow!("{e}"))
            .or_fail(Failure::Io)?;
        self.write(rel, &bytes)
    }

    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> CliResult<()> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        let mut files: Vec<String> = self.files.iter().cloned().collect();
        files.push("manifest.json".into());
        files.sort();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            files,
        };
        self.write_json("manifest.json", &manifest)
    }
}
