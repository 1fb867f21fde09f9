//! Fixed artifact names under `--out`, file hashing and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn image(&self, i: usize) -> PathBuf {
        self.images_dir().join(format!("{i:06}.sqri"))
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn overlap(&self) -> PathBuf {
        self.root.join("overlap.sqot")
    }

    pub fn phase_dir(&self, phase: u8) -> PathBuf {
        self.root.join(format!("phase{phase}"))
    }

    pub fn checkpoint(&self, phase: u8) -> PathBuf {
        self.phase_dir(phase).join("checkpoint.sqwt")
    }

    pub fn phase_model(&self, phase: u8) -> PathBuf {
        self.phase_dir(phase).join("model.sqwt")
    }

    pub fn metrics(&self, phase: u8) -> PathBuf {
        self.phase_dir(phase).join("metrics.jsonl")
    }

    /// Weights of the most recent training phase.
    pub fn model(&self) -> PathBuf {
        self.root.join("model.sqwt")
    }

    pub fn descriptors(&self) -> PathBuf {
        self.root.join("descriptors.sqix")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.sqix")
    }

    pub fn index_meta(&self) -> PathBuf {
        self.root.join("index.meta.json")
    }

    pub fn queries(&self) -> PathBuf {
        self.root.join("queries.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn pr_csv(&self) -> PathBuf {
        self.root.join("pr.csv")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.json")
    }

    pub fn run_manifest(&self, command: &str) -> PathBuf {
        self.root.join("runs").join(format!("{command}.json"))
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .display()
            .to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f =
        BufReader::new(fs::File::open(path).map_err(|e| CliError::data(path.display(), e))?);
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| CliError::data(path.display(), e))?;
    Ok(format!("{:x}", h.finalize()))
}

/// Hash of a directory's regular files, in name order.
pub fn sha256_dir(path: &Path) -> Result<String, CliError> {
    let mut names: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::data(path.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        h.update(sha256_file(&p)?);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::data(dir.display(), e))?;
    }
    Ok(())
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial artifact.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> seqplace::Result<()>,
{
    create_parent(path)?;
    let tmp = path.with_extension("partial");
    let f = fs::File::create(&tmp).map_err(|e| CliError::data(tmp.display(), e))?;
    let mut w = BufWriter::new(f);
    fill(&mut w).map_err(|e| CliError::data(path.display(), e))?;
    w.flush().map_err(|e| CliError::data(path.display(), e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| CliError::data(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Opens an input artifact; a missing file names the command producing it.
pub fn open_input(path: &Path, producer: &str) -> Result<BufReader<fs::File>, CliError> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::data(
            format!("{} (run `seqplace {producer}` first)", path.display()),
            e,
        )),
        Err(e) => Err(CliError::data(path.display(), e)),
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    workers: usize,
    config_hash: String,
    dataset_hash: &'a str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Collects the files a command read and wrote and records them, with the
/// resolved configuration, next to the artifacts.
pub struct Recorder {
    layout: Layout,
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(layout: &Layout, command: &str) -> Self {
        Self {
            layout: layout.clone(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: PathBuf) {
        self.inputs.push(p);
    }

    pub fn output(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths
            .iter()
            .map(|p| {
                let h = if p.is_dir() {
                    sha256_dir(p)?
                } else {
                    sha256_file(p)?
                };
                Ok((self.layout.relative(p), h))
            })
            .collect()
    }

    pub fn finish(
        self,
        argv: &[String],
        config: &RunConfig,
        dataset_hash: &str,
        workers: usize,
    ) -> Result<PathBuf, CliError> {
        let config_json = serde_json::to_vec(config).map_err(|e| CliError::data("config", e))?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            argv,
            seed: config.train.seed,
            workers,
            config_hash: sha256_hex(&config_json),
            dataset_hash,
            config,
            inputs: self.digests(&self.inputs)?,
            outputs: self.digests(&self.outputs)?,
        };
        let path = self.layout.run_manifest(&self.command);
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_json(&p, &vec![1, 2]).unwrap();
        assert!(p.exists());
        assert!(!p.with_extension("partial").exists());
        let failed = write_atomic(&dir.path().join("c.bin"), |_| {
            Err(seqplace::Error::Empty("x"))
        });
        assert!(matches!(failed, Err(CliError::Data { .. })));
    }

    #[test]
    fn missing_input_names_its_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = open_input(&dir.path().join("overlap.sqot"), "label").unwrap_err();
        assert!(err.to_string().contains("seqplace label"));
        assert_eq!(err.exit_code(), crate::EXIT_DATA);
    }

    #[test]
    fn directory_digest_depends_on_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        let a = sha256_dir(dir.path()).unwrap();
        fs::write(dir.path().join("x"), b"2").unwrap();
        assert_ne!(a, sha256_dir(dir.path()).unwrap());
    }
}
