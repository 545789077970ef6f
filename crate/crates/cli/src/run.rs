//! Append-only run directories with a config echo and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use decomo_core::config::RunConfig;
use decomo_core::synthdata::{sha256_hex, MANIFEST_FILE};
use decomo_core::{Error, Result};
use serde::Serialize;

pub const CONFIG_ECHO: &str = "config.toml";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    run_id: &'a str,
    config_hash: &'a str,
    version: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    inputs: &'a [FileRecord],
    outputs: Vec<FileRecord>,
}

pub struct Run {
    pub dir: PathBuf,
    pub id: String,
    command: String,
    config_hash: String,
    inputs: Vec<FileRecord>,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    /// Creates `<root>/<command>/<id>`. An explicit id must be new; without
    /// one the first free `<hash prefix>-<n>` is used.
    pub fn create(root: &Path, command: &str, id: Option<&str>, cfg: &RunConfig) -> Result<Run> {
        let hash = cfg.hash();
        let parent = root.join(command);
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let id = match id {
            Some(id) => {
                if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                    return Err(Error::Config(format!("invalid run id '{id}'")));
                }
                id.to_string()
            }
            None => (0..)
                .map(|n| format!("{}-{n:03}", &hash[..12]))
                .find(|c| !parent.join(c).exists())
                .expect("unbounded search"),
        };
        let dir = parent.join(&id);
        if let Err(e) = fs::create_dir(&dir) {
            return Err(if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("run directory {} already exists; runs are append-only", dir.display()))
            } else {
                Error::io(&dir, e)
            });
        }
        let echo = dir.join(CONFIG_ECHO);
        fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        Ok(Run { dir, id, command: command.into(), config_hash: hash, inputs: Vec::new(), seeds: BTreeMap::new() })
    }

    /// Records an input file, or a corpus directory by its manifest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        self.inputs.push(FileRecord { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    /// Writes the manifest listing every file now in the run directory.
    pub fn finish(self) -> Result<PathBuf> {
        let mut files = Vec::new();
        walk(&self.dir, &mut files)?;
        files.sort();
        let mut outputs = Vec::new();
        for f in files {
            let rel = f.strip_prefix(&self.dir).expect("inside run dir").to_string_lossy().replace('\\', "/");
            if rel == RUN_MANIFEST {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            outputs.push(FileRecord { path: rel, sha256: sha256_hex(&bytes) });
        }
        let m = RunManifest {
            command: &self.command,
            run_id: &self.id,
            config_hash: &self.config_hash,
            version: env!("CARGO_PKG_VERSION"),
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs,
        };
        let path = self.dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
        Ok(self.dir)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
