use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use petbench_core::schema::to_document;
use serde::Serialize;
use serde_json::json;

/// Tool version: package version plus `git describe` of the build tree when available.
pub const VERSION: &str = env!("PETBENCH_VERSION");

/// Writes versioned JSON documents and commented CSV files into one directory.
pub struct ArtifactDir {
    dir: PathBuf,
    provenance: serde_json::Value,
}

impl ArtifactDir {
    pub fn create(dir: &Path, config: &impl Serialize) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance: json!({ "version": VERSION, "config": config }),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, kind: &str, data: &T) -> anyhow::Result<()> {
        let text = to_document(kind, self.provenance.clone(), data)?;
        fs::write(self.path(name), text + "\n").with_context(|| format!("writing {name}"))
    }

    /// CSV with `#` comment lines carrying the version and the resolved config.
    pub fn write_csv<R: Serialize>(&self, name: &str, rows: &[R]) -> anyhow::Result<()> {
        let mut file = fs::File::create(self.path(name)).with_context(|| format!("writing {name}"))?;
        writeln!(file, "# petbench {VERSION}")?;
        writeln!(file, "# config {}", self.provenance["config"])?;
        let mut w = csv::Writer::from_writer(file);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a CSV written by [`ArtifactDir::write_csv`], skipping comment lines.
pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<R>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
