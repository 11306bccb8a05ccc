use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pairforge::aggregate::{decode_head, Head};
use pairforge::model::{decode_descriptors, decode_feature_map, encode_descriptors, DescriptorSet, FeatureMap};
use pairforge::trainer::restore;

pub const MAP_EXTENSION: &str = "fmap";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Names sidecar of a descriptor file: same path, `.names` extension.
pub fn names_path(desc: &Path) -> PathBuf {
    desc.with_extension("names")
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let bytes = read_bytes(path)?;
    let names = read_text(&names_path(path))?;
    decode_descriptors(&bytes, &names).with_context(|| format!("invalid descriptor file {}", path.display()))
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    let (bytes, names) = encode_descriptors(set);
    write(path, bytes)?;
    write(&names_path(path), names)
}

/// Head inputs: one feature map per image or one vector per image.
pub enum Inputs {
    Maps(Vec<(String, FeatureMap)>),
    Vectors(DescriptorSet),
}

impl Inputs {
    /// Channels of the maps or dimension of the vectors.
    pub fn dim(&self) -> usize {
        match self {
            Inputs::Maps(m) => m.first().map_or(0, |(_, f)| f.channels()),
            Inputs::Vectors(d) => d.dim(),
        }
    }
}

/// A directory is read as `<name>.fmap` feature maps in name order; a file
/// is read as a descriptor file.
pub fn load_inputs(path: &Path) -> Result<Inputs> {
    if !path.is_dir() {
        return Ok(Inputs::Vectors(read_descriptors(path)?));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("cannot list {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == MAP_EXTENSION));
    files.sort();
    if files.is_empty() {
        bail!("no .{MAP_EXTENSION} files in {}", path.display());
    }
    let maps = files
        .iter()
        .map(|f| {
            let name = f.file_stem().and_then(|s| s.to_str()).context("non UTF-8 map file name")?.to_string();
            let map = decode_feature_map(&read_bytes(f)?).with_context(|| format!("invalid feature map {}", f.display()))?;
            Ok((name, map))
        })
        .collect::<Result<_>>()?;
    Ok(Inputs::Maps(maps))
}

/// Reads a parameters file or the head stored in a training checkpoint.
pub fn load_head(path: &Path) -> Result<Head> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"PFCK") {
        return Ok(restore(&bytes).with_context(|| format!("invalid checkpoint {}", path.display()))?.head);
    }
    decode_head(&bytes).with_context(|| format!("invalid parameters file {}", path.display()))
}
