//! Prepared data directories and bag caches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mil_lstm::datasets::idx::write_idx;
use mil_lstm::datasets::{load_mnist_dir, read_bag_cache, synth_glyphs, Bag, BagCacheHeader, InstancePool, Split};
use mil_lstm::numerics::Rng;

use crate::artifact::{sha256_hex, TOOL_VERSION};
use crate::fail::{CliResult, Failure};

pub const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub source: String,
    pub seed: Option<u64>,
    pub rows: usize,
    pub cols: usize,
    pub train: usize,
    pub test: usize,
    pub files: BTreeMap<String, String>,
    /// Digest of the file checksums and counts.
    pub hash: String,
}

/// Independent value for a labeled use of the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    Rng::labeled(seed, label).next_u64()
}

/// Glyph pools: `per_class` training images per class and a sixth of that for test.
pub fn synthetic_pools(per_class: usize, seed: u64) -> (InstancePool, InstancePool) {
    let train = synth_glyphs(per_class.max(1), derive_seed(seed, "glyphs-train"), Split::Train);
    let test = synth_glyphs((per_class / 6).max(1), derive_seed(seed, "glyphs-test"), Split::Test);
    (train, test)
}

/// Writes both pools as IDX files plus a checksum manifest.
pub fn prepare(dir: &Path, train: &InstancePool, test: &InstancePool, source: &str, seed: Option<u64>) -> CliResult<Manifest> {
    fs::create_dir_all(dir)?;
    write_idx(train, &dir.join(FILES[0]), &dir.join(FILES[1]))?;
    write_idx(test, &dir.join(FILES[2]), &dir.join(FILES[3]))?;
    let mut files = BTreeMap::new();
    for name in FILES {
        files.insert(name.to_string(), sha256_hex(&fs::read(dir.join(name))?));
    }
    let mut manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        source: source.to_string(),
        seed,
        rows: train.rows(),
        cols: train.cols(),
        train: train.len(),
        test: test.len(),
        files,
        hash: String::new(),
    };
    manifest.hash = manifest_hash(&manifest);
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn manifest_hash(m: &Manifest) -> String {
    let key = serde_json::json!({"files": m.files, "train": m.train, "test": m.test, "rows": m.rows, "cols": m.cols});
    sha256_hex(key.to_string().as_bytes())
}

/// Loads a prepared directory, checking the manifest checksums when one exists.
pub fn load_prepared(dir: &Path) -> CliResult<(InstancePool, InstancePool, Option<Manifest>)> {
    let manifest_path = dir.join(MANIFEST);
    let manifest = if manifest_path.exists() {
        let m: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| Failure::input(format!("{}: {e}", manifest_path.display())))?;
        if manifest_hash(&m) != m.hash {
            return Err(Failure::input(format!("{}: manifest hash mismatch", manifest_path.display())));
        }
        for (name, want) in &m.files {
            let got = sha256_hex(&fs::read(dir.join(name))?);
            if &got != want {
                return Err(Failure::input(format!("{name}: checksum {got} does not match manifest {want}")));
            }
        }
        Some(m)
    } else {
        None
    };
    let (train, test) = load_mnist_dir(dir)?;
    Ok((train, test, manifest))
}

pub fn load_bags(path: &Path) -> CliResult<(BagCacheHeader, Vec<Bag>)> {
    let file = fs::File::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok(read_bag_cache(std::io::BufReader::new(file))?)
}
