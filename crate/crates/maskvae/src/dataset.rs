//! On-disk datasets: `images/NNNNNN.png`, `masks/NNNNNN.png`, `split.csv`
//! with lines `NNNNNN,train|val|test`, and an optional `manifest.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskvae_core::synthface::{dataset_spec, render, split_counts, GENERATOR_VERSION};
use maskvae_core::{FaceMask, ImageTensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::png;

pub const SPLIT_FILE: &str = "split.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub seed: u64,
    pub resolution: usize,
    pub generator_version: u32,
    pub fractions: [f64; 3],
    pub counts: [usize; 3],
    /// SHA-256 over every image, mask and the split file, in id order.
    pub content_sha256: String,
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

/// Renders `n` synthetic faces into `out_dir`. The first `counts[0]` ids form
/// the training split, then validation, then test. Every byte written is a
/// function of the arguments alone.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    out_dir: &Path,
    resolution: usize,
    fractions: [f64; 3],
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be positive".into()));
    }
    let counts = split_counts(n, fractions).map_err(|e| Error::Usage(e.to_string()))?;
    if resolution < maskvae_core::synthface::MIN_RESOLUTION {
        return Err(Error::Usage(format!("resolution must be at least {}", maskvae_core::synthface::MIN_RESOLUTION)));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    }
    let mut hasher = Sha256::new();
    let mut split_csv = String::new();
    for index in 0..n {
        let id = image_id(index);
        let (img, mask) = render(&dataset_spec(seed, index as u64), resolution)?;
        let img_path = out_dir.join("images").join(format!("{id}.png"));
        let mask_path = out_dir.join("masks").join(format!("{id}.png"));
        png::save_image(&img_path, &img)?;
        png::save_mask(&mask_path, &mask)?;
        for path in [&img_path, &mask_path] {
            hasher.update(read(path)?);
        }
        let split = if index < counts[0] {
            Split::Train
        } else if index < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        split_csv.push_str(&format!("{id},{split}\n"));
    }
    write(&out_dir.join(SPLIT_FILE), split_csv.as_bytes())?;
    hasher.update(split_csv.as_bytes());
    let manifest = Manifest {
        n,
        seed,
        resolution,
        generator_version: GENERATOR_VERSION,
        fractions,
        counts,
        content_sha256: hex::encode(hasher.finalize()),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// SHA-256 of the manifest file's bytes.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read(&dir.join(MANIFEST_FILE))?)))
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor<f64>,
    pub mask: Option<FaceMask<f64>>,
}

/// A dataset directory, synthetic or externally prepared.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<(String, Split)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let split_path = root.join(SPLIT_FILE);
        if !split_path.is_file() {
            return Err(Error::Data(format!("{} is not a dataset (no {SPLIT_FILE})", root.display())));
        }
        let text = String::from_utf8(read(&split_path)?)
            .map_err(|_| Error::Data(format!("{} is not UTF-8", split_path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line.split_once(',').and_then(|(id, split)| Some((id.trim(), split.parse::<Split>().ok()?)));
            match parsed {
                Some((id, split)) if !id.is_empty() => entries.push((id.to_owned(), split)),
                _ => {
                    return Err(Error::Data(format!(
                        "{}:{}: expected `id,train|val|test`, found `{line}`",
                        split_path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(Self { root: root.to_owned(), entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |(_, s)| *s == split).map(|(id, _)| id.as_str())
    }

    pub fn len(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn manifest(&self) -> Option<Manifest> {
        let bytes = fs::read(self.root.join(MANIFEST_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn manifest_hash(&self) -> Option<String> {
        manifest_hash(&self.root).ok()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    /// Loads a split. Masks are attached when their files exist; every
    /// image must be `resolution × resolution`.
    pub fn load(&self, split: Split, resolution: usize) -> Result<Vec<Sample>> {
        self.ids(split)
            .map(|id| {
                let image = png::load_image(&self.image_path(id))?;
                if image.height() != resolution || image.width() != resolution {
                    return Err(Error::Data(format!(
                        "image {id} is {}x{}, configuration expects {resolution}x{resolution}",
                        image.height(),
                        image.width()
                    )));
                }
                let mask_path = self.mask_path(id);
                let mask = if mask_path.is_file() {
                    let m = png::load_mask(&mask_path)?;
                    if (m.height(), m.width()) != (resolution, resolution) {
                        return Err(Error::Data(format!("mask {id} does not match its image size")));
                    }
                    Some(m)
                } else {
                    None
                };
                Ok(Sample { id: id.to_owned(), image, mask })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_images_split_eight_one_one() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(10, 3, dir.path(), 16, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(m.counts, [8, 1, 1]);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!([ds.len(Split::Train), ds.len(Split::Val), ds.len(Split::Test)], [8, 1, 1]);
        let all: std::collections::BTreeSet<_> = Split::ALL.iter().flat_map(|&s| ds.ids(s)).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(ds.manifest().unwrap(), m);
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(6, 11, a.path(), 24, [0.5, 0.0, 0.5]).unwrap();
        generate_dataset(6, 11, b.path(), 24, [0.5, 0.0, 0.5]).unwrap();
        for id in (0..6).map(image_id) {
            for sub in ["images", "masks"] {
                let rel = Path::new(sub).join(format!("{id}.png"));
                assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
            }
        }
        assert_eq!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());
        let c = tempfile::tempdir().unwrap();
        generate_dataset(6, 12, c.path(), 24, [0.5, 0.0, 0.5]).unwrap();
        assert_ne!(manifest_hash(a.path()).unwrap(), manifest_hash(c.path()).unwrap());
    }

    #[test]
    fn stored_masks_are_the_rendered_binaries() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(5, 2, dir.path(), 32, [1.0, 0.0, 0.0]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for (i, s) in ds.load(Split::Train, 32).unwrap().into_iter().enumerate() {
            let (img, mask) = render(&dataset_spec(2, i as u64), 32).unwrap();
            assert_eq!(s.mask.unwrap(), mask);
            for (a, b) in s.image.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }

    #[test]
    fn bad_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_dataset(4, 0, dir.path(), 16, [0.5, 0.5, 0.5]), Err(Error::Usage(_))));
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
        generate_dataset(2, 0, dir.path(), 16, [0.5, 0.5, 0.0]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(matches!(ds.load(Split::Train, 48), Err(Error::Data(_))));
        fs::write(dir.path().join(SPLIT_FILE), "000000,holdout\n").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
    }
}
