//! On-disk dataset: `<out>/<split>/<class>/<id>_<wavelength>.pgm` plus a
//! manifest CSV `split,class,id,path_427,path_557,path_630` whose paths are
//! relative to the dataset root.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::pgm::{read_pgm, write_pgm};
use super::synth::{Generator, SynthConfig};
use super::{AuroraClass, ViewSet, Wavelength};
use crate::error::{invalid, io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 6] = ["split", "class", "id", "path_427", "path_557", "path_630"];

/// Train/test partition; samples are split 6:4 within each class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Number of training samples among `n`: 60%, rounded.
    pub fn train_count(n: usize) -> usize {
        (n * 6 + 5) / 10
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(invalid(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub split: Split,
    pub class: AuroraClass,
    pub id: String,
    /// Relative paths in [`Wavelength::ALL`] order.
    pub paths: [PathBuf; 3],
}

fn file_name(id: &str, w: Wavelength) -> String {
    format!("{id}_{}.pgm", w.tag())
}

fn relative_path(split: Split, class: AuroraClass, id: &str, w: Wavelength) -> PathBuf {
    Path::new(split.name()).join(class.name()).join(file_name(id, w))
}

/// Generates every sample, writes the PGM files and the manifest, and
/// returns the manifest rows. The same configuration always produces the
/// same bytes.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<Vec<ManifestRow>> {
    let gen = Generator::new(cfg.clone())?;
    let mut jobs = Vec::new();
    for class in AuroraClass::ALL {
        let n = cfg.class_count(class);
        let n_train = Split::train_count(n);
        for i in 0..n {
            let split = if i < n_train { Split::Train } else { Split::Test };
            jobs.push((split, class, i));
        }
    }
    let mut rows: Vec<ManifestRow> = jobs
        .par_iter()
        .map(|&(split, class, i)| {
            let id = format!("{i:05}");
            let views = gen.views(class, cfg.scene_seed(class, i), cfg.size)?;
            let paths = Wavelength::ALL.map(|w| relative_path(split, class, &id, w));
            for (p, img) in paths.iter().zip(&views) {
                write_pgm(&out.join(p), img)?;
            }
            Ok(ManifestRow { split, class, id, paths })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| (a.split, a.class, &a.id).cmp(&(b.split, b.class, &b.id)));
    write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        let paths = r.paths.iter().map(|p| p.to_string_lossy().replace('\\', "/"));
        let mut rec = vec![r.split.name().to_string(), r.class.name().to_string(), r.id.clone()];
        rec.extend(paths);
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(format!("manifest buffer: {e}")))?;
    crate::util::write_atomic(path, &bytes)
}

/// Reads a manifest written by [`generate_dataset`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(invalid(format!("{}: unexpected manifest header {header:?}", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ManifestRow {
                split: rec[0].parse()?,
                class: rec[1].parse()?,
                id: rec[2].to_string(),
                paths: [3, 4, 5].map(|i| PathBuf::from(&rec[i])),
            })
        })
        .collect()
}

/// Samples found under a dataset root, plus the samples that were rejected
/// because a wavelength file was missing.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    /// Sorted by split, class and id.
    pub samples: Vec<ViewSet>,
    pub rejects: Vec<Error>,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> Vec<&ViewSet> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn dir_entries(dir: &Path) -> Result<Vec<std::fs::DirEntry>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<std::io::Result<_>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Loads every sample under `dir`. A sample missing a wavelength file is
/// rejected (recorded in [`LoadedDataset::rejects`]) without affecting the
/// others; an unknown class directory or an unreadable image fails the
/// whole load.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    type Key = (Split, AuroraClass, String);
    let mut groups: BTreeMap<Key, [Option<PathBuf>; 3]> = BTreeMap::new();
    for split in Split::ALL {
        let split_dir = dir.join(split.name());
        if !split_dir.is_dir() {
            continue;
        }
        for class_entry in dir_entries(&split_dir)? {
            let class_path = class_entry.path();
            if !class_path.is_dir() {
                continue;
            }
            let name = class_entry.file_name().to_string_lossy().into_owned();
            let class: AuroraClass = name.parse()?;
            for file in dir_entries(&class_path)? {
                let path = file.path();
                let fname = file.file_name().to_string_lossy().into_owned();
                let Some(stem) = fname.strip_suffix(".pgm") else {
                    continue;
                };
                let (id, tag) = stem.rsplit_once('_').ok_or_else(|| Error::Pgm {
                    path: path.clone(),
                    reason: "file name is not <id>_<wavelength>.pgm".into(),
                })?;
                let w: Wavelength = tag.parse().map_err(|_| Error::Pgm {
                    path: path.clone(),
                    reason: format!("unknown wavelength tag {tag:?}"),
                })?;
                groups.entry((split, class, id.to_string())).or_default()[w.index()] = Some(path);
            }
        }
    }
    let mut complete = Vec::new();
    let mut rejects = Vec::new();
    for ((split, class, id), paths) in groups {
        if paths.iter().all(Option::is_some) {
            complete.push((split, class, id, paths.map(Option::unwrap)));
        } else {
            let missing = Wavelength::ALL
                .iter()
                .zip(&paths)
                .filter(|(_, p)| p.is_none())
                .map(|(w, _)| w.tag().to_string())
                .collect();
            rejects.push(Error::MissingWavelengths {
                split: split.name().into(),
                class: class.name().into(),
                id,
                missing,
            });
        }
    }
    let samples = complete
        .into_par_iter()
        .map(|(split, class, id, paths)| {
            let [a, b, c] = paths;
            let views = [read_pgm(&a)?, read_pgm(&b)?, read_pgm(&c)?];
            let s0 = views[0].shape();
            if views.iter().any(|v| v.shape() != s0) {
                return Err(Error::Pgm {
                    path: a,
                    reason: format!("views of sample {id} differ in size"),
                });
            }
            Ok(ViewSet { split, class, id, views })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { samples, rejects })
}
