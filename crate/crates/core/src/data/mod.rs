//! Synthetic three-wavelength aurora data: phantom generation, PGM files,
//! dataset layout, preprocessing and augmentation.

mod dataset;
mod pgm;
mod synth;
mod transform;

pub use dataset::{
    generate_dataset, load_dataset, read_manifest, LoadedDataset, ManifestRow, Split, MANIFEST_FILE,
};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use synth::{generate_phantom, Generator, SynthConfig, SURVEY_CLASS_COUNTS};
pub use transform::{
    augment, augment_views, center_crop, preprocess, resize_bilinear, standardize, AugmentParams,
    CROP_FRACTION,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Auroral morphology class. Integer codes:
/// arc 0, drapery 1, hotspot 2, radial 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AuroraClass {
    Arc,
    Drapery,
    Hotspot,
    Radial,
}

impl AuroraClass {
    pub const ALL: [AuroraClass; 4] = [AuroraClass::Arc, AuroraClass::Drapery, AuroraClass::Hotspot, AuroraClass::Radial];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| invalid(format!("class code {code} is not in 0..4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AuroraClass::Arc => "arc",
            AuroraClass::Drapery => "drapery",
            AuroraClass::Hotspot => "hotspot",
            AuroraClass::Radial => "radial",
        }
    }
}

impl fmt::Display for AuroraClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuroraClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

/// Emission line of an all-sky imager channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Wavelength {
    /// 427.8 nm: globally faint.
    W4278,
    /// 557.7 nm: sharpest, highest-contrast structure.
    W5577,
    /// 630.0 nm: brighter and more diffuse.
    W6300,
}

impl Wavelength {
    /// View order used everywhere: 427.8, 557.7, 630.0.
    pub const ALL: [Wavelength; 3] = [Wavelength::W4278, Wavelength::W5577, Wavelength::W6300];

    pub fn tag(self) -> &'static str {
        match self {
            Wavelength::W4278 => "427.8",
            Wavelength::W5577 => "557.7",
            Wavelength::W6300 => "630.0",
        }
    }

    /// Position in [`Wavelength::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Wavelength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Wavelength {
    type Err = Error;

    /// Accepts the tag (`557.7`) or its three-digit short form (`557`).
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.tag() == s || &w.tag()[..3] == s)
            .ok_or_else(|| invalid(format!("unknown wavelength {s:?} (expected 427.8, 557.7 or 630.0)")))
    }
}

/// One sample: the three wavelength images of a single scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub split: Split,
    pub class: AuroraClass,
    pub id: String,
    /// `(1, 1, H, W)` images with values in `[0, 1]`, in [`Wavelength::ALL`]
    /// order.
    pub views: [Tensor<f32>; 3],
}

impl ViewSet {
    pub fn view(&self, w: Wavelength) -> &Tensor<f32> {
        &self.views[w.index()]
    }
}

/// Accuracy of a nearest-centroid classifier on one feature: the mean
/// intensity of wavelength `w`. Centroids come from the training split and
/// accuracy is measured on the test split. A generator whose classes this
/// baseline separates well would make the task trivial.
pub fn centroid_baseline_accuracy(samples: &[ViewSet], w: Wavelength) -> Result<f64> {
    let mean = |s: &ViewSet| {
        let v = s.view(w);
        v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / v.len().max(1) as f64
    };
    let mut sums = [(0.0, 0usize); 4];
    for s in samples.iter().filter(|s| s.split == Split::Train) {
        let e = &mut sums[s.class.code()];
        e.0 += mean(s);
        e.1 += 1;
    }
    let centroids: Vec<(usize, f64)> = sums
        .iter()
        .enumerate()
        .filter(|(_, e)| e.1 > 0)
        .map(|(c, e)| (c, e.0 / e.1 as f64))
        .collect();
    let test: Vec<&ViewSet> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if centroids.is_empty() || test.is_empty() {
        return Err(invalid("centroid baseline needs training and test samples"));
    }
    let correct = test
        .iter()
        .filter(|s| {
            let m = mean(s);
            let best = centroids
                .iter()
                .min_by(|a, b| (a.1 - m).abs().total_cmp(&(b.1 - m).abs()))
                .map(|c| c.0);
            best == Some(s.class.code())
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Generates samples in memory with the same split rule as
/// [`generate_dataset`], without quantizing to 8 bits.
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<Vec<ViewSet>> {
    use rayon::prelude::*;
    let gen = Generator::new(cfg.clone())?;
    let jobs: Vec<(AuroraClass, usize, usize)> = AuroraClass::ALL
        .iter()
        .flat_map(|&c| {
            let n = cfg.class_count(c);
            (0..n).map(move |i| (c, i, n))
        })
        .collect();
    jobs.par_iter()
        .map(|&(class, i, n)| {
            Ok(ViewSet {
                split: if i < Split::train_count(n) { Split::Train } else { Split::Test },
                class,
                id: format!("{i:05}"),
                views: gen.views(class, cfg.scene_seed(class, i), cfg.size)?,
            })
        })
        .collect()
}
