//! Seeded synthetic segmentation tasks, band alignment and the `HZDS` container.

mod format;
mod generators;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

pub use format::{
    dataset_file_size, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION, HEADER_BYTES,
};
pub use generators::{
    default_generators, segment_covers, BuildingsGenerator, Drawn, FloodGenerator,
    FractureGenerator, GeneratorRegistry, LandslideGenerator, Primitive, TaskGenerator,
};

/// Smallest and largest admissible positive-pixel fraction of a generated mask.
pub const POSITIVE_FRACTION_RANGE: (f64, f64) = (0.02, 0.30);
pub const MAX_GENERATION_ATTEMPTS: usize = 100;

/// Binary `[H, W]` mask, hazard = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask",
            "{} values for {height}x{width}",
            data.len()
        );
        ensure!(
            data.iter().all(|&v| v <= 1),
            "mask",
            "mask values must be 0 or 1"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    /// Whether both classes are present.
    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.len()
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: u64,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    /// Channel count of the image as generated, before any alignment.
    pub band_count: usize,
}

impl SegmentationSample {
    pub fn new(sample_id: u64, image: Tensor, mask: Mask) -> Result<Self> {
        ensure!(
            image.shape().len() == 3,
            "sample",
            "image must be [C,H,W], got {:?}",
            image.shape()
        );
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        ensure!(
            mask.height() == h && mask.width() == w,
            "sample",
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        );
        Ok(Self {
            sample_id,
            image,
            mask,
            band_count: c,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Buildings,
    Flood,
    Fracture,
    Landslide,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        Self::Buildings,
        Self::Flood,
        Self::Fracture,
        Self::Landslide,
    ];
    pub const DOWNSTREAM: [TaskKind; 3] = [Self::Flood, Self::Fracture, Self::Landslide];

    pub fn name(self) -> &'static str {
        match self {
            Self::Buildings => "buildings",
            Self::Flood => "flood",
            Self::Fracture => "fracture",
            Self::Landslide => "landslide",
        }
    }

    pub fn native_bands(self) -> usize {
        match self {
            Self::Buildings | Self::Landslide => 3,
            Self::Flood | Self::Fracture => 1,
        }
    }

    fn salt(self) -> u64 {
        match self {
            Self::Buildings => 0x6275_696c_6469_6e67,
            Self::Flood => 0x666c_6f6f_6400_0000,
            Self::Fracture => 0x6672_6163_7475_7265,
            Self::Landslide => 0x6c61_6e64_736c_6964,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract("task_kind", format!("unknown task {s:?}")))
    }
}

/// Per-kind geometry knobs. Sizes are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeParams {
    pub building_count: (usize, usize),
    pub building_size: (f64, f64),
    /// Lattice cells per side of the flood perturbation field.
    pub flood_smoothness: usize,
    /// Equivalent number of looks of the gamma speckle (higher is smoother).
    pub flood_speckle_looks: f64,
    pub fracture_lines: (usize, usize),
    /// Line width in pixels.
    pub fracture_width: (usize, usize),
    /// Major/minor axis ratio range of the landslide patch.
    pub landslide_eccentricity: (f64, f64),
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            building_count: (2, 6),
            building_size: (0.1, 0.28),
            flood_smoothness: 3,
            flood_speckle_looks: 4.0,
            fracture_lines: (1, 4),
            fracture_width: (1, 2),
            landslide_eccentricity: (1.8, 3.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub kind: TaskKind,
    pub n_samples: usize,
    /// Image side length.
    pub size: usize,
    /// Must equal the kind's native band count when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<usize>,
    pub seed: u64,
    /// Sample ids are `id_offset + index`.
    pub id_offset: u64,
    pub shape: ShapeParams,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Buildings,
            n_samples: 64,
            size: 32,
            bands: None,
            seed: 0,
            id_offset: 0,
            shape: ShapeParams::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn new(kind: TaskKind, n_samples: usize, seed: u64) -> Self {
        Self {
            kind,
            n_samples,
            seed,
            ..Self::default()
        }
    }

    pub fn bands(&self) -> usize {
        self.bands.unwrap_or(self.kind.native_bands())
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "generator_config";
        ensure!(self.n_samples >= 1, OP, "n_samples must be at least 1");
        ensure!(
            self.size >= 8,
            OP,
            "size must be at least 8, got {}",
            self.size
        );
        ensure!(
            self.size <= u16::MAX as usize,
            OP,
            "size {} does not fit the container format",
            self.size
        );
        ensure!(
            self.bands() == self.kind.native_bands(),
            OP,
            "{} images have {} bands, got {}",
            self.kind,
            self.kind.native_bands(),
            self.bands()
        );
        let p = &self.shape;
        ensure!(
            p.building_count.0 >= 1 && p.building_count.0 <= p.building_count.1,
            OP,
            "bad building_count range"
        );
        ensure!(
            p.building_size.0 > 0.0
                && p.building_size.0 <= p.building_size.1
                && p.building_size.1 <= 1.0,
            OP,
            "bad building_size range"
        );
        ensure!(
            p.flood_smoothness >= 1,
            OP,
            "flood_smoothness must be positive"
        );
        ensure!(
            p.flood_speckle_looks > 0.0,
            OP,
            "flood_speckle_looks must be positive"
        );
        ensure!(
            p.fracture_lines.0 >= 1 && p.fracture_lines.0 <= p.fracture_lines.1,
            OP,
            "bad fracture_lines range"
        );
        ensure!(
            p.fracture_width.0 >= 1 && p.fracture_width.0 <= p.fracture_width.1,
            OP,
            "bad fracture_width range"
        );
        ensure!(
            p.landslide_eccentricity.0 >= 1.0
                && p.landslide_eccentricity.0 <= p.landslide_eccentricity.1,
            OP,
            "bad landslide_eccentricity range"
        );
        Ok(())
    }

    /// Independent generator for sample `index`.
    fn substream(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.kind.salt());
        rng.set_stream(index as u64);
        rng
    }
}

fn admissible(mask: &[u8]) -> bool {
    let f = mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / mask.len() as f64;
    (POSITIVE_FRACTION_RANGE.0..=POSITIVE_FRACTION_RANGE.1).contains(&f)
}

fn draw_sample(
    generator: &dyn TaskGenerator,
    cfg: &GeneratorConfig,
    index: usize,
) -> Result<(SegmentationSample, Vec<Primitive>)> {
    let mut rng = cfg.substream(index);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let d = generator.draw(&mut rng, cfg);
        if admissible(&d.mask) {
            let image = Tensor::new(&[generator.bands(), cfg.size, cfg.size], d.image)?;
            let mask = Mask::new(cfg.size, cfg.size, d.mask)?;
            let sample = SegmentationSample::new(cfg.id_offset + index as u64, image, mask)?;
            return Ok((sample, d.primitives));
        }
    }
    Err(Error::Generation {
        kind: cfg.kind.name().to_string(),
        seed: cfg.seed,
        detail: format!(
            "sample {index}: no mask with positive fraction in [{}, {}] after {MAX_GENERATION_ATTEMPTS} attempts",
            POSITIVE_FRACTION_RANGE.0, POSITIVE_FRACTION_RANGE.1
        ),
    })
}

/// Samples together with the primitives their masks were rasterized from.
pub fn generate_with_primitives(
    cfg: &GeneratorConfig,
    registry: &GeneratorRegistry,
) -> Result<Vec<(SegmentationSample, Vec<Primitive>)>> {
    cfg.validate()?;
    let generator = registry.get(cfg.kind.name())?;
    (0..cfg.n_samples)
        .map(|i| draw_sample(generator.as_ref(), cfg, i))
        .collect()
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<SegmentationSample>> {
    Ok(generate_with_primitives(cfg, default_generators())?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Maps a `[C, H, W]` image onto `target` channels by identity or single-band replication.
pub fn band_align(image: &Tensor, target: usize) -> Result<Tensor> {
    ensure!(
        image.shape().len() == 3,
        "band_align",
        "image must be [C,H,W], got {:?}",
        image.shape()
    );
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c == target {
        return Ok(image.clone());
    }
    ensure!(c == 1, "band_align", "cannot align {c} bands to {target}");
    let mut data = Vec::with_capacity(target * h * w);
    for _ in 0..target {
        data.extend_from_slice(image.data());
    }
    Tensor::new(&[target, h, w], data)
}

/// Aligned images stacked into `[N, channels, H, W]`.
pub fn stack_images(samples: &[&SegmentationSample], channels: usize) -> Result<Tensor> {
    let aligned = samples
        .iter()
        .map(|s| band_align(&s.image, channels))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&aligned)
}

/// Masks stacked into `[N, 1, H, W]` as 0/1 reals.
pub fn stack_masks(samples: &[&SegmentationSample]) -> Result<Tensor> {
    ensure!(!samples.is_empty(), "stack_masks", "no samples");
    let (h, w) = (samples[0].mask.height(), samples[0].mask.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        ensure!(
            s.mask.height() == h && s.mask.width() == w,
            "stack_masks",
            "mask extents differ"
        );
        data.extend(s.mask.data().iter().map(|&v| v as f64));
    }
    Tensor::new(&[samples.len(), 1, h, w], data)
}

/// Per-channel mean and population variance over every pixel of every sample.
pub fn band_moments(samples: &[SegmentationSample]) -> Vec<(f64, f64)> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let c = first.image.shape()[0];
    (0..c)
        .map(|band| {
            let values: Vec<f64> = samples
                .iter()
                .flat_map(|s| {
                    let hw = s.image.shape()[1] * s.image.shape()[2];
                    s.image.data()[band * hw..(band + 1) * hw].iter().copied()
                })
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

/// Dataset statistics as CSV with columns `statistic,index,value`: sample
/// count, a ten-bin positive-fraction histogram over `[0, 0.3]`, and the
/// per-band mean and variance.
pub fn describe(samples: &[SegmentationSample]) -> String {
    let mut out = String::from("statistic,index,value\n");
    out.push_str(&format!("count,,{}\n", samples.len()));
    let mut hist = [0usize; 10];
    for s in samples {
        let bin = ((s.mask.positive_fraction() / 0.03) as usize).min(9);
        hist[bin] += 1;
    }
    for (i, c) in hist.iter().enumerate() {
        out.push_str(&format!(
            "positive_fraction_bin,{:.2}-{:.2},{c}\n",
            i as f64 * 0.03,
            (i + 1) as f64 * 0.03
        ));
    }
    for (band, (mean, var)) in band_moments(samples).into_iter().enumerate() {
        out.push_str(&format!("band_mean,{band},{mean}\nband_var,{band},{var}\n"));
    }
    out
}
