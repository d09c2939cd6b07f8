//! Procedural task generators, one strategy per task kind.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{GeneratorConfig, TaskKind};
use crate::error::{Error, Result};

/// Geometry behind a mask, kept so callers can audit mask/image alignment.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    Rect {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    /// Line segment rasterized with the given half width (pixel centers).
    Segment {
        a: (f64, f64),
        b: (f64, f64),
        half_width: f64,
    },
    /// Region defined by a thresholded field (no closed-form geometry).
    Region,
}

/// One drawn image before rejection filtering.
#[derive(Clone, Debug)]
pub struct Drawn {
    /// `[C, H, W]` values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `[H, W]` values in `{0, 1}`.
    pub mask: Vec<u8>,
    pub primitives: Vec<Primitive>,
}

pub trait TaskGenerator: Send + Sync {
    fn kind(&self) -> TaskKind;

    fn bands(&self) -> usize;

    fn draw(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Drawn;
}

/// Smooth noise in `[0, 1]`: random lattice values, smoothstep-bilinear.
pub(crate) fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let cells = cells.max(1);
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random::<f64>())
        .collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
        let iy = (fy.floor() as usize).min(cells - 1);
        let ty = smooth(fy - iy as f64);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
            let ix = (fx.floor() as usize).min(cells - 1);
            let tx = smooth(fx - ix as f64);
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Textured band: base level, value-noise texture and a linear gradient.
fn textured_band(rng: &mut ChaCha8Rng, size: usize, base: f64, texture: f64) -> Vec<f64> {
    let noise = value_noise(rng, size, size, 4);
    let fine = value_noise(rng, size, size, size / 4);
    let (gx, gy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let ramp = gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            out.push(base + texture * (noise[i] - 0.5) + 0.4 * texture * (fine[i] - 0.5) + ramp);
        }
    }
    out
}

/// Axis-aligned rooftops of bright or dark albedo over a textured 3-band scene.
pub struct BuildingsGenerator;

impl TaskGenerator for BuildingsGenerator {
    fn kind(&self) -> TaskKind {
        TaskKind::Buildings
    }

    fn bands(&self) -> usize {
        3
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Drawn {
        let s = cfg.size;
        let p = &cfg.shape;
        // Scene illumination varies per image; roofs contrast in either direction.
        let level = rng.random_range(0.15..0.75);
        let tint = [level - 0.04, level, level + 0.04];
        let mut bands: Vec<Vec<f64>> = tint
            .iter()
            .map(|&b| textured_band(rng, s, b, 0.16))
            .collect();
        let mut mask = vec![0u8; s * s];
        let count = rng.random_range(p.building_count.0..=p.building_count.1);
        let lo = ((p.building_size.0 * s as f64).round() as usize).max(2);
        let hi = ((p.building_size.1 * s as f64).round() as usize).max(lo);
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let (bw, bh) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let x0 = rng.random_range(0..=s - bw);
            let y0 = rng.random_range(0..=s - bh);
            let contrast = rng.random_range(0.25..0.45);
            let bright = if level + contrast > 0.95 {
                false
            } else if level - contrast < 0.05 {
                true
            } else {
                rng.random_bool(0.5)
            };
            let albedo = if bright {
                level + contrast
            } else {
                level - contrast
            };
            let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let i = y * s + x;
                    mask[i] = 1;
                    for (c, band) in bands.iter_mut().enumerate() {
                        band[i] = albedo + hue[c] + 0.15 * (band[i] - tint[c]);
                    }
                }
            }
            primitives.push(Primitive::Rect {
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
            });
        }
        let image = bands.into_iter().flatten().map(clamp01).collect();
        Drawn {
            image,
            mask,
            primitives,
        }
    }
}

fn largest_component_at(mask: &[u8], size: usize, seed: usize) -> Vec<u8> {
    let mut out = vec![0u8; mask.len()];
    if mask[seed] == 0 {
        return out;
    }
    let mut stack = vec![seed];
    out[seed] = 1;
    while let Some(i) = stack.pop() {
        let (y, x) = (i / size, i % size);
        let mut visit = |j: usize| {
            if mask[j] == 1 && out[j] == 0 {
                out[j] = 1;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < size {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - size);
        }
        if y + 1 < size {
            visit(i + size);
        }
    }
    out
}

/// Dark connected water body in a single speckled band.
pub struct FloodGenerator;

impl TaskGenerator for FloodGenerator {
    fn kind(&self) -> TaskKind {
        TaskKind::Flood
    }

    fn bands(&self) -> usize {
        1
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Drawn {
        let s = cfg.size;
        let p = &cfg.shape;
        let level = rng.random_range(0.62..0.74);
        let land = textured_band(rng, s, level, 0.14);
        let field = value_noise(rng, s, s, p.flood_smoothness.max(1));
        let (cx, cy) = (
            rng.random_range(0.2..0.8) * s as f64,
            rng.random_range(0.2..0.8) * s as f64,
        );
        let radius = rng.random_range(0.18..0.42) * s as f64;
        let score: Vec<f64> = (0..s * s)
            .map(|i| {
                let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
                let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (radius * radius);
                (-d2).exp() + 0.6 * (field[i] - 0.5)
            })
            .collect();
        let cut = rng.random_range(0.35..0.65);
        let raw: Vec<u8> = score.iter().map(|&v| u8::from(v > cut)).collect();
        let peak = (0..s * s)
            .max_by(|&a, &b| score[a].total_cmp(&score[b]))
            .expect("non-empty");
        let mask = largest_component_at(&raw, s, peak);
        let water = rng.random_range(0.10..0.18);
        let looks = p.flood_speckle_looks;
        let speckle = Gamma::new(looks, 1.0 / looks).expect("looks validated positive");
        let image = (0..s * s)
            .map(|i| {
                let clean = if mask[i] == 1 {
                    water + 0.3 * (land[i] - level)
                } else {
                    land[i]
                };
                clamp01(clean * speckle.sample(rng))
            })
            .collect();
        Drawn {
            image,
            mask,
            primitives: vec![Primitive::Region],
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Whether a pixel center lies within a segment primitive.
pub fn segment_covers(x: usize, y: usize, a: (f64, f64), b: (f64, f64), half_width: f64) -> bool {
    segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b) <= half_width
}

/// Thin dark polylines cutting a bright ice-like band.
pub struct FractureGenerator;

impl TaskGenerator for FractureGenerator {
    fn kind(&self) -> TaskKind {
        TaskKind::Fracture
    }

    fn bands(&self) -> usize {
        1
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Drawn {
        let s = cfg.size;
        let p = &cfg.shape;
        let level = rng.random_range(0.74..0.86);
        let mut image = textured_band(rng, s, level, 0.10);
        let mut mask = vec![0u8; s * s];
        let lines = rng.random_range(p.fracture_lines.0..=p.fracture_lines.1);
        let mut primitives = Vec::new();
        for _ in 0..lines {
            let width = rng.random_range(p.fracture_width.0..=p.fracture_width.1) as f64;
            let half_width = 0.5 * width;
            let depth = rng.random_range(0.35..0.55);
            let mut a = (
                rng.random_range(0.0..s as f64),
                rng.random_range(0.0..s as f64),
            );
            let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..rng.random_range(2..=4) {
                let step = rng.random_range(0.2..0.4) * s as f64;
                heading += rng.random_range(-0.7..0.7);
                let b = (
                    (a.0 + step * heading.cos()).clamp(0.0, s as f64),
                    (a.1 + step * heading.sin()).clamp(0.0, s as f64),
                );
                for y in 0..s {
                    for x in 0..s {
                        let i = y * s + x;
                        if mask[i] == 0 && segment_covers(x, y, a, b, half_width) {
                            mask[i] = 1;
                            image[i] *= 1.0 - depth;
                        }
                    }
                }
                primitives.push(Primitive::Segment { a, b, half_width });
                a = b;
            }
        }
        let image = image.into_iter().map(clamp01).collect();
        Drawn {
            image,
            mask,
            primitives,
        }
    }
}

/// Elongated, rotated, noisy-edged patch of bare soil in a vegetated 3-band scene.
pub struct LandslideGenerator;

impl TaskGenerator for LandslideGenerator {
    fn kind(&self) -> TaskKind {
        TaskKind::Landslide
    }

    fn bands(&self) -> usize {
        3
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Drawn {
        let s = cfg.size;
        let p = &cfg.shape;
        let vegetation = [0.22, 0.58, 0.20];
        let soil = [0.62, 0.50, 0.40];
        let mut bands: Vec<Vec<f64>> = vegetation
            .iter()
            .map(|&b| textured_band(rng, s, b, 0.12))
            .collect();
        let edge = value_noise(rng, s, s, 6);
        let ratio = rng.random_range(p.landslide_eccentricity.0..=p.landslide_eccentricity.1);
        let major = rng.random_range(0.22..0.40) * s as f64;
        let minor = major / ratio;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (cx, cy) = (
            rng.random_range(0.25..0.75) * s as f64,
            rng.random_range(0.25..0.75) * s as f64,
        );
        let mut mask = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * angle.cos() + dy * angle.sin();
                let v = -dx * angle.sin() + dy * angle.cos();
                let r = (u / major).powi(2) + (v / minor).powi(2);
                let i = y * s + x;
                if r < 1.0 + 0.8 * (edge[i] - 0.5) {
                    mask[i] = 1;
                    for (c, band) in bands.iter_mut().enumerate() {
                        band[i] = soil[c] + 0.7 * (band[i] - vegetation[c]);
                    }
                }
            }
        }
        let image = bands.into_iter().flatten().map(clamp01).collect();
        Drawn {
            image,
            mask,
            primitives: vec![Primitive::Region],
        }
    }
}

/// Name-keyed collection of task generators.
#[derive(Clone, Default)]
pub struct GeneratorRegistry {
    entries: BTreeMap<&'static str, Arc<dyn TaskGenerator>>,
}

impl GeneratorRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(BuildingsGenerator));
        r.register(Arc::new(FloodGenerator));
        r.register(Arc::new(FractureGenerator));
        r.register(Arc::new(LandslideGenerator));
        r
    }

    pub fn register(&mut self, generator: Arc<dyn TaskGenerator>) {
        self.entries.insert(generator.kind().name(), generator);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TaskGenerator>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::contract("generator_registry", format!("no generator named {name:?}"))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub fn default_generators() -> &'static GeneratorRegistry {
    static REGISTRY: OnceLock<GeneratorRegistry> = OnceLock::new();
    REGISTRY.get_or_init(GeneratorRegistry::with_defaults)
}
