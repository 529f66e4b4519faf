//! Deterministic generator of a desk-scale segmentation world.
//!
//! Trained classes are background plus circles, squares and triangles. Diamonds
//! are the proxy anomalies available at training time ("known unknowns"); crosses
//! are the held-out anomalies that only show up in test and novel scenes.
//!
//! Proxy scenes are out-of-distribution as a whole: background and diamonds get
//! random colors away from every trained class color, and the label mask is
//! entirely void.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, LabelMap, IGNORE_LABEL};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensorio::{read_tensor, write_tensor, DatasetManifest, Record, Split};

pub const SCENE_SIZE: usize = 64;

/// Mean colors of background, circle, square, triangle.
pub const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.30, 0.40, 0.30],
    [0.80, 0.25, 0.25],
    [0.25, 0.35, 0.80],
    [0.75, 0.30, 0.65],
];
pub const ANOMALY_COLOR: [f64; 3] = [0.15, 0.85, 0.80];
pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// Proxy colors come from a foreign region of high green that no trained
/// class reaches even after jitter and noise.
const PROXY_MIN_GREEN: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    /// Shapes of the trained foreground classes, indexed by `class - 1`.
    pub const TRAINED: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Analytic membership test at offset (dy, dx) from the center for size r.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy <= 0.8 * r && dy >= -r + 1.8 * dx.abs(),
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Cross => {
                (dx.abs() <= r && dy.abs() <= r / 3.0) || (dy.abs() <= r && dx.abs() <= r / 3.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Trained class count S, background included (2..=4).
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub proxy_shape: Shape,
    pub anomaly_shape: Shape,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_sigma: f64,
    pub color_jitter: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            height: SCENE_SIZE,
            width: SCENE_SIZE,
            proxy_shape: Shape::Diamond,
            anomaly_shape: Shape::Cross,
            min_shapes: 1,
            max_shapes: 3,
            noise_sigma: 0.05,
            color_jitter: 0.15,
            min_radius: 7.0,
            max_radius: 12.0,
        }
    }
}

impl WorldConfig {
    pub fn trained_shapes(&self) -> &[Shape] {
        &Shape::TRAINED[..self.classes - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.classes) {
            return Err(Error::InvalidArgument(format!("classes must be 2..=4, got {}", self.classes)));
        }
        let trained = self.trained_shapes();
        if trained.contains(&self.proxy_shape) {
            return Err(Error::InvalidArgument("proxy shape is a trained shape".into()));
        }
        if trained.contains(&self.anomaly_shape) || self.anomaly_shape == self.proxy_shape {
            return Err(Error::InvalidArgument("anomaly shape overlaps trained or proxy shapes".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("need 1 <= min_shapes <= max_shapes".into()));
        }
        let span = 2.0 * self.max_radius + 6.0;
        if span > self.height.min(self.width) as f64 {
            return Err(Error::InvalidArgument("shapes do not fit the scene".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: Image,
    /// Trained class per pixel, [`IGNORE_LABEL`] on boundary rings and unknown objects.
    pub mask: LabelMap,
    /// 0 = normal, 1 = held-out anomaly, 255 = boundary ring of an anomaly.
    pub anomaly_mask: LabelMap,
    pub split: Split,
    pub seed: u64,
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169,
        Split::ProxyAnom => 0x7072_6f78,
        Split::Test => 0x7465_7374,
        Split::Novel => 0x6e6f_7665,
    }
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(base, split_tag(split)), index as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Class(u8),
    Proxy,
    Anomaly,
}

struct Placed {
    shape: Shape,
    role: Role,
    color: [f64; 3],
    cy: f64,
    cx: f64,
    r: f64,
}

fn jittered(rng: &mut SplitMix64, base: [f64; 3], jitter: f64) -> [f64; 3] {
    base.map(|c| (c + rng.uniform(-jitter, jitter)).clamp(0.0, 1.0))
}

fn proxy_color(rng: &mut SplitMix64) -> [f64; 3] {
    [rng.next_f64(), rng.uniform(PROXY_MIN_GREEN, 1.0), rng.next_f64()]
}

/// Instance id per pixel: 0 = background, i + 1 = `placed[i]`. Later shapes occlude earlier ones.
fn instance_map(placed: &[Placed], h: usize, w: usize) -> Vec<usize> {
    let mut instance = vec![0usize; h * w];
    for (id, p) in placed.iter().enumerate() {
        for row in 0..h {
            for col in 0..w {
                if p.shape.contains(row as f64 - p.cy, col as f64 - p.cx, p.r) {
                    instance[row * w + col] = id + 1;
                }
            }
        }
    }
    instance
}

/// Background color and shape placements; the returned rng continues into pixel noise.
fn layout(config: &WorldConfig, seed: u64, split: Split) -> (SplitMix64, [f64; 3], Vec<Placed>) {
    let (h, w) = (config.height, config.width);
    let mut rng = SplitMix64::new(derive_seed(seed, split_tag(split)));

    let background = match split {
        Split::ProxyAnom => proxy_color(&mut rng),
        _ => jittered(&mut rng, CLASS_COLORS[0], config.color_jitter),
    };

    let mut placed = Vec::new();
    let mut place = |rng: &mut SplitMix64, shape: Shape, role: Role, color: [f64; 3]| {
        let r = rng.uniform(config.min_radius, config.max_radius);
        let margin = r + 2.0;
        let cy = rng.uniform(margin, h as f64 - margin - 1.0);
        let cx = rng.uniform(margin, w as f64 - margin - 1.0);
        placed.push(Placed { shape, role, color, cy, cx, r });
    };

    let count = config.min_shapes + rng.below(config.max_shapes - config.min_shapes + 1);
    match split {
        Split::ProxyAnom => {
            for _ in 0..count {
                let color = proxy_color(&mut rng);
                place(&mut rng, config.proxy_shape, Role::Proxy, color);
            }
        }
        _ => {
            let trained = config.trained_shapes();
            for _ in 0..count {
                let k = rng.below(trained.len());
                let color = jittered(&mut rng, CLASS_COLORS[k + 1], config.color_jitter);
                place(&mut rng, trained[k], Role::Class(k as u8 + 1), color);
            }
            if matches!(split, Split::Test | Split::Novel) {
                // Drawn last so the held-out object is never occluded.
                let color = jittered(&mut rng, ANOMALY_COLOR, config.color_jitter);
                place(&mut rng, config.anomaly_shape, Role::Anomaly, color);
            }
        }
    }
    (rng, background, placed)
}

/// Generate one scene. Pure function of `(config, seed, split)`.
pub fn generate_scene(config: &WorldConfig, seed: u64, split: Split) -> Result<LabeledScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let (mut rng, background, placed) = layout(config, seed, split);
    let instance = instance_map(&placed, h, w);

    // 1-pixel dilation ring around every visible shape
    let mut ring = vec![false; h * w];
    let mut anomaly_ring = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let id = instance[row * w + col];
            if id == 0 {
                continue;
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if instance[j] != id {
                        ring[j] = true;
                        if placed[id - 1].role == Role::Anomaly {
                            anomaly_ring[j] = true;
                        }
                    }
                }
            }
        }
    }

    let mut image = Grid::zeros(h, w, 3);
    let mut mask = vec![0u8; h * w];
    let mut anomaly = vec![0u8; h * w];
    for i in 0..h * w {
        let id = instance[i];
        let (color, role) = if id == 0 {
            (background, if split == Split::ProxyAnom { Role::Proxy } else { Role::Class(0) })
        } else {
            (placed[id - 1].color, placed[id - 1].role)
        };
        for (c, &base) in color.iter().enumerate() {
            image.data[i * 3 + c] = (base + config.noise_sigma * rng.gaussian()).clamp(0.0, 1.0);
        }
        mask[i] = match role {
            Role::Class(k) if !ring[i] => k,
            _ => IGNORE_LABEL,
        };
        anomaly[i] = match role {
            Role::Anomaly => 1,
            _ if anomaly_ring[i] => IGNORE_LABEL,
            _ => 0,
        };
    }

    Ok(LabeledScene {
        image,
        mask: LabelMap::from_vec(h, w, mask)?,
        anomaly_mask: LabelMap::from_vec(h, w, anomaly)?,
        split,
        seed,
    })
}

pub fn generate_split(config: &WorldConfig, base_seed: u64, split: Split, count: usize) -> Result<Vec<LabeledScene>> {
    (0..count)
        .map(|i| generate_scene(config, scene_seed(base_seed, split, i), split))
        .collect()
}

/// Write scenes as tensors under `dir` and return the manifest describing them
/// (paths relative to `dir`).
pub fn save_scenes(dir: &Path, scenes: &[LabeledScene], class_names: Vec<String>) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("{}_{i:05}", scene.split);
        let image = format!("{stem}_image.ant");
        let label = format!("{stem}_label.ant");
        let anomaly = format!("{stem}_anomaly.ant");
        write_tensor(dir.join(&image), &scene.image.to_tensor())?;
        write_tensor(dir.join(&label), &scene.mask.to_tensor())?;
        write_tensor(dir.join(&anomaly), &scene.anomaly_mask.to_tensor())?;
        records.push(Record {
            image: image.into(),
            label: label.into(),
            anomaly: Some(anomaly.into()),
            split: scene.split,
            seed: scene.seed,
        });
    }
    Ok(DatasetManifest { records, class_names, roi: None, base_dir: dir.to_path_buf() })
}

pub fn load_scene(manifest: &DatasetManifest, record: &Record) -> Result<LabeledScene> {
    let image = Grid::from_tensor(&read_tensor(manifest.resolve(&record.image))?)?;
    let mask = LabelMap::from_tensor(&read_tensor(manifest.resolve(&record.label))?)?;
    let anomaly_mask = match &record.anomaly {
        Some(p) => LabelMap::from_tensor(&read_tensor(manifest.resolve(p))?)?,
        None => LabelMap::filled(mask.height, mask.width, 0),
    };
    if !image.same_plane(&Grid::zeros(mask.height, mask.width, 1)) || anomaly_mask.data.len() != mask.data.len() {
        return Err(Error::ShapeMismatch(format!("scene {} has misaligned tensors", record.image.display())));
    }
    Ok(LabeledScene { image, mask, anomaly_mask, split: record.split, seed: record.seed })
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LabeledScene>> {
    manifest.records_in(split).map(|r| load_scene(manifest, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn deterministic_in_seed_and_split() {
        let a = generate_scene(&cfg(), 7, Split::Train).unwrap();
        let b = generate_scene(&cfg(), 7, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg(), 7, Split::Test).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn train_scenes_have_no_anomalies() {
        for s in generate_split(&cfg(), 1, Split::Train, 30).unwrap() {
            assert!(s.anomaly_mask.data.iter().all(|&v| v == 0));
            assert!(s.mask.data.iter().all(|&v| v < 4 || v == IGNORE_LABEL));
            assert!(s.mask.data.iter().any(|&v| v != 0 && v != IGNORE_LABEL));
        }
    }

    #[test]
    fn test_scenes_always_contain_anomaly() {
        for s in generate_split(&cfg(), 2, Split::Test, 30).unwrap() {
            assert!(s.anomaly_mask.data.iter().any(|&v| v == 1));
            // anomaly pixels never carry a trained label
            for (a, m) in s.anomaly_mask.data.iter().zip(&s.mask.data) {
                if *a == 1 {
                    assert_eq!(*m, IGNORE_LABEL);
                }
            }
        }
    }

    #[test]
    fn anomaly_fraction_regression_bound() {
        let scenes = generate_split(&cfg(), 3, Split::Test, 100).unwrap();
        let total: usize = scenes.iter().map(|s| s.anomaly_mask.pixels()).sum();
        let anomalous: usize =
            scenes.iter().map(|s| s.anomaly_mask.data.iter().filter(|&&v| v == 1).count()).sum();
        let frac = anomalous as f64 / total as f64;
        assert!(frac > 0.0 && frac < 0.3, "fraction {frac}");
    }

    #[test]
    fn proxy_scenes_contain_proxy_shape_only() {
        for s in generate_split(&cfg(), 4, Split::ProxyAnom, 20).unwrap() {
            assert!(s.mask.data.iter().all(|&v| v == IGNORE_LABEL));
            assert!(s.anomaly_mask.data.iter().all(|&v| v == 0));
            // at least two distinct colors: background plus a diamond
            let first = &s.image.data[..3];
            let distinct = s.image.data.chunks(3).any(|p| {
                p.iter().zip(first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 0.35
            });
            assert!(distinct);
        }
    }

    #[test]
    fn novel_scenes_mix_trained_and_anomaly() {
        for s in generate_split(&cfg(), 5, Split::Novel, 20).unwrap() {
            assert!(s.anomaly_mask.data.iter().any(|&v| v == 1));
            assert!(s.mask.data.iter().any(|&v| (1..4).contains(&v)));
        }
    }

    #[test]
    fn images_clipped_to_unit_interval() {
        for split in Split::ALL {
            let s = generate_scene(&cfg(), 9, split).unwrap();
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ignore_exactly_on_dilation_rings() {
        // a pixel is void iff it is not background-or-shape interior, i.e. some
        // 8-neighbor belongs to a different, non-background instance
        let c = cfg();
        for i in 0..10 {
            let seed = scene_seed(6, Split::Train, i);
            let s = generate_scene(&c, seed, Split::Train).unwrap();
            let (_, _, placed) = layout(&c, seed, Split::Train);
            let inst = instance_map(&placed, c.height, c.width);
            let (h, w) = (c.height as i64, c.width as i64);
            for r in 0..h {
                for col in 0..w {
                    let me = inst[(r * w + col) as usize];
                    let mut ring = false;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let (rr, cc) = (r + dr, col + dc);
                            if rr >= 0 && cc >= 0 && rr < h && cc < w {
                                let other = inst[(rr * w + cc) as usize];
                                ring |= other != 0 && other != me;
                            }
                        }
                    }
                    assert_eq!(s.mask.get(r as usize, col as usize) == IGNORE_LABEL, ring, "({r},{col})");
                }
            }
        }
    }

    #[test]
    fn nearest_color_baseline_is_imperfect() {
        let scenes = generate_split(&cfg(), 8, Split::Train, 20).unwrap();
        let (mut correct, mut total) = (0usize, 0usize);
        for s in &scenes {
            for (i, &label) in s.mask.data.iter().enumerate() {
                if label == IGNORE_LABEL {
                    continue;
                }
                let px = s.image.pixel(i);
                let nearest = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = CLASS_COLORS[a].iter().zip(px).map(|(m, x)| (m - x).powi(2)).sum();
                        let db: f64 = CLASS_COLORS[b].iter().zip(px).map(|(m, x)| (m - x).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                total += 1;
                correct += (nearest == label as usize) as usize;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc < 1.0, "nearest-color accuracy {acc}");
        assert!(acc > 0.9, "world should still be learnable, accuracy {acc}");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.proxy_shape = Shape::Circle;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.anomaly_shape = Shape::Diamond;
        assert!(c.validate().is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_split(&cfg(), 10, Split::Test, 3).unwrap();
        let manifest = save_scenes(dir.path(), &scenes, cfg().class_names()).unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let loaded = crate::tensorio::load_manifest(&path).unwrap();
        let back = load_split(&loaded, Split::Test).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].mask, scenes[0].mask);
        assert_eq!(back[0].anomaly_mask, scenes[0].anomaly_mask);
        for (a, b) in back[0].image.data.iter().zip(&scenes[0].image.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
