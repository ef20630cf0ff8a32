//! The synthetic circles dataset: generation, rendering, interpolation and
//! the on-disk format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CIRCLES: usize = 10;
pub const DATASET_VERSION: u32 = 1;
pub const IMAGES_MAGIC: &[u8; 8] = b"SRNIMG01";
const HEADER_LEN: usize = 24;
const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Named colors at full intensity.
pub const DEFAULT_PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f32; 3],
}

impl Circle {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }

    pub fn inside_image(&self, size: usize) -> bool {
        let s = size as f64;
        self.radius > 0.0 && self.radius <= self.cx.min(self.cy).min(s - self.cx).min(s - self.cy)
    }

    pub fn overlaps(&self, other: &Circle) -> bool {
        let d = ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt();
        d < self.radius + other.radius
    }

    /// Palette name of the color, or `rgb(r,g,b)`.
    pub fn color_name(&self) -> String {
        DEFAULT_PALETTE
            .iter()
            .find(|(_, c)| *c == self.color)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| format!("rgb({},{},{})", self.color[0], self.color[1], self.color[2]))
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> [f64; 4] {
        [self.cx - self.radius, self.cy - self.radius, self.cx + self.radius, self.cy + self.radius]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleScene {
    pub image_size: usize,
    pub circles: Vec<Circle>,
}

impl CircleScene {
    pub fn empty(image_size: usize) -> Self {
        CircleScene { image_size, circles: Vec::new() }
    }

    /// Every circle inside the image, same-color circles disjoint, at most
    /// [`MAX_CIRCLES`] circles.
    pub fn validate(&self) -> Result<()> {
        if self.circles.len() > MAX_CIRCLES {
            return Err(Error::Config(format!("scene has {} circles (max {})", self.circles.len(), MAX_CIRCLES)));
        }
        for (i, c) in self.circles.iter().enumerate() {
            if !c.inside_image(self.image_size) {
                return Err(Error::Config(format!("circle {} is not contained in the image: {:?}", i, c)));
            }
            for (j, o) in self.circles[..i].iter().enumerate() {
                if o.color == c.color && c.overlaps(o) {
                    return Err(Error::Config(format!("same-color circles {} and {} overlap", j, i)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_circles: usize,
    pub max_circles: usize,
    pub radius_range: (f64, f64),
    pub palette: Vec<[f32; 3]>,
    pub image_size: usize,
}

impl SceneConfig {
    /// 1 to 5 circles, radii `[5, 12]` pixels at 64x64 scaled to `image_size`.
    pub fn for_size(image_size: usize) -> Self {
        let scale = image_size as f64 / 64.0;
        SceneConfig {
            min_circles: 1,
            max_circles: 5,
            radius_range: (5.0 * scale, 12.0 * scale),
            palette: DEFAULT_PALETTE.iter().map(|(_, c)| *c).collect(),
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        if self.min_circles > self.max_circles || self.max_circles > MAX_CIRCLES {
            return Err(Error::Config(format!(
                "circle count range [{}, {}] invalid (max {})",
                self.min_circles, self.max_circles, MAX_CIRCLES
            )));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("radius range ({}, {}) invalid", lo, hi)));
        }
        if lo > self.image_size as f64 / 2.0 {
            return Err(Error::Config(format!(
                "minimum radius {} does not fit a {}x{} image",
                lo, self.image_size, self.image_size
            )));
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::for_size(64)
    }
}

/// Seed of scene `index` under `master`; scenes can be generated in any order.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(index))
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<CircleScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_circles..=cfg.max_circles);
    let size = cfg.image_size as f64;
    let (rlo, rhi) = cfg.radius_range;
    let rhi = rhi.min(size / 2.0);
    let mut circles: Vec<Circle> = Vec::with_capacity(count);
    for _ in 0..count {
        let color = cfg.palette[rng.gen_range(0..cfg.palette.len())];
        let radius = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.gen_range(radius..=size - radius);
            let cy = rng.gen_range(radius..=size - radius);
            let c = Circle { cx, cy, radius, color };
            if circles.iter().all(|o| o.color != color || !c.overlaps(o)) {
                circles.push(c);
                break;
            }
        }
    }
    Ok(CircleScene { image_size: cfg.image_size, circles })
}

/// Renders a scene into a `3 x H x W` image on black, later circles drawn
/// over earlier ones, with 4x4 supersampled coverage.
pub fn render(scene: &CircleScene) -> Tensor<f32> {
    let size = scene.image_size;
    let fine = size * SUPERSAMPLE;
    let mut owner: Vec<u8> = vec![u8::MAX; fine * fine];
    for (ci, c) in scene.circles.iter().enumerate() {
        let to_fine = |v: f64| (v * SUPERSAMPLE as f64).floor();
        let x0 = to_fine(c.cx - c.radius).max(0.0) as usize;
        let y0 = to_fine(c.cy - c.radius).max(0.0) as usize;
        let x1 = (to_fine(c.cx + c.radius) as usize + 1).min(fine);
        let y1 = (to_fine(c.cy + c.radius) as usize + 1).min(fine);
        for sy in y0..y1 {
            let y = (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            for sx in x0..x1 {
                let x = (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                if c.contains(x, y) {
                    owner[sy * fine + sx] = ci as u8;
                }
            }
        }
    }
    let mut img = Tensor::zeros(&[3, size, size]);
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let data = img.data_mut();
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let o = owner[(py * SUPERSAMPLE + sy) * fine + px * SUPERSAMPLE + sx];
                    if o != u8::MAX {
                        let col = scene.circles[o as usize].color;
                        for ch in 0..3 {
                            acc[ch] += col[ch];
                        }
                    }
                }
            }
            for ch in 0..3 {
                data[(ch * size + py) * size + px] = (acc[ch] * norm).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Linear interpolation of centers and radii between matched scenes.
pub fn interpolate_scenes(a: &CircleScene, b: &CircleScene, t: f64) -> Result<CircleScene> {
    if a.circles.len() != b.circles.len() || a.image_size != b.image_size {
        return Err(Error::Config(format!(
            "cannot interpolate a {}-circle scene into a {}-circle scene",
            a.circles.len(),
            b.circles.len()
        )));
    }
    if let Some(i) = a.circles.iter().zip(&b.circles).position(|(p, q)| p.color != q.color) {
        return Err(Error::Config(format!("circle {} changes color between endpoints", i)));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation parameter {} outside [0, 1]", t)));
    }
    let lerp = |p: f64, q: f64| if t == 1.0 { q } else { p + (q - p) * t };
    let circles = a
        .circles
        .iter()
        .zip(&b.circles)
        .map(|(p, q)| Circle {
            cx: lerp(p.cx, q.cx),
            cy: lerp(p.cy, q.cy),
            radius: lerp(p.radius, q.radius),
            color: p.color,
        })
        .collect();
    Ok(CircleScene { image_size: a.image_size, circles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub count: usize,
    pub master_seed: u64,
    pub scenes: Vec<CircleScene>,
}

/// Scenes plus their rendered images, `N x 3 x H x W` flattened.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<f32>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<f32>) -> Result<Self> {
        let per = 3 * manifest.image_size * manifest.image_size;
        if manifest.count != manifest.scenes.len() || images.len() != manifest.count * per {
            return Err(Error::Config(format!(
                "dataset count {} does not match {} scenes / {} image values",
                manifest.count,
                manifest.scenes.len(),
                images.len()
            )));
        }
        Ok(Dataset { manifest, images })
    }

    /// Generates `count` scenes from `master_seed` and renders them.
    pub fn generate(master_seed: u64, count: usize, cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let scenes = (0..count)
            .into_par_iter()
            .map(|i| generate_scene(scene_seed(master_seed, i as u64), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scenes(master_seed, cfg.image_size, scenes))
    }

    pub fn from_scenes(master_seed: u64, image_size: usize, scenes: Vec<CircleScene>) -> Self {
        let rendered: Vec<Tensor<f32>> = scenes.par_iter().map(render).collect();
        let mut images = Vec::with_capacity(scenes.len() * 3 * image_size * image_size);
        for r in rendered {
            images.extend(r.into_data());
        }
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            image_size,
            count: scenes.len(),
            master_seed,
            scenes,
        };
        Dataset { manifest, images }
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.batch(&[i]).reshape(&[3, self.image_size(), self.image_size()]).expect("image shape")
    }

    /// Stacks the given images into `B x 3 x H x W`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.image_size();
        let per = 3 * s * s;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), 3, s, s], data).expect("batch shape")
    }

    /// Training indices and validation indices (the last tenth by index).
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let val = n / 10;
        ((0..n - val).collect(), (n - val..n).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(dir, &self.manifest, &self.images)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_dataset(dir)
    }
}

/// Writes `manifest.json` and `images.bin` into `dir`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, images: &[f32]) -> Result<()> {
    let s = manifest.image_size;
    if manifest.count != manifest.scenes.len() || images.len() != manifest.count * 3 * s * s {
        return Err(Error::Config(format!(
            "manifest count {} does not match {} scenes and {} image values",
            manifest.count,
            manifest.scenes.len(),
            images.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let ipath = dir.join("images.bin");
    let mut buf = Vec::with_capacity(HEADER_LEN + images.len() * 4);
    buf.extend_from_slice(IMAGES_MAGIC);
    for v in [manifest.count, 3, s, s] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(&ipath).map_err(|e| Error::io(&ipath, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&ipath, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported dataset version {} (expected {})", manifest.version, DATASET_VERSION),
        ));
    }
    if manifest.count != manifest.scenes.len() {
        return Err(Error::format(
            &mpath,
            format!("count {} but {} scenes listed", manifest.count, manifest.scenes.len()),
        ));
    }

    let ipath = dir.join("images.bin");
    let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(&ipath, format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..8] != IMAGES_MAGIC {
        let off = bytes[..8].iter().zip(IMAGES_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::format(&ipath, format!("bad magic at offset {}", off)));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w) = (word(0), word(1), word(2), word(3));
    if c != 3 || h != manifest.image_size || w != manifest.image_size || n != manifest.count {
        return Err(Error::format(
            &ipath,
            format!(
                "header {}x{}x{}x{} does not match manifest ({} images of {}x{})",
                n, c, h, w, manifest.count, manifest.image_size, manifest.image_size
            ),
        ));
    }
    let expected = HEADER_LEN + n * c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &ipath,
            format!("payload is {} bytes, expected {} (truncated at offset {})", bytes.len(), expected, bytes.len()),
        ));
    }
    let images = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(manifest, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red(cx: f64, cy: f64, r: f64) -> Circle {
        Circle { cx, cy, radius: r, color: [1.0, 0.0, 0.0] }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        assert_ne!(generate_scene(42, &cfg).unwrap(), generate_scene(43, &cfg).unwrap());
    }

    #[test]
    fn zero_count_gives_empty_scene() {
        let cfg = SceneConfig { min_circles: 0, max_circles: 0, ..SceneConfig::default() };
        assert!(generate_scene(1, &cfg).unwrap().circles.is_empty());
    }

    #[test]
    fn impossible_config_rejected() {
        let cfg = SceneConfig { radius_range: (40.0, 50.0), ..SceneConfig::default() };
        assert!(generate_scene(1, &cfg).is_err());
        let cfg = SceneConfig { palette: vec![], ..SceneConfig::default() };
        assert!(generate_scene(1, &cfg).is_err());
    }

    #[test]
    fn empty_scene_renders_black() {
        let img = render(&CircleScene::empty(32));
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_red_circle_pixels() {
        let scene = CircleScene { image_size: 64, circles: vec![red(32.0, 32.0, 10.0)] };
        let img = render(&scene);
        let px = |ch: usize, y: usize, x: usize| img.data()[(ch * 64 + y) * 64 + x];
        assert_eq!((px(0, 32, 32), px(1, 32, 32), px(2, 32, 32)), (1.0, 0.0, 0.0));
        assert_eq!((px(0, 0, 0), px(1, 0, 0), px(2, 0, 0)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rendered_area_matches_analytic() {
        let scene = CircleScene { image_size: 64, circles: vec![red(31.3, 30.7, 10.0)] };
        let img = render(&scene);
        let area: f64 = img.data()[..64 * 64].iter().map(|&v| v as f64).sum();
        let exact = std::f64::consts::PI * 100.0;
        assert!((area - exact).abs() / exact < 0.03, "{area} vs {exact}");
    }

    #[test]
    fn later_circle_wins() {
        let blue = Circle { color: [0.0, 0.0, 1.0], ..red(20.0, 20.0, 8.0) };
        let scene = CircleScene { image_size: 64, circles: vec![red(20.0, 20.0, 8.0), blue] };
        let img = render(&scene);
        assert_eq!(img.data()[20 * 64 + 20], 0.0);
        assert_eq!(img.data()[(2 * 64 + 20) * 64 + 20], 1.0);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = CircleScene { image_size: 64, circles: vec![red(10.0, 30.0, 6.0)] };
        let b = CircleScene { image_size: 64, circles: vec![red(30.0, 30.0, 8.0)] };
        assert_eq!(interpolate_scenes(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_scenes(&a, &b, 1.0).unwrap(), b);
        let m = interpolate_scenes(&a, &b, 0.5).unwrap();
        assert_eq!(m.circles[0].cx, 20.0);
        assert_eq!(m.circles[0].radius, 7.0);
        let c = CircleScene { image_size: 64, circles: vec![] };
        assert!(interpolate_scenes(&a, &c, 0.5).is_err());
    }
}
