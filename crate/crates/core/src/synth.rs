//! Procedural grayscale scenes with labelled objects.
//!
//! Every class is drawn as a base shape chosen by its similarity group
//! (rectangle, ellipse, cross, diamond) and a variant chosen by its position
//! inside the group (filled, hollow, dim filled, dim hollow). Classes of one
//! group therefore share an outline and differ only in fill, which makes them
//! confusable on purpose. Scenes are a pure function of the config and the
//! per-scene seed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::{ClassId, GroundTruth};
use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};
use crate::features::GrayImage;

pub const MANIFEST_FORMAT: &str = "gcnn-dataset";
pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_DUMP_MAGIC: &[u8; 8] = b"GCNNIMG\0";
const IMAGE_DUMP_VERSION: u32 = 1;

/// Scene ids of the test split start here so the two splits never share a
/// scene regardless of their sizes.
pub const TEST_SCENE_ID_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: u32,
    /// Inclusive `[min, max]` object count per scene.
    pub objects_per_scene: [usize; 2],
    /// Object side length as a fraction of the image side, `[min, max]`.
    pub size_range: [f64; 2],
    pub noise_sigma: f64,
    /// Partition of `1..=num_classes`.
    pub similarity_groups: Vec<Vec<u32>>,
    pub max_gt_overlap: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_classes: 4,
            objects_per_scene: [1, 3],
            size_range: [0.1, 0.5],
            noise_sigma: 0.05,
            similarity_groups: vec![vec![1, 2], vec![3, 4]],
            max_gt_overlap: 0.3,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("need at least one class".into());
        }
        let [lo, hi] = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_scene {lo}..{hi} must satisfy 1 <= min <= max"));
        }
        let [smin, smax] = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return bad(format!("size_range [{smin}, {smax}] must satisfy 0 < min <= max <= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.max_gt_overlap) {
            return bad("max_gt_overlap must lie in [0, 1]".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries must be >= 1".into());
        }
        validate_groups(&self.similarity_groups, self.num_classes)
    }

    /// `(group index, position inside the group)` of a class.
    pub fn group_of(&self, class: ClassId) -> Option<(usize, usize)> {
        self.similarity_groups.iter().enumerate().find_map(|(g, members)| {
            members.iter().position(|&c| c == class.0).map(|m| (g, m))
        })
    }

    pub fn class_style(&self, class: ClassId) -> ShapeStyle {
        let (g, m) = self.group_of(class).unwrap_or((class.index(), 0));
        let kind = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Cross, ShapeKind::Diamond][g % 4];
        let (hollow, intensity) = [(false, 0.9), (true, 0.9), (false, 0.6), (true, 0.6)][m % 4];
        ShapeStyle { kind, hollow, intensity }
    }
}

pub(crate) fn validate_groups(groups: &[Vec<u32>], num_classes: u32) -> Result<()> {
    let mut seen = vec![false; num_classes as usize + 1];
    for &c in groups.iter().flatten() {
        if c == 0 || c > num_classes {
            return Err(Error::InvalidSimilarityGroups(format!("class {c} outside 1..={num_classes}")));
        }
        if std::mem::replace(&mut seen[c as usize], true) {
            return Err(Error::InvalidSimilarityGroups(format!("class {c} appears twice")));
        }
    }
    if let Some(missing) = (1..=num_classes).find(|&c| !seen[c as usize]) {
        return Err(Error::InvalidSimilarityGroups(format!("class {missing} is in no group")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStyle {
    pub kind: ShapeKind,
    pub hollow: bool,
    pub intensity: f64,
}

impl ShapeStyle {
    /// Whether the point `(u, v)` in box-normalized coordinates `[-1, 1]^2`
    /// is painted. `border_u`/`border_v` are the hollow border thickness in
    /// the same units.
    fn covers(&self, u: f64, v: f64, border_u: f64, border_v: f64) -> bool {
        let inside = |u: f64, v: f64| match self.kind {
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Cross => (u.abs() <= 1.0 / 3.0 && v.abs() <= 1.0) || (v.abs() <= 1.0 / 3.0 && u.abs() <= 1.0),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        };
        if !inside(u, v) {
            return false;
        }
        if !self.hollow {
            return true;
        }
        // hollow: painted unless the point is inside the shrunken shape
        let (su, sv) = (1.0 - border_u, 1.0 - border_v);
        if su <= 0.0 || sv <= 0.0 {
            return true;
        }
        match self.kind {
            ShapeKind::Cross => {
                let t_u = 1.0 / 3.0 - border_u;
                let t_v = 1.0 / 3.0 - border_v;
                if t_u <= 0.0 || t_v <= 0.0 {
                    return true;
                }
                let inner = (u.abs() <= t_u && v.abs() <= sv) || (v.abs() <= t_v && u.abs() <= su);
                !inner
            }
            _ => !inside(u / su, v / sv),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub gts: Vec<GroundTruth>,
    pub scene_id: u64,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: u64) -> u64 {
    splitmix64(base ^ splitmix64(label))
}

pub fn scene_seed(config: &SynthConfig, scene_id: u64) -> u64 {
    derive_seed(config.seed, scene_id)
}

pub fn generate_scene(config: &SynthConfig, scene_id: u64) -> Result<Scene> {
    render_scene(config, scene_id, scene_seed(config, scene_id))
}

/// Render the scene for an explicit per-scene seed.
pub fn render_scene(config: &SynthConfig, scene_id: u64, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let (wf, hf) = (w as f64, h as f64);

    // low-frequency texture in [0.1, 0.3]
    let fx = rng.random_range(0.5..2.5);
    let fy = rng.random_range(0.5..2.5);
    let px = rng.random_range(0.0..std::f64::consts::TAU);
    let py = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (std::f64::consts::TAU * fy * (y as f64 + 0.5) / hf + py).sin();
        for x in 0..w {
            let sx = (std::f64::consts::TAU * fx * (x as f64 + 0.5) / wf + px).sin();
            data.push(0.2 + 0.1 * sx * sy);
        }
    }

    let n_objects = rng.random_range(config.objects_per_scene[0]..=config.objects_per_scene[1]);
    let [smin, smax] = config.size_range;
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(n_objects);
    for object in 0..n_objects {
        let class = ClassId(rng.random_range(1..=config.num_classes));
        let mut placed = None;
        for _ in 0..config.max_retries {
            let bw = rng.random_range(smin..=smax) * wf;
            let bh = rng.random_range(smin..=smax) * hf;
            let x0 = rng.random_range(0.0..=(wf - bw));
            let y0 = rng.random_range(0.0..=(hf - bh));
            let candidate = BBox::from_corners(x0, y0, x0 + bw, y0 + bh)?;
            if gts.iter().all(|g| iou(&g.bbox, &candidate) <= config.max_gt_overlap) {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or(Error::PlacementFailure { scene_id, object, retries: config.max_retries })?;
        paint(&mut data, w, h, &bbox, config.class_style(class));
        gts.push(GroundTruth::new(bbox, class)?);
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Scene { image: GrayImage::new(w, h, data)?, gts, scene_id, seed })
}

fn paint(data: &mut [f64], w: usize, h: usize, bbox: &BBox, style: ShapeStyle) {
    let (x1, y1, x2, y2) = bbox.corners();
    let (hw, hh) = (0.5 * bbox.w(), 0.5 * bbox.h());
    let border = (0.2 * bbox.w().min(bbox.h())).max(2.0);
    let (bu, bv) = (border / hw, border / hh);
    let xs = (x1.floor().max(0.0) as usize)..(x2.ceil() as usize).min(w);
    let ys = (y1.floor().max(0.0) as usize)..(y2.ceil() as usize).min(h);
    for y in ys {
        let v = (y as f64 + 0.5 - bbox.cy()) / hh;
        for x in xs.clone() {
            let u = (x as f64 + 0.5 - bbox.cx()) / hw;
            if style.covers(u, v, bu, bv) {
                data[y * w + x] = style.intensity;
            }
        }
    }
}

/// Scenes `first_id .. first_id + n`.
pub fn generate_range(config: &SynthConfig, first_id: u64, n: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset must contain at least one scene".into()));
    }
    (0..n as u64).map(|i| generate_scene(config, first_id + i)).collect()
}

pub fn generate_dataset(config: &SynthConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    generate_range(config, 0, n_scenes)
}

pub fn image_checksum(image: &GrayImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update((image.width() as u64).to_le_bytes());
    hasher.update((image.height() as u64).to_le_bytes());
    for v in image.data() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub seed: u64,
    pub image_sha256: String,
    pub gts: Vec<GroundTruth>,
}

/// Everything needed to regenerate a split procedurally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub config: SynthConfig,
    /// File name of an optional flat image dump next to the manifest.
    pub image_dump: Option<String>,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn from_scenes(split: &str, config: &SynthConfig, scenes: &[Scene], image_dump: Option<String>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            split: split.into(),
            config: config.clone(),
            image_dump,
            scenes: scenes
                .iter()
                .map(|s| SceneRecord {
                    scene_id: s.scene_id,
                    seed: s.seed,
                    image_sha256: image_checksum(&s.image),
                    gts: s.gts.clone(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Malformed { what: "dataset manifest", line: 1, reason: format!("format {:?}", manifest.format) });
        }
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion { what: "dataset manifest", found: manifest.version, expected: MANIFEST_VERSION });
        }
        manifest.config.validate()?;
        Ok(manifest)
    }

    /// Rebuild the scenes, from the image dump when present, otherwise by
    /// regenerating each scene from its seed. Either way the images must
    /// match the stored checksums.
    pub fn load_scenes(&self, manifest_dir: &Path) -> Result<Vec<Scene>> {
        let dumped = match &self.image_dump {
            Some(name) if manifest_dir.join(name).exists() => Some(read_image_dump(&manifest_dir.join(name))?),
            _ => None,
        };
        let mut scenes = Vec::with_capacity(self.scenes.len());
        for (i, rec) in self.scenes.iter().enumerate() {
            let scene = match &dumped {
                Some(images) => {
                    let (id, image) = images.get(i).ok_or_else(|| Error::Malformed {
                        what: "image dump",
                        line: i + 1,
                        reason: "fewer images than manifest scenes".into(),
                    })?;
                    if *id != rec.scene_id {
                        return Err(Error::Malformed { what: "image dump", line: i + 1, reason: format!("scene id {id} != {}", rec.scene_id) });
                    }
                    Scene { image: image.clone(), gts: rec.gts.clone(), scene_id: rec.scene_id, seed: rec.seed }
                }
                None => {
                    let scene = render_scene(&self.config, rec.scene_id, rec.seed)?;
                    if scene.gts != rec.gts {
                        return Err(Error::Malformed { what: "dataset manifest", line: i + 1, reason: format!("ground truth of scene {} does not regenerate", rec.scene_id) });
                    }
                    scene
                }
            };
            let actual = image_checksum(&scene.image);
            if actual != rec.image_sha256 {
                return Err(Error::ChecksumMismatch { scene_id: rec.scene_id, expected: rec.image_sha256.clone(), actual });
            }
            scenes.push(scene);
        }
        Ok(scenes)
    }
}

/// Read a manifest and load its scenes.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let scenes = manifest.load_scenes(&dir)?;
    Ok((manifest, scenes))
}

/// Flat little-endian dump: magic, version, count, width, height, then per
/// scene a `u64` id followed by `width * height` `f64` pixels.
pub fn write_image_dump(path: &Path, scenes: &[Scene]) -> Result<()> {
    let (w, h) = scenes.first().map_or((0, 0), |s| (s.image.width(), s.image.height()));
    let mut buf = Vec::with_capacity(24 + scenes.len() * (8 + 8 * w * h));
    buf.extend_from_slice(IMAGE_DUMP_MAGIC);
    buf.extend_from_slice(&IMAGE_DUMP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    for s in scenes {
        if s.image.width() != w || s.image.height() != h {
            return Err(Error::InvalidConfig("image dump needs equally sized images".into()));
        }
        buf.extend_from_slice(&s.scene_id.to_le_bytes());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_image_dump(path: &Path) -> Result<Vec<(u64, GrayImage)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::Malformed { what: "image dump", line: 0, reason: reason.into() };
    if bytes.len() < 24 || &bytes[..8] != IMAGE_DUMP_MAGIC {
        return Err(malformed("bad header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != IMAGE_DUMP_VERSION {
        return Err(Error::UnsupportedVersion { what: "image dump", found: version, expected: IMAGE_DUMP_VERSION });
    }
    let (count, w, h) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let record = 8 + 8 * w * h;
    if bytes.len() != 24 + count * record {
        return Err(malformed("truncated or oversized payload"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base = 24 + i * record;
        let id = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
        let data = bytes[base + 8..base + record]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, GrayImage::new(w, h, data)?));
    }
    Ok(out)
}
