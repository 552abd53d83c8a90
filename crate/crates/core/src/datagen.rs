//! Procedural multi-domain image classification benchmark.
//!
//! Classes are glyph shapes; domains are rendering styles (palette, texture,
//! contrast, brightness, noise) and, optionally, a geometry shift. Every
//! example draws from its own rng stream derived from
//! `(seed, domain, split, class, index)`, so generation order never changes
//! the bytes written.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MXDS";
pub const FORMAT_VERSION: u32 = 1;
/// Number of distinct glyph shapes available as classes.
pub const MAX_CLASSES: usize = 10;

/// Parametric rendering style of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    /// Sinusoidal overlay frequency in cycles per image (0 disables it).
    pub texture_freq: f64,
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Uniform rotation range in degrees, `[-r, r]`.
    #[serde(default)]
    pub geometry_shift: Option<f64>,
}

fn default_texture_amplitude() -> f64 {
    0.25
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) || !in_unit(&self.foreground) {
            return Err(Error::invalid(format!(
                "domain {}: palette components must lie in [0, 1]",
                self.name
            )));
        }
        if !(self.texture_freq >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "domain {}: texture_freq and noise_sigma must be >= 0",
                self.name
            )));
        }
        if !(self.texture_amplitude >= 0.0) || !self.contrast.is_finite() || !self.brightness.is_finite() {
            return Err(Error::invalid(format!("domain {}: bad tone parameters", self.name)));
        }
        if let Some(r) = self.geometry_shift {
            if !(r >= 0.0) {
                return Err(Error::invalid(format!(
                    "domain {}: geometry_shift must be >= 0",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// The four style domains used by default, plus an optional geometry one.
pub fn default_domains(with_geometry: bool) -> Vec<DomainSpec> {
    let mut d = vec![
        DomainSpec {
            name: "photo".into(),
            background: [0.55, 0.60, 0.66],
            foreground: [0.18, 0.14, 0.10],
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            noise_sigma: 0.04,
            geometry_shift: None,
        },
        DomainSpec {
            name: "cartoon".into(),
            background: [0.95, 0.85, 0.30],
            foreground: [0.10, 0.30, 0.90],
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            contrast: 1.2,
            brightness: 0.0,
            noise_sigma: 0.01,
            geometry_shift: None,
        },
        DomainSpec {
            name: "sketch".into(),
            background: [0.92, 0.92, 0.92],
            foreground: [0.35, 0.35, 0.35],
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            contrast: 1.5,
            brightness: 0.05,
            noise_sigma: 0.02,
            geometry_shift: None,
        },
        DomainSpec {
            name: "art".into(),
            background: [0.30, 0.12, 0.35],
            foreground: [0.90, 0.65, 0.25],
            texture_freq: 5.0,
            texture_amplitude: 0.3,
            contrast: 0.8,
            brightness: 0.0,
            noise_sigma: 0.05,
            geometry_shift: None,
        },
    ];
    if with_geometry {
        d.push(DomainSpec {
            name: "rotated".into(),
            background: [0.55, 0.60, 0.66],
            foreground: [0.18, 0.14, 0.10],
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            noise_sigma: 0.04,
            geometry_shift: Some(90.0),
        });
    }
    d
}

/// Sizes and seed of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: usize,
    pub domains: usize,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    /// `(C, H, W)`.
    pub image_size: [usize; 3],
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("K ≥ 2 required, got K={}", self.classes)));
        }
        if self.classes > MAX_CLASSES {
            return Err(Error::invalid(format!(
                "at most {MAX_CLASSES} glyph classes are available, got K={}",
                self.classes
            )));
        }
        if self.domains < 3 {
            return Err(Error::invalid(format!(
                "D ≥ 3 required for leave-one-domain-out, got D={}",
                self.domains
            )));
        }
        if self.train_per_cell == 0 || self.test_per_cell == 0 {
            return Err(Error::invalid("per-cell counts must be positive"));
        }
        let [c, h, w] = self.image_size;
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::invalid(format!(
                "image size must be 3 x H x W with H, W >= 8, got {:?}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Inside-test for glyph `class` at normalized coordinates in `[-1, 1]^2`.
fn glyph_contains(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r < 0.8,
        1 => u.abs() < 0.68 && v.abs() < 0.68,
        2 => v < 0.7 && v > -0.8 && u.abs() < (v + 0.8) * 0.6,
        3 => (u.abs() < 0.22 && v.abs() < 0.85) || (v.abs() < 0.22 && u.abs() < 0.85),
        4 => ((u - v).abs() < 0.3 || (u + v).abs() < 0.3) && r < 0.95,
        5 => r > 0.5 && r < 0.88,
        6 => u.abs() + v.abs() < 0.9,
        7 => (v.abs() < 0.18 || (v - 0.6).abs() < 0.18 || (v + 0.6).abs() < 0.18) && u.abs() < 0.8,
        8 => (u.abs() < 0.22 && v.abs() < 0.85) || (v > 0.5 && v < 0.85 && u.abs() < 0.8),
        9 => (u > -0.8 && u < -0.4 && v.abs() < 0.85) || (v > 0.45 && v < 0.85 && u > -0.8 && u < 0.75),
        _ => false,
    }
}

const SUPERSAMPLE: usize = 3;

/// Renders one `(3, H, W)` image of glyph `class` in `domain`'s style.
pub fn render_example<R: Rng + ?Sized>(
    class_id: usize,
    domain: &DomainSpec,
    size: [usize; 3],
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if class_id >= MAX_CLASSES {
        return Err(Error::invalid(format!("class {class_id} has no glyph")));
    }
    let [c, h, w] = size;
    if c != 3 {
        return Err(Error::invalid("images are RGB"));
    }
    let extent = h.min(w) as f64;
    // geometry
    let cx = w as f64 / 2.0 + rng.random_range(-0.1..0.1) * extent;
    let cy = h as f64 / 2.0 + rng.random_range(-0.1..0.1) * extent;
    let scale = extent * rng.random_range(0.28..0.36);
    let max_rot = domain.geometry_shift.unwrap_or(8.0).to_radians();
    let rot = if max_rot > 0.0 { rng.random_range(-max_rot..=max_rot) } else { 0.0 };
    let (sr, cr) = rot.sin_cos();
    // per-image palette jitter: sub-styles inside a domain
    let mut jitter = || rng.random_range(-0.06..0.06);
    let bg: Vec<f64> = domain.background.iter().map(|v| v + jitter()).collect();
    let fg: Vec<f64> = domain.foreground.iter().map(|v| v + jitter()).collect();
    let tex_theta = rng.random_range(0.0..std::f64::consts::PI);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut mask = vec![0.0f64; h * w];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                    let u = (cr * px + sr * py) / scale;
                    let v = (-sr * px + cr * py) / scale;
                    if glyph_contains(class_id, u, v) {
                        hits += 1;
                    }
                }
            }
            mask[y * w + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }

    let noise = Normal::new(0.0, domain.noise_sigma.max(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (tc, ts) = (tex_theta.cos(), tex_theta.sin());
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let m = mask[y * w + x];
                let mut v = bg[ch] * (1.0 - m) + fg[ch] * m;
                if domain.texture_freq > 0.0 {
                    let t = (std::f64::consts::TAU * domain.texture_freq * (x as f64 * tc + y as f64 * ts)
                        / extent
                        + tex_phase)
                        .sin();
                    v *= 1.0 + domain.texture_amplitude * t;
                }
                v = (v - 0.5) * domain.contrast + 0.5 + domain.brightness;
                if domain.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&size, out)
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent rng stream for one example.
pub fn example_rng(seed: u64, domain: usize, split: Split, class: usize, index: usize) -> ChaCha8Rng {
    let mut h = mix64(seed);
    for part in [domain as u64, split as u64, class as u64, index as u64] {
        h = mix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// In-memory image collection with per-image metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSet {
    pub size: [usize; 3],
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
    pub labeled: Vec<bool>,
    pixels: Vec<f32>,
}

impl ImageSet {
    pub fn new(size: [usize; 3]) -> Self {
        Self {
            size,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.size.iter().product()
    }

    pub fn push(&mut self, image: &Tensor<f32>, class: usize, domain: usize, labeled: bool) -> Result<()> {
        if image.shape() != self.size {
            return Err(Error::mismatch("image set", &self.size, image.shape()));
        }
        self.pixels.extend_from_slice(image.data());
        self.classes.push(class);
        self.domains.push(domain);
        self.labeled.push(labeled);
        Ok(())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_tensor<S: Scalar>(&self, i: usize) -> Tensor<S> {
        Tensor::from_vec(&self.size, self.image(i).iter().map(|&v| S::lit(v as f64)).collect())
            .expect("stored image has the set's shape")
    }

    /// `(B, C, H, W)` batch of the given images.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("image {i} out of range")));
            }
            data.extend(self.image(i).iter().map(|&v| S::lit(v as f64)));
        }
        let [c, h, w] = self.size;
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    /// Appends all images of `other`.
    pub fn extend(&mut self, other: &ImageSet) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if other.size != self.size {
            return Err(Error::mismatch("image set", &self.size, &other.size));
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.classes.extend_from_slice(&other.classes);
        self.domains.extend_from_slice(&other.domains);
        self.labeled.extend_from_slice(&other.labeled);
        Ok(())
    }

    /// Serializes with the `MXDS` little-endian layout.
    pub fn write_to(&self, out: &mut impl Write, classes: usize, domains: usize) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        let [c, h, w] = self.size;
        for v in [FORMAT_VERSION, classes as u32, domains as u32, c as u32, h as u32, w as u32, self.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.len() {
            out.write_all(&(self.classes[i] as u32).to_le_bytes())?;
            out.write_all(&(self.domains[i] as u32).to_le_bytes())?;
            out.write_all(&[self.labeled[i] as u8, 0, 0, 0])?;
            for v in self.image(i) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an `MXDS` file; returns the set plus the header's `(K, D)`.
    pub fn read_file(path: &Path) -> Result<(Self, usize, usize)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 7];
        for v in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *v = u32::from_le_bytes(b);
        }
        let [version, k, d, c, h, w, n] = header;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let size = [c as usize, h as usize, w as usize];
        let per = size.iter().product::<usize>();
        if per == 0 {
            return Err(bad("empty image size"));
        }
        let mut set = ImageSet::new(size);
        let mut rec = vec![0u8; 12 + 4 * per];
        for _ in 0..n {
            r.read_exact(&mut rec).map_err(|_| bad("truncated record"))?;
            let class = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
            let domain = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")) as usize;
            if class >= k as usize || domain >= d as usize {
                return Err(bad("record label out of range"));
            }
            set.classes.push(class);
            set.domains.push(domain);
            set.labeled.push(rec[8] != 0);
            set.pixels.extend(
                rec[12..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok((set, k as usize, d as usize))
    }
}

/// One file of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub domain: usize,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: String,
    pub records: usize,
}

/// JSON manifest written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub format_version: u32,
    pub manifest: DatasetManifest,
    pub label_budget: Option<usize>,
    pub domain_specs: Vec<DomainSpec>,
    pub files: Vec<SplitFile>,
    /// Effective configuration that produced the dataset, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Renders every `(domain, split)` set in memory.
pub fn render_split(
    manifest: &DatasetManifest,
    domains: &[DomainSpec],
    domain: usize,
    split: Split,
    label_budget: Option<usize>,
) -> Result<ImageSet> {
    let per_cell = match split {
        Split::Train => manifest.train_per_cell,
        Split::Test => manifest.test_per_cell,
    };
    let mut set = ImageSet::new(manifest.image_size);
    for class in 0..manifest.classes {
        for index in 0..per_cell {
            let mut rng = example_rng(manifest.seed, domain, split, class, index);
            let img = render_example(class, &domains[domain], manifest.image_size, &mut rng)?;
            let labeled = match (split, label_budget) {
                (Split::Train, Some(b)) => index < b,
                _ => true,
            };
            set.push(&img, class, domain, labeled)?;
        }
    }
    Ok(set)
}

/// Writes one `MXDS` file per `(domain, split)` plus `manifest.json` into
/// `out_dir`; returns the manifest path.
pub fn generate_dataset(
    manifest: &DatasetManifest,
    domains: &[DomainSpec],
    label_budget: Option<usize>,
    out_dir: &Path,
    config_text: Option<String>,
) -> Result<PathBuf> {
    manifest.validate()?;
    if domains.len() != manifest.domains {
        return Err(Error::invalid(format!(
            "manifest declares D={} but {} domain specs were given",
            manifest.domains,
            domains.len()
        )));
    }
    for d in domains {
        d.validate()?;
    }
    if let Some(b) = label_budget {
        if b > manifest.train_per_cell {
            return Err(Error::invalid(format!(
                "label budget {b} exceeds {} training images per (class, domain)",
                manifest.train_per_cell
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for domain in 0..manifest.domains {
        for split in [Split::Train, Split::Test] {
            let set = render_split(manifest, domains, domain, split, label_budget)?;
            let name = format!("domain{domain}_{}.mxds", split.name());
            let path = out_dir.join(&name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            set.write_to(&mut w, manifest.classes, manifest.domains)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
            files.push(SplitFile {
                domain,
                split,
                path: name,
                records: set.len(),
            });
        }
    }
    let mf = ManifestFile {
        format_version: FORMAT_VERSION,
        manifest: manifest.clone(),
        label_budget,
        domain_specs: domains.to_vec(),
        files,
        config: config_text,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&mf).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A generated dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: ManifestFile,
    train: Vec<ImageSet>,
    test: Vec<ImageSet>,
}

impl Dataset {
    /// Loads `dir/manifest.json` and every split file it names.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let info: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let d = info.manifest.domains;
        let mut train = vec![ImageSet::new(info.manifest.image_size); d];
        let mut test = vec![ImageSet::new(info.manifest.image_size); d];
        for f in &info.files {
            let path = dir.join(&f.path);
            let (set, k, dd) = ImageSet::read_file(&path)?;
            if k != info.manifest.classes || dd != d || f.domain >= d || set.len() != f.records {
                return Err(Error::Format {
                    path,
                    reason: "header disagrees with manifest".into(),
                });
            }
            match f.split {
                Split::Train => train[f.domain] = set,
                Split::Test => test[f.domain] = set,
            }
        }
        Ok(Self { info, train, test })
    }

    /// Renders the dataset in memory without touching the filesystem.
    pub fn in_memory(manifest: &DatasetManifest, domains: &[DomainSpec], label_budget: Option<usize>) -> Result<Self> {
        manifest.validate()?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for d in 0..manifest.domains {
            train.push(render_split(manifest, domains, d, Split::Train, label_budget)?);
            test.push(render_split(manifest, domains, d, Split::Test, label_budget)?);
        }
        Ok(Self {
            info: ManifestFile {
                format_version: FORMAT_VERSION,
                manifest: manifest.clone(),
                label_budget,
                domain_specs: domains.to_vec(),
                files: Vec::new(),
                config: None,
            },
            train,
            test,
        })
    }

    pub fn classes(&self) -> usize {
        self.info.manifest.classes
    }

    pub fn domains(&self) -> usize {
        self.info.manifest.domains
    }

    pub fn split(&self, domain: usize, split: Split) -> &ImageSet {
        match split {
            Split::Train => &self.train[domain],
            Split::Test => &self.test[domain],
        }
    }
}
