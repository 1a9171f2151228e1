//! Procedural fine-grained toy dataset.
//!
//! Every class pairs a super-class texture (a sinusoid grating with a fixed
//! frequency and orientation) with a sub-class glyph (a fixed binary pattern)
//! stamped at a random location. Sub-classes of one super-class therefore
//! differ only inside the glyph footprint. All randomness comes from one
//! seeded xoshiro256++ stream.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::patch::PatchConfig;
use crate::tensor::{load_tfgt, save_tfgt, Tensor};

const TEXTURE_MEAN: f64 = 0.5;
const TEXTURE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_superclasses: usize,
    pub subclasses_per_superclass: usize,
    pub glyph_size: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Held-out samples per class.
    pub test_samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            num_superclasses: 4,
            subclasses_per_superclass: 4,
            glyph_size: 6,
            samples_per_class: 64,
            test_samples_per_class: 16,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_superclasses", self.num_superclasses),
            ("subclasses_per_superclass", self.subclasses_per_superclass),
            ("glyph_size", self.glyph_size),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.glyph_size >= self.image_size {
            return Err(Error::Config(format!(
                "glyph_size {} must be smaller than image_size {}",
                self.glyph_size, self.image_size
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.glyph_size * self.glyph_size < 4 && self.subclasses_per_superclass > 2 {
            return Err(Error::Config("glyph too small to tell sub-classes apart".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_superclasses * self.subclasses_per_superclass
    }

    pub fn superclass_of(&self, class: usize) -> usize {
        class / self.subclasses_per_superclass
    }

    pub fn subclass_of(&self, class: usize) -> usize {
        class % self.subclasses_per_superclass
    }
}

/// Square glyph footprint, top-left corner plus side length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GlyphRegion {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl GlyphRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.size).contains(&row) && (self.col..self.col + self.size).contains(&col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[B, H, W, C]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub glyphs: Vec<GlyphRegion>,
    /// Sample identities, unique across the train and test splits.
    pub ids: Vec<u64>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a `[B, H, W, C]` batch with its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items = indices
            .iter()
            .map(|&i| self.images.index_outer(i))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Tensor::stack(&items)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Write `<prefix>images.tfgt`, `<prefix>labels.tfgt` and
    /// `<prefix>metadata.txt` (one `id label row col size` line per sample).
    pub fn export(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tfgt(&dir.join(format!("{prefix}images.tfgt")), &[&self.images])?;
        let labels = Tensor::<f32>::new([self.len()], self.labels.iter().map(|&l| l as f32).collect())?;
        save_tfgt(&dir.join(format!("{prefix}labels.tfgt")), &[&labels])?;
        let mut meta = format!("# classes {}\n# id label row col size\n", self.num_classes);
        for ((id, label), g) in self.ids.iter().zip(&self.labels).zip(&self.glyphs) {
            writeln!(meta, "{id} {label} {} {} {}", g.row, g.col, g.size).unwrap();
        }
        let path = dir.join(format!("{prefix}metadata.txt"));
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn import(dir: &Path, prefix: &str) -> Result<Self> {
        let images = load_tfgt::<f32>(&dir.join(format!("{prefix}images.tfgt")))?.swap_remove(0);
        let labels_t = load_tfgt::<f32>(&dir.join(format!("{prefix}labels.tfgt")))?.swap_remove(0);
        let path = dir.join(format!("{prefix}metadata.txt"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |detail: String| Error::Format {
            what: "dataset metadata",
            detail,
        };
        let mut num_classes = None;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut glyphs = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# classes ") {
                num_classes = Some(rest.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<u64> = line
                .split_whitespace()
                .map(|v| v.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{line:?}: {e}")))?;
            let [id, label, row, col, size] = f[..] else {
                return Err(bad(format!("expected 5 fields in {line:?}")));
            };
            ids.push(id);
            labels.push(label as usize);
            glyphs.push(GlyphRegion {
                row: row as usize,
                col: col as usize,
                size: size as usize,
            });
        }
        let num_classes = num_classes.ok_or_else(|| bad("missing '# classes' line".into()))?;
        let from_tensor: Vec<usize> = labels_t.data().iter().map(|&v| v as usize).collect();
        if from_tensor != labels || images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(bad("images, labels and metadata disagree".into()));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(bad("label outside class range".into()));
        }
        Ok(Self {
            images,
            labels,
            glyphs,
            ids,
            num_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
    /// One `glyph_size²` binary pattern per sub-class.
    pub glyphs: Vec<Vec<bool>>,
}

impl SplitDataset {
    pub fn export(&self, dir: &Path) -> Result<()> {
        self.train.export(dir, "train_")?;
        self.test.export(dir, "test_")
    }

    pub fn import(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::import(dir, "train_")?,
            test: Dataset::import(dir, "test_")?,
            glyphs: Vec::new(),
        })
    }
}

/// Periodic motifs used for the first sub-classes. Any window of a few
/// pixels identifies the motif, so partial patch coverage still carries the
/// sub-class signal.
const MOTIFS: [fn(usize, usize) -> bool; 8] = [
    |y, _| y % 2 == 0,
    |_, x| x % 2 == 0,
    |y, x| (y + x) % 2 == 0,
    |_, _| true,
    |y, x| (y + x) % 4 < 2,
    |y, x| (x + 4 - y % 4) % 4 < 2,
    |y, _| y % 4 < 2,
    |_, x| x % 4 < 2,
];

/// One distinct binary pattern per sub-class: the periodic motifs first,
/// then random patterns with between a third and two thirds of the cells
/// set and pairwise Hamming distance of at least a quarter of the cells
/// (relaxed if the pattern space is too small).
pub fn glyph_patterns(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    let g = cfg.glyph_size;
    let cells = g * g;
    let mut out: Vec<Vec<bool>> = Vec::new();
    for motif in MOTIFS.iter().take(cfg.subclasses_per_superclass) {
        let p: Vec<bool> = (0..cells).map(|i| motif(i / g, i % g)).collect();
        if !out.contains(&p) {
            out.push(p);
        }
    }
    let mut min_dist = (cells / 4).max(1);
    let mut attempts = 0;
    while out.len() < cfg.subclasses_per_superclass {
        attempts += 1;
        if attempts % 10_000 == 0 && min_dist > 1 {
            min_dist -= 1;
        }
        let p: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
        let ones = p.iter().filter(|&&b| b).count();
        if cells >= 6 && (ones * 3 < cells || ones * 3 > 2 * cells) {
            continue;
        }
        let far = out
            .iter()
            .all(|q| q.iter().zip(&p).filter(|(a, b)| a != b).count() >= min_dist);
        if far {
            out.push(p);
        }
    }
    out
}

/// Grating value of `superclass` at a pixel.
pub fn texture(cfg: &SynthConfig, superclass: usize, row: usize, col: usize, channel: usize) -> f64 {
    let angle = PI * superclass as f64 / cfg.num_superclasses as f64;
    let cycles = 2.0 + superclass as f64;
    let size = cfg.image_size as f64;
    let phase = 2.0 * PI * cycles * (row as f64 * angle.sin() + col as f64 * angle.cos()) / size;
    TEXTURE_MEAN + TEXTURE_AMPLITUDE * (phase + channel as f64 * PI / 3.0).sin()
}

/// Render one sample: texture, glyph at `(row, col)`, then noise drawn from
/// `rng`, clamped to `[0, 1]`.
pub fn render_sample(
    cfg: &SynthConfig,
    patterns: &[Vec<bool>],
    class: usize,
    row: usize,
    col: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let (s, c, g) = (cfg.image_size, cfg.channels, cfg.glyph_size);
    if row + g > s || col + g > s {
        return Err(Error::Contract(format!("glyph at ({row}, {col}) leaves the image")));
    }
    let sup = cfg.superclass_of(class);
    let pattern = &patterns[cfg.subclass_of(class)];
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut px = Vec::with_capacity(s * s * c);
    for y in 0..s {
        for x in 0..s {
            for ch in 0..c {
                let base = if (row..row + g).contains(&y) && (col..col + g).contains(&x) {
                    if pattern[(y - row) * g + (x - col)] {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    texture(cfg, sup, y, x, ch)
                };
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px.push((base + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(px)
}

/// Generate the train and test splits. Byte-identical for identical configs.
pub fn generate(cfg: &SynthConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let patterns = glyph_patterns(cfg, &mut rng);
    let mut next_id = 0u64;
    let mut split = |per_class: usize, rng: &mut Xoshiro256PlusPlus| -> Result<Dataset> {
        let n = per_class * cfg.num_classes();
        let (s, c) = (cfg.image_size, cfg.channels);
        let mut data = Vec::with_capacity(n * s * s * c);
        let mut labels = Vec::with_capacity(n);
        let mut glyphs = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for class in 0..cfg.num_classes() {
            for _ in 0..per_class {
                let row = rng.random_range(0..=s - cfg.glyph_size);
                let col = rng.random_range(0..=s - cfg.glyph_size);
                data.extend(render_sample(cfg, &patterns, class, row, col, rng)?);
                labels.push(class);
                glyphs.push(GlyphRegion {
                    row,
                    col,
                    size: cfg.glyph_size,
                });
                ids.push(next_id);
                next_id += 1;
            }
        }
        Ok(Dataset {
            images: Tensor::new([n, s, s, c], data)?,
            labels,
            glyphs,
            ids,
            num_classes: cfg.num_classes(),
        })
    };
    let train = split(cfg.samples_per_class, &mut rng)?;
    let test = split(cfg.test_samples_per_class, &mut rng)?;
    Ok(SplitDataset {
        train,
        test,
        glyphs: patterns,
    })
}

/// Pixel footprint `[row0, row0+P) × [col0, col0+P)` of token `token`
/// (1-based; token 0 is CLS).
pub fn token_footprint(token: usize, patch: &PatchConfig) -> Option<(usize, usize)> {
    (1..=patch.grid().count)
        .contains(&token)
        .then(|| patch.origin(token - 1))
}

fn overlaps(origin: (usize, usize), p: usize, glyph: &GlyphRegion) -> bool {
    let (r0, c0) = origin;
    r0 < glyph.row + glyph.size && glyph.row < r0 + p && c0 < glyph.col + glyph.size && glyph.col < c0 + p
}

/// True iff at least one selected token's patch overlaps the glyph.
pub fn localization_hit(indices: &[usize], glyph: &GlyphRegion, patch: &PatchConfig) -> bool {
    indices
        .iter()
        .any(|&t| token_footprint(t, patch).is_some_and(|origin| overlaps(origin, patch.patch, glyph)))
}

/// Number of patches whose footprint overlaps the glyph.
pub fn covering_patches(glyph: &GlyphRegion, patch: &PatchConfig) -> usize {
    (0..patch.grid().count)
        .filter(|&i| overlaps(patch.origin(i), patch.patch, glyph))
        .count()
}

/// Probability that `k` token indices drawn uniformly and independently from
/// `1..=N` hit a glyph placed uniformly at random, averaged exactly over all
/// glyph positions.
pub fn random_hit_probability(image_size: usize, glyph_size: usize, patch: &PatchConfig, k: usize) -> f64 {
    let n = patch.grid().count as f64;
    let span = image_size - glyph_size + 1;
    let mut total = 0.0;
    for row in 0..span {
        for col in 0..span {
            let g = GlyphRegion {
                row,
                col,
                size: glyph_size,
            };
            let miss = 1.0 - covering_patches(&g, patch) as f64 / n;
            total += 1.0 - miss.powi(k as i32);
        }
    }
    total / (span * span) as f64
}
