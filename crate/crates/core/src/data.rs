//! Datasets: the synthetic shape generator, sparse-label synthesis, the
//! strong/weak/val/test split protocol, and PNG directory I/O.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{GrayImage, ImageReader, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DenseMask, ImageGrid, PartialMask, UNLABELED};
use crate::scalar::Scalar;

/// Share of the image the sparse-label synthesizer may label.
pub const LABEL_BUDGET: f64 = 0.08;

/// Foreground-area bounds enforced by [`make_synthetic`].
pub const MIN_FG_FRACTION: f64 = 0.02;
pub const MAX_FG_FRACTION: f64 = 0.25;

/// A densely labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<T> {
    pub id: String,
    pub image: ImageGrid<T>,
    pub mask: DenseMask,
}

impl<T: Scalar> LabeledSample<T> {
    pub fn new(id: impl Into<String>, image: ImageGrid<T>, mask: DenseMask) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Where a sparsely labeled sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialOrigin {
    /// A weak-set image; its dense mask is held out.
    Weak,
    /// A sparse copy of a strong-set image.
    StrongCopy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialSample<T> {
    pub id: String,
    pub image: ImageGrid<T>,
    pub mask: PartialMask,
    pub origin: PartialOrigin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetName {
    #[serde(rename = "Set-3")]
    Set3,
    #[serde(rename = "Set-5")]
    Set5,
    #[serde(rename = "Set-10")]
    Set10,
    Custom,
}

/// How many images are densely labeled, how many sparsely, and the size of
/// the held-out sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSetting {
    pub name: SetName,
    pub num_full: usize,
    pub partial_multiplier: usize,
    pub num_val: usize,
    pub num_test: usize,
}

impl SplitSetting {
    pub fn set3() -> Self {
        Self::named(SetName::Set3, 3)
    }

    pub fn set5() -> Self {
        Self::named(SetName::Set5, 5)
    }

    pub fn set10() -> Self {
        Self::named(SetName::Set10, 10)
    }

    pub fn custom(num_full: usize) -> Self {
        Self::named(SetName::Custom, num_full)
    }

    fn named(name: SetName, num_full: usize) -> Self {
        Self {
            name,
            num_full,
            partial_multiplier: 5,
            num_val: 8,
            num_test: 16,
        }
    }

    /// Parses `Set-3`, `Set-5`, `Set-10` or `custom:<m>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Set-3" => Ok(Self::set3()),
            "Set-5" => Ok(Self::set5()),
            "Set-10" => Ok(Self::set10()),
            _ => s
                .strip_prefix("custom:")
                .and_then(|m| m.parse().ok())
                .map(Self::custom)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "unknown setting {s:?}; expected Set-3, Set-5, Set-10 or custom:<m>"
                    ))
                }),
        }
    }

    pub fn label(&self) -> String {
        match self.name {
            SetName::Set3 => "Set-3".into(),
            SetName::Set5 => "Set-5".into(),
            SetName::Set10 => "Set-10".into(),
            SetName::Custom => format!("custom:{}", self.num_full),
        }
    }

    pub fn num_partial(&self) -> usize {
        self.partial_multiplier * self.num_full
    }

    pub fn required(&self) -> usize {
        self.num_full + self.num_partial() + self.num_val + self.num_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_full == 0 {
            return Err(Error::InvalidConfig("num_full must be >= 1".into()));
        }
        if self.num_test == 0 {
            return Err(Error::InvalidConfig("num_test must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgPolicy {
    CentroidDisk,
    ErosionCore,
}

/// Sparse-label synthesizer: a foreground seed region well inside the
/// object and a background ring around it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScribbleSpec {
    pub fg_policy: FgPolicy,
    pub fg_radius: usize,
    pub bg_dilation: usize,
    pub bg_thickness: usize,
}

impl Default for ScribbleSpec {
    fn default() -> Self {
        Self {
            fg_policy: FgPolicy::CentroidDisk,
            fg_radius: 2,
            bg_dilation: 6,
            bg_thickness: 2,
        }
    }
}

impl ScribbleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bg_thickness == 0 {
            return Err(Error::InvalidConfig("bg_thickness must be >= 1".into()));
        }
        Ok(())
    }
}

/// Chessboard distance from every pixel to the nearest `true` pixel of
/// `sources`; `usize::MAX` when there is none.
fn chessboard_distance(h: usize, w: usize, sources: &[bool]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for (i, &s) in sources.iter().enumerate() {
        if s {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    dist
}

fn centroid_disk(h: usize, w: usize, fg: &[bool], radius: usize) -> Vec<usize> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in fg.iter().enumerate().filter(|(_, &f)| f) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
        n += 1.0;
    }
    let (cy, cx) = (sy / n, sx / n);
    let d2 = |i: usize| {
        let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
        dy * dy + dx * dx
    };
    let r2 = (radius * radius) as f64;
    let disk: Vec<usize> = (0..h * w).filter(|&i| fg[i] && d2(i) <= r2).collect();
    if !disk.is_empty() {
        return disk;
    }
    // Non-convex object whose centroid falls outside it: nearest fg pixel.
    let nearest = (0..h * w)
        .filter(|&i| fg[i])
        .min_by(|&a, &b| d2(a).total_cmp(&d2(b)))
        .expect("foreground is nonempty");
    vec![nearest]
}

/// Sparse labels for `mask`: class 1 seeds inside the foreground, class 0
/// seeds on a ring `bg_dilation` pixels outside it. Foreground is every
/// nonzero class; seeds are written with the pixel's true class.
///
/// At most [`LABEL_BUDGET`] of the image is labeled; when the seeds exceed
/// it, a seeded random subset is kept, thinning the ring first.
pub fn synthesize_partial(mask: &DenseMask, spec: &ScribbleSpec, seed: u64) -> Result<PartialMask> {
    spec.validate()?;
    let (h, w) = (mask.height(), mask.width());
    let fg: Vec<bool> = mask.labels().iter().map(|&l| l != 0).collect();
    if !fg.iter().any(|&f| f) {
        return Err(Error::NoForeground);
    }

    let fg_seeds = match spec.fg_policy {
        FgPolicy::CentroidDisk => centroid_disk(h, w, &fg, spec.fg_radius),
        FgPolicy::ErosionCore => {
            // Pixels off the image count as background.
            let bg: Vec<bool> = fg.iter().map(|&f| !f).collect();
            let to_bg = chessboard_distance(h, w, &bg);
            let core: Vec<usize> = (0..h * w)
                .filter(|&i| {
                    let (y, x) = (i / w, i % w);
                    let to_edge = 1 + y.min(x).min(h - 1 - y).min(w - 1 - x);
                    fg[i] && to_bg[i].min(to_edge) > spec.fg_radius
                })
                .collect();
            if core.is_empty() {
                centroid_disk(h, w, &fg, spec.fg_radius)
            } else {
                core
            }
        }
    };

    let to_fg = chessboard_distance(h, w, &fg);
    let (lo, hi) = (spec.bg_dilation, spec.bg_dilation + spec.bg_thickness);
    let mut bg_seeds: Vec<usize> = (0..h * w).filter(|&i| to_fg[i] > lo && to_fg[i] <= hi).collect();

    let budget = ((LABEL_BUDGET * (h * w) as f64).floor() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fg_seeds = fg_seeds;
    let fg_keep = fg_seeds.len().min(budget / 2).max(1);
    if fg_seeds.len() > fg_keep {
        fg_seeds.shuffle(&mut rng);
        fg_seeds.truncate(fg_keep);
    }
    let bg_keep = budget - fg_seeds.len();
    if bg_seeds.len() > bg_keep {
        bg_seeds.shuffle(&mut rng);
        bg_seeds.truncate(bg_keep);
    }

    let mut labels = vec![UNLABELED; h * w];
    for &i in fg_seeds.iter().chain(&bg_seeds) {
        labels[i] = mask.labels()[i];
    }
    PartialMask::new(h, w, mask.num_classes(), labels)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn is_connected(h: usize, w: usize, fg: &[bool]) -> bool {
    let Some(start) = fg.iter().position(|&f| f) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    seen[start] = true;
    let mut stack = vec![start];
    let mut count = 1;
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        let neighbors = [
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
        ];
        for j in neighbors.into_iter().flatten() {
            if fg[j] && !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == fg.iter().filter(|&&f| f).count()
}

/// Whether the foreground of `mask` is a single 4-connected component.
pub fn single_component(mask: &DenseMask) -> bool {
    let fg: Vec<bool> = mask.labels().iter().map(|&l| l != 0).collect();
    is_connected(mask.height(), mask.width(), &fg)
}

/// One cardiac-like slice: a bright elliptic cavity (the foreground) inside
/// a dark wall, a bright round distractor next to it, a soft intensity
/// gradient and Gaussian noise.
fn synthetic_slice(rng: &mut ChaCha8Rng, grid: usize) -> (Vec<f64>, Vec<u8>) {
    let g = grid as f64;
    let s = g / 32.0;
    loop {
        let gy = 0.1 * rng.gen_range(-1.0..1.0);
        let gx = 0.1 * rng.gen_range(-1.0..1.0);
        let cy = rng.gen_range(0.35..0.65) * g;
        let cx = rng.gen_range(0.35..0.65) * g;
        let a = rng.gen_range(3.0..7.0) * s;
        let b = a * rng.gen_range(0.6..1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let wall = rng.gen_range(1.5..3.0) * s;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let gap = a + wall + rng.gen_range(2.0..5.0) * s;
        let (ry, rx) = (cy + gap * angle.sin(), cx + gap * angle.cos());
        let rr = rng.gen_range(2.5..6.0) * s;
        let fg_level = rng.gen_range(0.6..0.9);
        let wall_level = rng.gen_range(0.1..0.25);
        let rv_level = fg_level * rng.gen_range(0.8..1.05);
        let sigma = rng.gen_range(0.15..0.3);
        let noise = Normal::new(0.0, sigma).expect("positive sigma");

        let (cos, sin) = (theta.cos(), theta.sin());
        let ellipse = |y: f64, x: f64, a: f64, b: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        };
        let mut image = Vec::with_capacity(grid * grid);
        let mut labels = Vec::with_capacity(grid * grid);
        for y in 0..grid {
            for x in 0..grid {
                let (yf, xf) = (y as f64, x as f64);
                let cavity = ellipse(yf, xf, a, b);
                let in_wall = ellipse(yf, xf, a + wall, b + wall);
                let rv = !in_wall && (yf - ry).powi(2) + (xf - rx).powi(2) <= rr * rr;
                let base = 0.35 + gx * (xf / g - 0.5) + gy * (yf / g - 0.5);
                let level = if cavity {
                    fg_level
                } else if in_wall {
                    wall_level
                } else if rv {
                    rv_level
                } else {
                    base
                };
                image.push(quantize(level + noise.sample(rng)));
                labels.push(u8::from(cavity));
            }
        }
        let fg = labels.iter().filter(|&&l| l == 1).count() as f64 / (grid * grid) as f64;
        let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&fg) && is_connected(grid, grid, &bools) {
            return (image, labels);
        }
    }
}

/// `n` synthetic binary samples on a `grid`×`grid` lattice, ids `syn0000`…
/// Intensities are quantized to 8 bits so PNG round trips are exact.
pub fn make_synthetic<T: Scalar>(n: usize, grid: usize, seed: u64) -> Result<Vec<LabeledSample<T>>> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    if grid < 32 {
        return Err(Error::InvalidConfig(format!("grid {grid} < 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let (image, labels) = synthetic_slice(&mut rng, grid);
            LabeledSample::new(
                format!("syn{k:04}"),
                ImageGrid::new(grid, grid, image.into_iter().map(T::of).collect())?,
                DenseMask::new(grid, grid, 2, labels)?,
            )
        })
        .collect()
}

/// Append-only, thread-safe log of reads of held-out labels.
#[derive(Clone, Debug, Default)]
pub struct AccessAudit {
    log: Arc<Mutex<Vec<String>>>,
}

impl AccessAudit {
    pub fn record(&self, entry: String) {
        self.log.lock().expect("audit lock poisoned").push(entry);
    }

    pub fn reads(&self) -> usize {
        self.log.lock().expect("audit lock poisoned").len()
    }

    pub fn entries(&self) -> Vec<String> {
        self.log.lock().expect("audit lock poisoned").clone()
    }
}

/// Dense masks of the weak-set images, kept for evaluation. Every read goes
/// through the audit.
#[derive(Clone, Debug, Default)]
pub struct HeldOutMasks {
    masks: BTreeMap<String, DenseMask>,
    audit: AccessAudit,
}

impl HeldOutMasks {
    pub fn read(&self, id: &str, purpose: &str) -> Option<&DenseMask> {
        self.audit.record(format!("{id}: {purpose}"));
        self.masks.get(id)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }
}

#[derive(Clone, Debug)]
pub struct MixedDataset<T> {
    pub setting: SplitSetting,
    pub strong: Vec<LabeledSample<T>>,
    pub weak: Vec<PartialSample<T>>,
    pub val: Vec<LabeledSample<T>>,
    pub test: Vec<LabeledSample<T>>,
    pub weak_dense: HeldOutMasks,
}

impl<T: Scalar> MixedDataset<T> {
    /// Weak-set images proper, without the sparse copies of strong images.
    pub fn weak_originals(&self) -> impl Iterator<Item = &PartialSample<T>> {
        self.weak.iter().filter(|s| s.origin == PartialOrigin::Weak)
    }

    /// Text manifest: one id per line under `[strong]`, `[weak]`, `[val]`
    /// and `[test]` headers.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, ids: Vec<&str>| {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        };
        section("strong", self.strong.iter().map(|s| s.id.as_str()).collect());
        section("weak", self.weak.iter().map(|s| s.id.as_str()).collect());
        section("val", self.val.iter().map(|s| s.id.as_str()).collect());
        section("test", self.test.iter().map(|s| s.id.as_str()).collect());
        out
    }
}

fn mix(seed: u64, k: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffles `samples` with `seed` and partitions them. The test and val
/// sets are taken from the end of the permutation, so for a given pool and
/// seed they are the same for every setting.
pub fn build_split<T: Scalar>(
    samples: Vec<LabeledSample<T>>,
    setting: &SplitSetting,
    spec: &ScribbleSpec,
    seed: u64,
) -> Result<MixedDataset<T>> {
    setting.validate()?;
    spec.validate()?;
    let required = setting.required();
    if samples.len() < required {
        return Err(Error::InsufficientSamples {
            required,
            available: samples.len(),
        });
    }
    let mut ids = BTreeSet::new();
    for s in &samples {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
        }
    }

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<LabeledSample<T>>> = samples.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<LabeledSample<T>> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index taken once"))
            .collect()
    };
    let m = setting.num_full;
    let strong = take(0..m);
    let weak_raw = take(m..m + setting.num_partial());
    let test = take(n - setting.num_test..n);
    let val = take(n - setting.num_test - setting.num_val..n - setting.num_test);

    let scribble = |k: usize, s: &LabeledSample<T>| synthesize_partial(&s.mask, spec, mix(seed, k as u64));
    let mut weak = Vec::with_capacity(weak_raw.len() + m);
    let mut held = BTreeMap::new();
    for (k, s) in weak_raw.into_iter().enumerate() {
        weak.push(PartialSample {
            mask: scribble(k, &s)?,
            id: s.id.clone(),
            image: s.image,
            origin: PartialOrigin::Weak,
        });
        held.insert(s.id, s.mask);
    }
    let offset = weak.len();
    for (k, s) in strong.iter().enumerate() {
        weak.push(PartialSample {
            id: s.id.clone(),
            image: s.image.clone(),
            mask: scribble(offset + k, s)?,
            origin: PartialOrigin::StrongCopy,
        });
    }
    Ok(MixedDataset {
        setting: *setting,
        strong,
        weak,
        val,
        test,
        weak_dense: HeldOutMasks {
            masks: held,
            audit: AccessAudit::default(),
        },
    })
}

fn png_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn read_gray(path: &Path) -> std::result::Result<GrayImage, String> {
    let img = ImageReader::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .decode()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        )),
    }
}

/// Raw `(id, image, mask labels)` triples with itemized problems.
type RawPair<T> = (String, ImageGrid<T>, Vec<u8>);

fn load_raw<T: Scalar>(root: &Path, num_classes: usize, allow_unlabeled: bool) -> Result<Vec<RawPair<T>>> {
    let images = png_ids(&root.join("images"))?;
    let masks = png_ids(&root.join("masks"))?;
    if images.is_empty() && masks.is_empty() {
        log::warn!("no samples found under {}", root.display());
        return Ok(Vec::new());
    }
    let mut problems = Vec::new();
    for id in masks.keys().filter(|id| !images.contains_key(*id)) {
        problems.push(format!("mask {id} has no image"));
    }
    let mut out = Vec::new();
    for (id, image_path) in &images {
        let Some(mask_path) = masks.get(id) else {
            problems.push(format!("image {id} has no mask"));
            continue;
        };
        let (img, mask) = match (read_gray(image_path), read_gray(mask_path)) {
            (Ok(i), Ok(m)) => (i, m),
            (i, m) => {
                problems.extend(i.err());
                problems.extend(m.err());
                continue;
            }
        };
        if img.dimensions() != mask.dimensions() {
            problems.push(format!(
                "{id}: image {:?} vs mask {:?}",
                img.dimensions(),
                mask.dimensions()
            ));
            continue;
        }
        let bad: BTreeSet<u8> = mask
            .as_raw()
            .iter()
            .copied()
            .filter(|&l| l as usize >= num_classes && !(allow_unlabeled && l == UNLABELED))
            .collect();
        if !bad.is_empty() {
            let what = if bad.contains(&UNLABELED) && !allow_unlabeled {
                " (255 marks unlabeled pixels; load as a partial dataset)"
            } else {
                ""
            };
            problems.push(format!("{id}: class ids {bad:?} >= {num_classes}{what}"));
            continue;
        }
        let (w, h) = img.dimensions();
        let values = img.as_raw().iter().map(|&v| T::of(v as f64 / 255.0)).collect();
        match ImageGrid::new(h as usize, w as usize, values) {
            Ok(grid) => out.push((id.clone(), grid, mask.into_raw())),
            Err(e) => problems.push(format!("{id}: {e}")),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Dataset {
            root: root.to_path_buf(),
            problems,
        })
    }
}

/// Reads `images/<id>.png` / `masks/<id>.png` pairs. Problems across all
/// files are collected into one error.
pub fn load_dataset<T: Scalar>(root: &Path, num_classes: usize) -> Result<Vec<LabeledSample<T>>> {
    load_raw::<T>(root, num_classes, false)?
        .into_iter()
        .map(|(id, image, labels)| {
            let mask = DenseMask::new(image.height(), image.width(), num_classes, labels)?;
            LabeledSample::new(id, image, mask)
        })
        .collect()
}

/// Like [`load_dataset`], but mask value 255 reads as unlabeled.
pub fn load_partial_dataset<T: Scalar>(root: &Path, num_classes: usize) -> Result<Vec<PartialSample<T>>> {
    load_raw::<T>(root, num_classes, true)?
        .into_iter()
        .map(|(id, image, labels)| {
            Ok(PartialSample {
                mask: PartialMask::new(image.height(), image.width(), num_classes, labels)?,
                id,
                image,
                origin: PartialOrigin::Weak,
            })
        })
        .collect()
}

pub fn image_to_png<T: Scalar>(image: &ImageGrid<T>) -> GrayImage {
    GrayImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let v = image.get(y as usize, x as usize).to_f64_lossy();
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn labels_to_png(height: usize, width: usize, labels: &[u8]) -> GrayImage {
    GrayImage::from_raw(width as u32, height as u32, labels.to_vec()).expect("labels match shape")
}

/// Writes samples in the layout [`load_dataset`] reads.
pub fn save_dataset<T: Scalar>(samples: &[LabeledSample<T>], root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in samples {
        image_to_png(&s.image).save(images.join(format!("{}.png", s.id)))?;
        labels_to_png(s.mask.height(), s.mask.width(), s.mask.labels()).save(masks.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> DenseMask {
        let labels = (0..h * w)
            .map(|i| {
                let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                u8::from(dy * dy + dx * dx <= r * r)
            })
            .collect();
        DenseMask::new(h, w, 2, labels).unwrap()
    }

    #[test]
    fn all_background_is_rejected() {
        let mask = DenseMask::new(16, 16, 2, vec![0; 256]).unwrap();
        assert!(matches!(
            synthesize_partial(&mask, &ScribbleSpec::default(), 0),
            Err(Error::NoForeground)
        ));
    }

    #[test]
    fn seeds_agree_with_dense_mask_for_both_policies() {
        let samples = make_synthetic::<f32>(100, 32, 3).unwrap();
        for policy in [FgPolicy::CentroidDisk, FgPolicy::ErosionCore] {
            let spec = ScribbleSpec {
                fg_policy: policy,
                ..ScribbleSpec::default()
            };
            for (k, s) in samples.iter().enumerate() {
                let p = synthesize_partial(&s.mask, &spec, k as u64).unwrap();
                for (i, &l) in p.labels().iter().enumerate() {
                    if l != UNLABELED {
                        assert_eq!(l, s.mask.labels()[i]);
                    }
                }
                let frac = p.labeled_count() as f64 / p.labels().len() as f64;
                assert!(frac < 0.10, "labeled fraction {frac}");
                assert!(p.labels().contains(&0) && p.labels().contains(&1));
            }
        }
    }

    #[test]
    fn erosion_core_falls_back_on_thin_objects() {
        let mut labels = vec![0; 16 * 16];
        for x in 3..12 {
            labels[8 * 16 + x] = 1;
        }
        let mask = DenseMask::new(16, 16, 2, labels).unwrap();
        let spec = ScribbleSpec {
            fg_policy: FgPolicy::ErosionCore,
            ..ScribbleSpec::default()
        };
        let p = synthesize_partial(&mask, &spec, 1).unwrap();
        let fg: Vec<usize> = (0..256).filter(|&i| p.labels()[i] == 1).collect();
        assert!(!fg.is_empty());
        assert!(fg.iter().all(|&i| i / 16 == 8 && (5..=9).contains(&(i % 16))));
    }

    #[test]
    fn bg_ring_sits_at_the_requested_distance() {
        let mask = disk_mask(64, 64, 32.0, 32.0, 4.0);
        let spec = ScribbleSpec::default();
        let p = synthesize_partial(&mask, &spec, 0).unwrap();
        let fg: Vec<bool> = mask.labels().iter().map(|&l| l == 1).collect();
        let d = chessboard_distance(64, 64, &fg);
        for (&l, &di) in p.labels().iter().zip(&d) {
            if l == 0 {
                assert!(di > 6 && di <= 8);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_bounded_and_connected() {
        let a = make_synthetic::<f64>(40, 32, 9).unwrap();
        let b = make_synthetic::<f64>(40, 32, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic::<f64>(40, 32, 10).unwrap());
        for s in &a {
            let frac = s.mask.count(1) as f64 / 1024.0;
            assert!((MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac));
            assert!(single_component(&s.mask));
            assert!(s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(make_synthetic::<f32>(0, 32, 0).is_err());
        assert!(make_synthetic::<f32>(3, 16, 0).is_err());
    }

    #[test]
    fn set3_split_counts_and_disjointness() {
        let pool = make_synthetic::<f32>(42, 32, 1).unwrap();
        let ds = build_split(pool, &SplitSetting::set3(), &ScribbleSpec::default(), 5).unwrap();
        assert_eq!(ds.strong.len(), 3);
        assert_eq!(ds.weak.len(), 18);
        assert_eq!(ds.weak_dense.len(), 15);
        let train: BTreeSet<_> = ds.weak.iter().map(|s| s.id.clone()).collect();
        for s in &ds.strong {
            assert!(train.contains(&s.id));
        }
        let val: BTreeSet<_> = ds.val.iter().map(|s| s.id.clone()).collect();
        let test: BTreeSet<_> = ds.test.iter().map(|s| s.id.clone()).collect();
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        assert_eq!((val.len(), test.len()), (8, 16));
        assert_eq!(ds.weak_dense.audit().reads(), 0);
    }

    #[test]
    fn split_is_reproducible_and_reports_shortfall() {
        let pool = make_synthetic::<f32>(60, 32, 2).unwrap();
        let a = build_split(pool.clone(), &SplitSetting::set5(), &ScribbleSpec::default(), 8).unwrap();
        let b = build_split(pool.clone(), &SplitSetting::set5(), &ScribbleSpec::default(), 8).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.weak, b.weak);
        let err = build_split(pool, &SplitSetting::set10(), &ScribbleSpec::default(), 8).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientSamples {
                required: 84,
                available: 60
            }
        ));
    }

    #[test]
    fn test_set_is_shared_across_settings() {
        let pool = make_synthetic::<f32>(84, 32, 2).unwrap();
        let a = build_split(pool.clone(), &SplitSetting::set3(), &ScribbleSpec::default(), 1).unwrap();
        let b = build_split(pool, &SplitSetting::set10(), &ScribbleSpec::default(), 1).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn manifest_sections() {
        let pool = make_synthetic::<f32>(42, 32, 1).unwrap();
        let ds = build_split(pool, &SplitSetting::set3(), &ScribbleSpec::default(), 5).unwrap();
        let text = ds.manifest();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "[strong]");
        assert_eq!(lines[4], "[weak]");
        assert_eq!(lines[23], "[val]");
        assert_eq!(lines[32], "[test]");
        assert_eq!(lines.len(), 49);
    }

    #[test]
    fn reads_are_audited() {
        let pool = make_synthetic::<f32>(42, 32, 1).unwrap();
        let ds = build_split(pool, &SplitSetting::set3(), &ScribbleSpec::default(), 5).unwrap();
        let id = ds.weak_originals().next().unwrap().id.clone();
        assert!(ds.weak_dense.read(&id, "evaluation").is_some());
        let audit = ds.weak_dense.audit().clone();
        assert_eq!(audit.reads(), 1);
        assert!(audit.entries()[0].ends_with("evaluation"));
    }

    #[test]
    fn setting_parse() {
        assert_eq!(SplitSetting::parse("Set-10").unwrap().num_full, 10);
        assert_eq!(SplitSetting::parse("custom:7").unwrap().required(), 7 + 35 + 24);
        assert!(SplitSetting::parse("Set-4").is_err());
        assert!(SplitSetting::parse("custom:0").unwrap().validate().is_err());
    }
}
