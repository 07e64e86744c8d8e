//! Datasets: a synthetic hierarchy-consistent image generator, the on-disk
//! manifest format, train/val/test splitting and K-shot subsampling.
//!
//! Images live in memory as `[C, S, S]` tensors with values in `[0, 1]` on
//! the 8-bit grid, so writing them as PPM and reading them back is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelVector};
use crate::params::write_atomic;
use crate::registry::Registry;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RAW_MAGIC: &[u8; 4] = b"MTF1";
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;
/// Texture weight decays by this factor per level above the leaf.
const ANCESTOR_DECAY: f64 = 0.6;
const SIGNAL_GAIN: f64 = 0.12;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelVector,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<&LabelVector> {
        self.samples.iter().map(|s| &s.labels).collect()
    }

    pub fn truth(&self) -> BTreeMap<String, LabelVector> {
        self.samples.iter().map(|s| (s.id.clone(), s.labels.clone())).collect()
    }

    /// Stacks the selected images into a standardized `[B, C, S, S]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let first = self
            .samples
            .get(*idx.first().ok_or_else(|| Error::Data("empty batch".into()))?)
            .ok_or_else(|| Error::Data("batch index out of range".into()))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(idx.len() * first.image.numel());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("batch index {i} out of range")))?;
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Data(format!("image '{}' has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
            }
            data.extend(s.image.data().iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
        }
        let mut full = vec![idx.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }

    /// Fails if any label vector violates ancestor closure.
    pub fn check_consistent(&self, h: &LabelHierarchy) -> Result<()> {
        for s in &self.samples {
            if !h.is_consistent(&s.labels)? {
                return Err(Error::Data(format!("labels of '{}' are not closed under ancestors", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub image_size: usize,
    pub channels: usize,
    /// Side of the square texture rendered for each leaf.
    pub patch: usize,
    /// Maximum placement offset in pixels along each axis.
    pub jitter: usize,
    pub max_leaves: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 600,
            seed: 0,
            noise: 0.05,
            image_size: 32,
            channels: 3,
            patch: 8,
            jitter: 2,
            max_leaves: 3,
        }
    }
}

/// Fixed per-node textures and per-leaf anchor locations.
#[derive(Clone, Debug)]
pub struct Renderer {
    cfg: SynthConfig,
    /// Composite texture per leaf position: own texture plus decayed
    /// ancestor textures, `[C * P * P]`.
    templates: Vec<Vec<f64>>,
    anchors: Vec<(usize, usize)>,
}

impl Renderer {
    pub fn new(h: &LabelHierarchy, cfg: &SynthConfig) -> Result<Self> {
        let (s, p, j) = (cfg.image_size, cfg.patch, cfg.jitter);
        if cfg.channels == 0 || p == 0 || p + 2 * j > s {
            return Err(Error::InvalidArgument(format!(
                "texture {p} with jitter {j} does not fit a {s}px image"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        // Smooth textures: per channel a mix of a constant, two ramps and a
        // low-frequency bump, so evidence survives small shifts.
        let basis = |b: usize, y: usize, x: usize| {
            let (u, v) = ((y as f64 + 0.5) / p as f64 - 0.5, (x as f64 + 0.5) / p as f64 - 0.5);
            match b {
                0 => 1.0,
                1 => 2.0 * u,
                2 => 2.0 * v,
                _ => (std::f64::consts::PI * u).cos() * (std::f64::consts::PI * v).cos(),
            }
        };
        let textures: Vec<Vec<f64>> = (0..h.len())
            .map(|_| {
                let coef: Vec<f64> = (0..cfg.channels * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut t = Vec::with_capacity(cfg.channels * p * p);
                for ch in 0..cfg.channels {
                    for y in 0..p {
                        for x in 0..p {
                            t.push((0..4).map(|b| coef[ch * 4 + b] * basis(b, y, x)).sum());
                        }
                    }
                }
                t
            })
            .collect();
        let mut templates = Vec::new();
        let mut anchors = Vec::new();
        for &leaf in h.leaf_ids() {
            let level = h.nodes()[leaf].level;
            let mut t = textures[leaf].clone();
            for a in h.ancestors(leaf)? {
                let w = ANCESTOR_DECAY.powi((level - h.nodes()[a].level) as i32);
                for (x, y) in t.iter_mut().zip(&textures[a]) {
                    *x += w * y;
                }
            }
            templates.push(t);
            anchors.push((rng.gen_range(j..=s - p - j), rng.gen_range(j..=s - p - j)));
        }
        Ok(Self {
            cfg: cfg.clone(),
            templates,
            anchors,
        })
    }

    /// Template of the leaf at position `k` of `leaf_ids()`.
    pub fn template(&self, k: usize) -> &[f64] {
        &self.templates[k]
    }

    pub fn anchor(&self, k: usize) -> (usize, usize) {
        self.anchors[k]
    }

    /// Renders leaves (positions in `leaf_ids()`) with per-leaf offsets in
    /// `[-jitter, jitter]`, then adds noise from `rng` when `noise > 0`.
    pub fn render(&self, leaves: &[usize], offsets: &[(i64, i64)], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let (c, s, p) = (self.cfg.channels, self.cfg.image_size, self.cfg.patch);
        let mut img = vec![0.0f64; c * s * s];
        for (&k, &(dy, dx)) in leaves.iter().zip(offsets) {
            let (ay, ax) = self.anchors[k];
            let y0 = (ay as i64 + dy) as usize;
            let x0 = (ax as i64 + dx) as usize;
            let t = &self.templates[k];
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        img[ch * s * s + (y0 + y) * s + x0 + x] += SIGNAL_GAIN * t[ch * p * p + y * p + x];
                    }
                }
            }
        }
        let data = img
            .into_iter()
            .map(|v| {
                let n = if self.cfg.noise > 0.0 { self.cfg.noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                quantize(0.5 + v + n)
            })
            .collect();
        Tensor::new(vec![c, s, s], data)
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Generates `cfg.n` samples. Sample `i` always contains leaf `i mod |leaves|`
/// plus up to `max_leaves - 1` further distinct leaves; labels are closed
/// upward.
pub fn synth_dataset(h: &LabelHierarchy, cfg: &SynthConfig) -> Result<Dataset> {
    let leaves = h.leaf_ids();
    if cfg.n < leaves.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover {} leaves",
            cfg.n,
            leaves.len()
        )));
    }
    if cfg.max_leaves == 0 {
        return Err(Error::InvalidArgument("max_leaves must be at least 1".into()));
    }
    let renderer = Renderer::new(h, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let j = cfg.jitter as i64;
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let count = rng.gen_range(1..=cfg.max_leaves.min(leaves.len()));
        let mut picks = vec![i % leaves.len()];
        while picks.len() < count {
            let k = rng.gen_range(0..leaves.len());
            if !picks.contains(&k) {
                picks.push(k);
            }
        }
        let offsets: Vec<(i64, i64)> = picks.iter().map(|_| (rng.gen_range(-j..=j), rng.gen_range(-j..=j))).collect();
        let image = renderer.render(&picks, &offsets, &mut rng)?;
        let ids: Vec<usize> = picks.iter().map(|&k| leaves[k]).collect();
        samples.push(Sample {
            id: format!("synth-{i:05}"),
            image,
            labels: h.closed_vector(&ids)?,
        });
    }
    Ok(Dataset { samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    F32,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::F32 => "f32",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest directory.
    pub image: String,
    /// Positive node names; ancestors may be omitted.
    pub labels: Vec<String>,
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Data(format!("PPM needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional '#' comments, then one whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Data("bad PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Data(format!("expected P6 PPM, found '{}'", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field '{s}'")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Data(format!("only 8-bit PPM is supported (maxval {max})")));
    }
    let raster = bytes.get(i + 1..).unwrap_or(&[]);
    if raster.len() != w * h * 3 {
        return Err(Error::Data(format!("PPM raster has {} bytes, expected {}", raster.len(), w * h * 3)));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Raw tensor file: `MTF1`, rank as u32, four u16 dims (unused ones zero),
/// then little-endian f32 values.
pub fn encode_raw(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.is_empty() || s.len() > 4 || s.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::Data(format!("raw image shape {s:?} does not fit the header")));
    }
    let mut out = Vec::with_capacity(16 + 4 * img.numel());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    for k in 0..4 {
        out.extend_from_slice(&(s.get(k).copied().unwrap_or(0) as u16).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Data("not a raw f32 tensor file".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Data(format!("raw tensor rank {rank} is unsupported")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|k| u16::from_le_bytes([bytes[8 + 2 * k], bytes[9 + 2 * k]]) as usize)
        .collect();
    let body = &bytes[16..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Data(format!("raw tensor body has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

/// Writes images under `dir/images/` and the manifest at `dir/manifest.jsonl`.
pub fn save_dataset(dir: &Path, ds: &Dataset, h: &LabelHierarchy, format: ImageFormat) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Vec::new();
    for s in &ds.samples {
        let rel = format!("images/{}.{}", s.id, format.extension());
        let bytes = match format {
            ImageFormat::Ppm => encode_ppm(&s.image)?,
            ImageFormat::F32 => encode_raw(&s.image)?,
        };
        write_atomic(&dir.join(&rel), &bytes)?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            image: rel,
            labels: s.labels.positives().iter().map(|&i| h.nodes()[i].name.clone()).collect(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    write_atomic(&dir.join(MANIFEST), &manifest)
}

/// Reads `dir/manifest.jsonl` (or a manifest file path directly). Labels are
/// closed upward; unknown names are validation errors.
pub fn load_dataset(path: &Path, h: &LabelHierarchy) -> Result<Dataset> {
    let manifest: PathBuf = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new("."));
    let f = std::fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", manifest.display(), line_no + 1)))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Data(format!("duplicate sample id '{}'", entry.id)));
        }
        let ids = entry
            .labels
            .iter()
            .map(|n| {
                h.id_of(n).ok_or_else(|| Error::Validation {
                    node: n.clone(),
                    reason: format!("label of sample '{}' is not in the hierarchy", entry.id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let img_path = root.join(&entry.image);
        let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = if bytes.starts_with(RAW_MAGIC) { decode_raw(&bytes)? } else { decode_ppm(&bytes)? };
        if image.rank() != 3 {
            return Err(Error::Data(format!("image '{}' is not [C, H, W]", entry.image)));
        }
        samples.push(Sample {
            id: entry.id,
            image,
            labels: h.closed_vector(&ids)?,
        });
    }
    Ok(Dataset { samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub strategy: String,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        // Validation is 10% of the 80% training portion.
        Self {
            train: 0.72,
            val: 0.08,
            test: 0.2,
            strategy: "iterative_stratified".into(),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> Result<[f64; 3]> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
        }
        Ok(f)
    }
}

/// Assigns each sample to fold 0 (train), 1 (val) or 2 (test).
pub trait SplitStrategy {
    fn name(&self) -> &'static str;
    fn assign(&self, labels: &[&LabelVector], fractions: [f64; 3], seed: u64) -> Vec<usize>;
}

/// Greedy label-by-label assignment from the rarest label, keeping each
/// label's frequency close to the fold fractions.
pub struct IterativeStratified;

impl SplitStrategy for IterativeStratified {
    fn name(&self) -> &'static str {
        "iterative_stratified"
    }

    fn assign(&self, labels: &[&LabelVector], fractions: [f64; 3], seed: u64) -> Vec<usize> {
        let n = labels.len();
        let width = labels.first().map_or(0, |y| y.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fold = vec![usize::MAX; n];
        let mut want: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut want_label: Vec<Vec<f64>> = fractions
            .iter()
            .map(|f| {
                (0..width)
                    .map(|l| f * labels.iter().filter(|y| y.get(l)).count() as f64)
                    .collect()
            })
            .collect();
        let open: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
        let mut remaining: BTreeSet<usize> = (0..n).collect();

        let place = |i: usize, label: Option<usize>, rng: &mut ChaCha8Rng, fold: &mut Vec<usize>, want: &mut Vec<f64>, want_label: &mut Vec<Vec<f64>>| {
            let key = |k: usize| (label.map_or(0.0, |l| want_label[k][l]), want[k]);
            let best = open.iter().map(|&k| key(k)).fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 > a.1) { b } else { a }
            });
            let ties: Vec<usize> = open.iter().copied().filter(|&k| key(k) == best).collect();
            let k = ties[rng.gen_range(0..ties.len())];
            fold[i] = k;
            want[k] -= 1.0;
            for l in labels[i].positives() {
                want_label[k][l] -= 1.0;
            }
        };

        loop {
            // Rarest label among unassigned samples; ties broken by label id.
            let mut best: Option<(usize, usize)> = None;
            for l in 0..width {
                let c = remaining.iter().filter(|&&i| labels[i].get(l)).count();
                if c > 0 && best.map_or(true, |(bc, _)| c < bc) {
                    best = Some((c, l));
                }
            }
            let Some((_, l)) = best else { break };
            let mut members: Vec<usize> = remaining.iter().copied().filter(|&i| labels[i].get(l)).collect();
            members.shuffle(&mut rng);
            for i in members {
                place(i, Some(l), &mut rng, &mut fold, &mut want, &mut want_label);
                remaining.remove(&i);
            }
        }
        let mut rest: Vec<usize> = remaining.into_iter().collect();
        rest.shuffle(&mut rng);
        for i in rest {
            place(i, None, &mut rng, &mut fold, &mut want, &mut want_label);
        }
        fold
    }
}

/// Seeded shuffle cut at the cumulative fractions.
pub struct RandomSplit;

impl SplitStrategy for RandomSplit {
    fn name(&self) -> &'static str {
        "random"
    }

    fn assign(&self, labels: &[&LabelVector], fractions: [f64; 3], seed: u64) -> Vec<usize> {
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut1 = (fractions[0] * n as f64).round() as usize;
        let cut2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).max(cut1).min(n);
        let mut fold = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = if pos < cut1 { 0 } else if pos < cut2 { 1 } else { 2 };
        }
        fold
    }
}

pub fn split_registry() -> Registry<(), dyn SplitStrategy> {
    let mut r: Registry<(), dyn SplitStrategy> = Registry::new("split strategy");
    r.register("iterative_stratified", |_| Ok(Box::new(IterativeStratified)));
    r.register("random", |_| Ok(Box::new(RandomSplit)));
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Labels present in the data but absent from the training fold.
    pub missing_in_train: Vec<usize>,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let fractions = spec.fractions()?;
    let strategy = split_registry().build(&spec.strategy, &())?;
    let labels = ds.labels();
    let fold = strategy.assign(&labels, fractions, spec.seed);
    let pick = |k: usize| (0..ds.len()).filter(|&i| fold[i] == k).collect::<Vec<_>>();
    let out = Split {
        train: pick(0),
        val: pick(1),
        test: pick(2),
        missing_in_train: Vec::new(),
    };
    let width = labels[0].len();
    let missing: Vec<usize> = (0..width)
        .filter(|&l| labels.iter().any(|y| y.get(l)) && !out.train.iter().any(|&i| labels[i].get(l)))
        .collect();
    if !missing.is_empty() {
        log::warn!("{} label(s) have no training samples after the split", missing.len());
    }
    Ok(Split {
        missing_in_train: missing,
        ..out
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KShot {
    /// Selected sample indices, ascending.
    pub indices: Vec<usize>,
    /// Selected samples containing each leaf, in `leaf_ids()` order.
    pub per_leaf: Vec<usize>,
}

/// For every leaf draws `min(k, available)` samples containing it and
/// returns the union. Each call resamples independently.
pub fn kshot_sample(ds: &Dataset, h: &LabelHierarchy, k: usize, seed: u64) -> Result<KShot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for &leaf in h.leaf_ids() {
        let mut cands: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].labels.get(leaf)).collect();
        if cands.is_empty() {
            return Err(Error::Data(format!("leaf '{}' has no training samples", h.nodes()[leaf].name)));
        }
        cands.shuffle(&mut rng);
        chosen.extend(cands.into_iter().take(k));
    }
    let indices: Vec<usize> = chosen.into_iter().collect();
    let per_leaf = h
        .leaf_ids()
        .iter()
        .map(|&l| indices.iter().filter(|&&i| ds.samples[i].labels.get(l)).count())
        .collect();
    Ok(KShot { indices, per_leaf })
}
