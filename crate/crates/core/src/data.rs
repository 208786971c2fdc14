//! Dataset loaders (IDX, binary PGM trees, Omniglot PNG trees), the
//! synthetic template generator, and the pair / episode samplers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images `[N, 1, H, W]` with values in `[0, 1]` and a class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if images.shape()[1] != 1 {
            return Err(Error::Dimension(format!(
                "dataset images must have one channel, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "pixel value {} at flat index {i} is outside [0, 1]",
                images.data()[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[1, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Member indices per class id, in ascending class order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.by_class().into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class().len()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// Seeded shuffle, then the first `n` images and the remainder.
    pub fn shuffled_split(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::Parameter(format!(
                "cannot take {n} images from a dataset of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.select(&order[..n]), self.select(&order[n..])))
    }

    /// Keeps only the given classes.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&keep)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Parses IDX image and label files (big-endian headers, one byte per pixel).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    let magic = read_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("images magic is {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let need = 16 + n * rows * cols;
    if images.len() < need {
        return Err(Error::format(images.len() as u64, format!("images file truncated: need {need} bytes")));
    }
    let magic = read_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("labels magic is {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let nl = read_u32(labels, 4)? as usize;
    if nl != n {
        return Err(Error::format(4, format!("label count {nl} does not match image count {n}")));
    }
    if labels.len() < 8 + n {
        return Err(Error::format(labels.len() as u64, format!("labels file truncated: need {} bytes", 8 + n)));
    }
    let pixels = images[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let tensor = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    Ok((tensor, labels[8..8 + n].iter().map(|&b| usize::from(b)).collect()))
}

/// Loads an IDX image/label pair, scaling bytes by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let (tensor, labels) = parse_idx(&images, &labels)?;
    Dataset::new(tensor, labels, "mnist")
}

/// Serializes images (rounded to bytes) and labels into IDX files.
pub fn encode_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (n, h, w) = (ds.len(), ds.images.shape()[2], ds.images.shape()[3]);
    let mut images = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    (images, labels)
}

/// A decoded 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Decodes a binary (P5) PGM with maxval 255. Header comments are allowed.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.get(0..2) != Some(b"P5") {
        return Err(Error::format(0, "not a binary PGM (expected P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos as u64, "unexpected end of PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos as u64, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height;
    let pixels = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("pixel data truncated: need {need} bytes")))?
        .to_vec();
    Ok(GrayImage { width, height, pixels })
}

/// Area-averaging resample of a `[0, 1]` image to `out_h × out_w`. Each
/// output pixel is the overlap-weighted mean of the source pixels its
/// footprint covers, which also handles upsampling.
pub fn resize_area(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let wy = weights(h, out_h);
    let wx = weights(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for ty in &wy {
        for tx in &wx {
            let mut acc = 0.0;
            for &(y, a) in ty {
                for &(x, b) in tx {
                    acc += a * b * src[y * w + x];
                }
            }
            out.push(acc.clamp(0.0, 1.0));
        }
    }
    out
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a tree of per-subject directories of P5 PGM files. Class ids follow
/// the sorted subdirectory order; images are area-resampled to `side × side`.
pub fn load_pgm_dir(root: &Path, side: usize) -> Result<Dataset> {
    let subjects = sorted_entries(root, true)?;
    if subjects.is_empty() {
        return Err(Error::format(0, format!("{} has no subject directories", root.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in subjects.iter().enumerate() {
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(Error::format(0, format!("{} contains no images", dir.display())));
        }
        for file in files {
            let img = parse_pgm(&fs::read(&file)?).map_err(|e| match e {
                Error::Format { offset, message } => Error::format(offset, format!("{}: {message}", file.display())),
                other => other,
            })?;
            let unit: Vec<f64> = img.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
            pixels.extend(resize_area(&unit, img.height, img.width, side, side));
            labels.push(class);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, side, side], pixels)?, labels, "att")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmniglotSplit {
    Background,
    Evaluation,
}

impl OmniglotSplit {
    pub fn dir_name(self) -> &'static str {
        match self {
            OmniglotSplit::Background => "background",
            OmniglotSplit::Evaluation => "evaluation",
        }
    }
}

fn decode_png_gray(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let data = &buf[..info.buffer_size()];
    let pixels = data
        .chunks(channels)
        .map(|px| match channels {
            1 | 2 => px[0],
            _ => ((u16::from(px[0]) + u16::from(px[1]) + u16::from(px[2])) / 3) as u8,
        })
        .collect();
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Loads `<root>/<split>/<alphabet>/<character>/<sample>.png`. Each
/// (alphabet, character) pair becomes one class, numbered densely in sorted
/// order. Images are resampled to `side × side` and binarized at 0.5 with
/// ink (dark strokes) mapped to 1.
pub fn load_omniglot_dir(root: &Path, split: OmniglotSplit, side: usize) -> Result<Dataset> {
    let base = root.join(split.dir_name());
    if !base.is_dir() {
        return Err(Error::format(0, format!("missing split directory {}", base.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut class = 0;
    for alphabet in sorted_entries(&base, true)? {
        for character in sorted_entries(&alphabet, true)? {
            let samples: Vec<PathBuf> = sorted_entries(&character, false)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            if samples.is_empty() {
                continue;
            }
            for sample in samples {
                let img = decode_png_gray(&sample)?;
                let unit: Vec<f64> = img.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
                let small = resize_area(&unit, img.height, img.width, side, side);
                pixels.extend(small.into_iter().map(|v| if v < 0.5 { 1.0 } else { 0.0 }));
                labels.push(class);
            }
            class += 1;
        }
    }
    if labels.is_empty() {
        return Err(Error::format(0, format!("no PNG samples under {}", base.display())));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, side, side], pixels)?, labels, "omniglot")
}

/// Noise standard deviation used by [`make_synthetic`].
pub const SYNTHETIC_NOISE_STD: f64 = 0.05;

/// Class template on a `side × side` canvas: one horizontal bar, one vertical
/// bar, and one Gaussian blob, all placed by a class-keyed generator so the
/// templates do not depend on the dataset seed.
pub fn synthetic_template(class: usize, side: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e3a_1c00 ^ class as u64);
    let s = side as f64;
    let thick = (side / 14).max(1);
    let row = rng.random_range(0..side - thick + 1);
    let col = rng.random_range(0..side - thick + 1);
    let (by, bx) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
    let radius = rng.random_range(0.08 * s..0.16 * s);
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut v: f64 = 0.0;
            if (row..row + thick).contains(&y) || (col..col + thick).contains(&x) {
                v = 0.8;
            }
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            v = v.max((-d2 / (2.0 * radius * radius)).exp());
            img[y * side + x] = v;
        }
    }
    img
}

/// Deterministic class-template dataset with seeded pixel noise.
pub fn make_synthetic(classes: usize, per_class: usize, side: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if side < 4 {
        return Err(Error::Parameter(format!("image side {side} is too small")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Parameter(format!("noise std {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    let templates: Vec<Vec<f64>> = (0..classes).map(|c| synthetic_template(c, side)).collect();
    for i in 0..per_class {
        let _ = i;
        for (c, t) in templates.iter().enumerate() {
            pixels.extend(t.iter().map(|&v| {
                if noise_std == 0.0 {
                    v
                } else {
                    (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
                }
            }));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, side, side], pixels)?, labels, "synthetic")
}

/// Synthetic dataset served by [`load_dataset`]: 10 classes × 50 images, 28×28.
pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_PER_CLASS: usize = 50;
/// Side of the synthetic and Omniglot images.
pub const SMALL_SIDE: usize = 28;
/// Side of the face images.
pub const FACE_SIDE: usize = 100;

/// IDX file pairs [`load_mnist_dir`] looks for, in order.
pub const MNIST_FILE_PAIRS: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("mnist-sample-images-idx3-ubyte", "mnist-sample-labels-idx1-ubyte"),
];

/// Loads the first IDX pair from [`MNIST_FILE_PAIRS`] present in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    for (images, labels) in MNIST_FILE_PAIRS {
        let (i, l) = (dir.join(images), dir.join(labels));
        if i.is_file() && l.is_file() {
            return load_idx(&i, &l);
        }
    }
    let names: Vec<&str> = MNIST_FILE_PAIRS.iter().map(|p| p.0).collect();
    Err(Error::Parameter(format!(
        "no IDX image/label pair in {} (looked for {})",
        dir.display(),
        names.join(", ")
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Att,
    Omniglot,
    Synthetic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [DatasetKind::Mnist, DatasetKind::Att, DatasetKind::Omniglot, DatasetKind::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Att => "att",
            DatasetKind::Omniglot => "omniglot",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown dataset '{s}' (valid: mnist, att, omniglot, synthetic)")))
    }
}

/// Loads a named dataset. Everything but `synthetic` needs `dir`; the
/// Omniglot `split` is ignored by the other sources.
pub fn load_dataset(kind: DatasetKind, dir: Option<&Path>, split: OmniglotSplit) -> Result<Dataset> {
    let need_dir = || dir.ok_or_else(|| Error::Parameter(format!("dataset '{kind}' needs a data directory")));
    match kind {
        DatasetKind::Synthetic => make_synthetic(SYNTHETIC_CLASSES, SYNTHETIC_PER_CLASS, SMALL_SIDE, SYNTHETIC_NOISE_STD, 0),
        DatasetKind::Mnist => load_mnist_dir(need_dir()?),
        DatasetKind::Att => load_pgm_dir(need_dir()?, FACE_SIDE),
        DatasetKind::Omniglot => load_omniglot_dir(need_dir()?, split, SMALL_SIDE),
    }
}

/// Image pairs with same/different labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub y: Vec<PairLabel>,
    /// Dataset indices of `(x1, x2)`.
    pub indices: Vec<(usize, usize)>,
}

/// Seeded [`sample_pairs_with`].
pub fn sample_pairs(ds: &Dataset, batch: usize, seed: u64) -> Result<PairBatch> {
    sample_pairs_with(ds, batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `⌈B/2⌉` similar and `⌊B/2⌋` dissimilar pairs, alternating. Similar pairs
/// pick a class uniformly and two distinct members of it; dissimilar pairs
/// pick two distinct classes uniformly and one member of each.
pub fn sample_pairs_with(ds: &Dataset, batch: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    if batch == 0 {
        return Err(Error::Parameter("pair batch size must be positive".into()));
    }
    let groups: Vec<Vec<usize>> = ds.by_class().into_values().collect();
    if groups.len() < 2 {
        return Err(Error::Sampling(format!("need at least 2 classes, dataset has {}", groups.len())));
    }
    if let Some((class, _)) = ds.class_counts().into_iter().find(|&(_, n)| n < 2) {
        return Err(Error::Sampling(format!("class {class} has fewer than 2 members")));
    }
    let mut indices = Vec::with_capacity(batch);
    let mut y = Vec::with_capacity(batch);
    for i in 0..batch {
        if i % 2 == 0 {
            let g = &groups[rng.random_range(0..groups.len())];
            let a = rng.random_range(0..g.len());
            let mut b = rng.random_range(0..g.len() - 1);
            if b >= a {
                b += 1;
            }
            indices.push((g[a], g[b]));
            y.push(PairLabel::Similar);
        } else {
            let ca = rng.random_range(0..groups.len());
            let mut cb = rng.random_range(0..groups.len() - 1);
            if cb >= ca {
                cb += 1;
            }
            let (ga, gb) = (&groups[ca], &groups[cb]);
            indices.push((ga[rng.random_range(0..ga.len())], gb[rng.random_range(0..gb.len())]));
            y.push(PairLabel::Dissimilar);
        }
    }
    let left: Vec<usize> = indices.iter().map(|p| p.0).collect();
    let right: Vec<usize> = indices.iter().map(|p| p.1).collect();
    Ok(PairBatch {
        x1: ds.images.select(&left),
        x2: ds.images.select(&right),
        y,
        indices,
    })
}

/// N-way K-shot support set plus query images from the same classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

pub fn sample_episode(ds: &Dataset, n_way: usize, k_shot: usize, queries: usize, seed: u64) -> Result<Episode> {
    sample_episode_with(ds, n_way, k_shot, queries, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Draws `n_way` distinct classes, `k_shot` supports each, and `queries`
/// query images spread round-robin over the chosen classes. Supports and
/// queries never share an image.
pub fn sample_episode_with(
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Parameter("n_way and k_shot must be positive".into()));
    }
    let per_class_queries = queries.div_ceil(n_way);
    let need = k_shot + per_class_queries;
    let eligible: Vec<(usize, Vec<usize>)> = ds.by_class().into_iter().filter(|(_, m)| m.len() >= need).collect();
    if eligible.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way episode needs {n_way} classes with at least {need} images, found {}",
            eligible.len()
        )));
    }
    let picked: Vec<&(usize, Vec<usize>)> = eligible.choose_multiple(rng, n_way).collect();
    let mut support_indices = Vec::with_capacity(n_way * k_shot);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut pools = Vec::with_capacity(n_way);
    for (class, members) in &picked {
        let chosen: Vec<usize> = members.choose_multiple(rng, need).copied().collect();
        support_indices.extend_from_slice(&chosen[..k_shot]);
        support_labels.extend(std::iter::repeat_n(*class, k_shot));
        pools.push((*class, chosen[k_shot..].to_vec()));
    }
    let mut query_indices = Vec::with_capacity(queries);
    let mut query_labels = Vec::with_capacity(queries);
    for q in 0..queries {
        let (class, pool) = &pools[q % n_way];
        query_indices.push(pool[q / n_way]);
        query_labels.push(*class);
    }
    Ok(Episode {
        support: ds.images.select(&support_indices),
        support_labels,
        query: ds.images.select(&query_indices),
        query_labels,
        support_indices,
        query_indices,
    })
}
