//! Dataset plumbing: the `Domain` container, portable-graymap ingestion with
//! deterministic resampling, the synthetic distant-domain generators used by
//! the benchmarks, and seeded splitting.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    Target,
}

/// Per-pixel class indices for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("Mask::new", format!("{} pixels", h * w), data.len()));
        }
        Ok(Mask { h, w, data })
    }
}

/// One dataset in one distribution role. Sources are unlabeled by contract;
/// targets carry class labels, segmentation masks, or both.
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub role: Role,
    pub samples: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub masks: Option<Vec<Mask>>,
}

impl Domain {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::data(format!("domain {} has no samples", self.name)));
        }
        let shape = self.samples[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::data(format!(
                "domain {}: samples must be (1, H, W), got {shape:?}",
                self.name
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.shape() != shape {
                return Err(Error::data(format!(
                    "domain {}: sample {i} shape {:?} differs from {shape:?}",
                    self.name,
                    s.shape()
                )));
            }
            if s.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::data(format!(
                    "domain {}: sample {i} has values outside [0,1]",
                    self.name
                )));
            }
        }
        match self.role {
            Role::Source => {
                if self.labels.is_some() {
                    return Err(Error::data(format!(
                        "domain {}: source domains are unlabeled",
                        self.name
                    )));
                }
            }
            Role::Target => {
                if self.labels.is_none() && self.masks.is_none() {
                    return Err(Error::data(format!(
                        "domain {}: target domains need labels or masks",
                        self.name
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.len() {
                return Err(Error::data(format!(
                    "domain {}: {} labels for {} samples",
                    self.name,
                    labels.len(),
                    self.samples.len()
                )));
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.samples.len() {
                return Err(Error::data(format!(
                    "domain {}: {} masks for {} samples",
                    self.name,
                    masks.len(),
                    self.samples.len()
                )));
            }
            for (i, m) in masks.iter().enumerate() {
                if [1, m.h, m.w] != *shape {
                    return Err(Error::data(format!(
                        "domain {}: mask {i} is {}x{}, samples are {shape:?}",
                        self.name, m.h, m.w
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct labels present, sorted.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = match &self.labels {
            Some(l) => l.clone(),
            None => return Vec::new(),
        };
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    fn take(&self, indices: &[usize], name: String) -> Domain {
        Domain {
            name,
            role: self.role,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        }
    }
}

// ===== portable graymap =====

/// Raw 8-bit grayscale image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

/// Strict binary P5 reader: maxval must be 255, header comments and
/// whitespace are tolerated, trailing bytes are not.
pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::data_at(path, msg))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary P5 graymap".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and # comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err("malformed header field".into());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf-8");
        *field = text.parse::<usize>().map_err(|e| e.to_string())?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err(format!("degenerate size {w}x{h}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing single whitespace after maxval".into()),
    }
    let data = &bytes[pos..];
    if data.len() != w * h {
        return Err(format!("expected {} pixel bytes, found {}", w * h, data.len()));
    }
    Ok(GrayImage { h, w, pixels: data.to_vec() })
}

/// Canonical P5 encoding: `P5\n{w} {h}\n255\n` followed by the pixel rows.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    atomic_write(path, &encode_pgm(img))
}

/// Writes via a sibling temp file and rename, so readers never observe a
/// half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ===== geometry =====

/// Center crop to a square of the shorter side, then nearest-neighbour
/// resample to `size`x`size`; source index = (out index * in extent) / size.
pub fn crop_resample(img: &GrayImage, size: usize) -> GrayImage {
    let side = img.h.min(img.w);
    let top = (img.h - side) / 2;
    let left = (img.w - side) / 2;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = top + (y * side) / size;
        for x in 0..size {
            let sx = left + (x * side) / size;
            pixels.push(img.pixels[sy * img.w + sx]);
        }
    }
    GrayImage { h: size, w: size, pixels }
}

fn image_to_tensor(img: &GrayImage) -> Tensor {
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::from_parts(vec![1, img.h, img.w], data)
}

pub fn tensor_to_image(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = match *t.shape() {
        [1, h, w] => (h, w),
        ref s => return Err(Error::shape("tensor_to_image", "(1, H, W)", format!("{s:?}"))),
    };
    let pixels = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage { h, w, pixels })
}

// ===== directory loading =====

/// Loads every `.pgm` in `dir` (lexicographic filename order) as one domain,
/// resampled to `size`x`size`. Labeled targets use `<classindex>_` filename
/// prefixes; a `masks/` subdirectory supplies per-pixel masks under the same
/// filenames.
pub fn load_domain(dir: &Path, role: Role, size: usize) -> Result<Domain> {
    if size == 0 {
        return Err(Error::invalid("load_domain: size must be positive"));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            continue;
        }
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            return Err(Error::data(format!("non-UTF-8 filename in {}", dir.display())));
        };
        if name.ends_with(".pgm") {
            names.push(name.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::data(format!("no .pgm files in {}", dir.display())));
    }

    let mask_dir = dir.join("masks");
    let with_masks = mask_dir.is_dir();
    let mut samples = Vec::with_capacity(names.len());
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut prefixed = 0usize;
    for name in &names {
        let path = dir.join(name);
        let img = crop_resample(&load_pgm(&path)?, size);
        samples.push(image_to_tensor(&img));
        if let Some(label) = label_prefix(name) {
            labels.push(label);
            prefixed += 1;
        }
        if with_masks {
            let mpath = mask_dir.join(name);
            let m = crop_resample(&load_pgm(&mpath)?, size);
            masks.push(Mask { h: m.h, w: m.w, data: m.pixels });
        }
    }
    if prefixed != 0 && prefixed != names.len() {
        return Err(Error::data(format!(
            "{}: {prefixed} of {} files carry a class prefix; label all or none",
            dir.display(),
            names.len()
        )));
    }
    let domain = Domain {
        name: dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("domain")
            .to_string(),
        role,
        samples,
        labels: (prefixed > 0 && role == Role::Target).then_some(labels),
        masks: with_masks.then_some(masks),
    };
    domain.validate()?;
    Ok(domain)
}

fn label_prefix(name: &str) -> Option<usize> {
    let (digits, _) = name.split_once('_')?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Writes a domain as PGM files in the layout `load_domain` reads back:
/// labels become filename prefixes, masks go to a `masks/` subdirectory.
pub fn write_domain(dir: &Path, domain: &Domain) -> Result<()> {
    domain.validate()?;
    for (i, sample) in domain.samples.iter().enumerate() {
        let name = match &domain.labels {
            Some(labels) => format!("{}_{i:04}.pgm", labels[i]),
            None => format!("{i:04}.pgm"),
        };
        write_pgm(&dir.join(&name), &tensor_to_image(sample)?)?;
        if let Some(masks) = &domain.masks {
            let m = &masks[i];
            let img = GrayImage { h: m.h, w: m.w, pixels: m.data.clone() };
            write_pgm(&dir.join("masks").join(&name), &img)?;
        }
    }
    Ok(())
}

// ===== synthetic generators =====

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Distant source: random bright rectangles and ellipses on a dark field.
    Shapes,
    /// Distant source: band-limited cosine noise.
    Textures,
    /// Classification target: two smooth blobs over bright background
    /// clutter; class 1 adds dark speckle lesions inside the blobs.
    BlobsLabeled,
    /// Segmentation data: blob images (speckled on every other sample) with
    /// exact blob-indicator masks.
    BlobsMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

/// Field value of the two-bump blob profile at (y, x).
fn blob_field(bumps: &[(f64, f64, f64)], y: f64, x: f64) -> f64 {
    bumps
        .iter()
        .map(|&(cy, cx, sigma)| {
            let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum()
}

const BLOB_THRESHOLD: f64 = 0.35;

struct BlobImage {
    image: Vec<f64>,
    mask: Vec<u8>,
}

/// Draws one blob image; `speckled` adds the class-1 lesions. The mask is
/// the analytic indicator of the same field the image is shaded from.
fn draw_blob(rng: &mut ChaCha8Rng, size: usize, speckled: bool) -> BlobImage {
    let s = size as f64;
    let mut bumps = Vec::with_capacity(2);
    for _ in 0..2 {
        let cy = s * (0.3 + 0.4 * rng.random::<f64>());
        let cx = s * (0.22 + 0.2 * rng.random::<f64>()) + if bumps.is_empty() { 0.0 } else { s * 0.36 };
        let sigma = s * (0.10 + 0.05 * rng.random::<f64>());
        bumps.push((cy, cx, sigma));
    }
    let background = 0.08 + 0.04 * rng.random::<f64>();
    let mut image = vec![0.0; size * size];
    let mut mask = vec![0u8; size * size];
    let mut interior = Vec::new();
    let mut exterior = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let f = blob_field(&bumps, y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            image[i] = (background + 0.55 * f.min(1.2)).min(1.0);
            if f > BLOB_THRESHOLD {
                mask[i] = 1;
                interior.push(i);
            } else {
                exterior.push(i);
            }
        }
    }
    // bright clutter in the background, drawn for every sample regardless of
    // class; it never overlaps the blobs, so masking them out removes a
    // distraction without touching class signal
    if !exterior.is_empty() {
        let count = 3 + rng.random_range(0..3usize);
        for _ in 0..count {
            let radius = 1 + rng.random_range(0..2usize);
            let reach = radius as isize + 2;
            let clear = |center: usize| -> bool {
                let (cy, cx) = ((center / size) as isize, (center % size) as isize);
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if dy * dy + dx * dx > reach * reach {
                            continue;
                        }
                        let (y, x) = (cy + dy, cx + dx);
                        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                            return false;
                        }
                        if mask[y as usize * size + x as usize] == 1 {
                            return false;
                        }
                    }
                }
                true
            };
            let mut center = exterior[rng.random_range(0..exterior.len())];
            for _ in 0..40 {
                if clear(center) {
                    break;
                }
                center = exterior[rng.random_range(0..exterior.len())];
            }
            let (cy, cx) = (center / size, center % size);
            for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    if dy * dy + dx * dx > (radius * radius) as isize {
                        continue;
                    }
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                        continue;
                    }
                    let i = y as usize * size + x as usize;
                    if mask[i] == 0 {
                        image[i] = (image[i] + 0.5).min(0.95);
                    }
                }
            }
        }
    }
    if speckled && !interior.is_empty() {
        let count = 5 + rng.random_range(0..4usize);
        for _ in 0..count {
            let radius = 1 + rng.random_range(0..2usize);
            // lesion sites keep a 2-pixel margin to the blob border; tiny
            // blobs without room fall back to any interior pixel
            let reach = radius as isize + 2;
            let fits = |center: usize| -> bool {
                let (cy, cx) = ((center / size) as isize, (center % size) as isize);
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if dy * dy + dx * dx > reach * reach {
                            continue;
                        }
                        let (y, x) = (cy + dy, cx + dx);
                        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                            return false;
                        }
                        if mask[y as usize * size + x as usize] == 0 {
                            return false;
                        }
                    }
                }
                true
            };
            let mut center = interior[rng.random_range(0..interior.len())];
            for _ in 0..40 {
                if fits(center) {
                    break;
                }
                center = interior[rng.random_range(0..interior.len())];
            }
            let (cy, cx) = (center / size, center % size);
            for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    if dy * dy + dx * dx > (radius * radius) as isize {
                        continue;
                    }
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                        continue;
                    }
                    let i = y as usize * size + x as usize;
                    image[i] = (image[i] - 0.38).max(0.14);
                }
            }
        }
    }
    // faint per-pixel grain so no two images are exactly alike
    for v in &mut image {
        *v = (*v + 0.02 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
    }
    BlobImage { image, mask }
}

fn draw_shapes(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let background = 0.1 + 0.2 * rng.random::<f64>();
    let mut image = vec![background; size * size];
    let count = 3 + rng.random_range(0..4usize);
    for _ in 0..count {
        let value = 0.4 + 0.6 * rng.random::<f64>();
        if rng.random::<f64>() < 0.5 {
            // axis-aligned rectangle
            let y0 = rng.random_range(0..size);
            let x0 = rng.random_range(0..size);
            let h = 1 + rng.random_range(0..size / 2);
            let w = 1 + rng.random_range(0..size / 2);
            for y in y0..(y0 + h).min(size) {
                for x in x0..(x0 + w).min(size) {
                    image[y * size + x] = value;
                }
            }
        } else {
            let cy = s * rng.random::<f64>();
            let cx = s * rng.random::<f64>();
            let ry = s * (0.05 + 0.2 * rng.random::<f64>());
            let rx = s * (0.05 + 0.2 * rng.random::<f64>());
            for y in 0..size {
                for x in 0..size {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        image[y * size + x] = value;
                    }
                }
            }
        }
    }
    image
}

fn draw_texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let waves = 4 + rng.random_range(0..5usize);
    let mut components = Vec::with_capacity(waves);
    for _ in 0..waves {
        let fy = 1.0 + 5.0 * rng.random::<f64>();
        let fx = 1.0 + 5.0 * rng.random::<f64>();
        let phase = std::f64::consts::TAU * rng.random::<f64>();
        let amp = 0.3 + 0.7 * rng.random::<f64>();
        components.push((fy, fx, phase, amp));
    }
    let mut image = vec![0.0; size * size];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(fy, fx, phase, amp) in &components {
                v += amp
                    * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s + phase).cos();
            }
            image[y * size + x] = v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-9);
    for v in &mut image {
        *v = (*v - lo) / span;
    }
    image
}

/// Deterministic synthetic domain. Labeled output alternates classes and is
/// exactly balanced, so `count` must be even and at least 2.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Domain> {
    if spec.size < 4 {
        return Err(Error::invalid(format!("synthetic size {} too small", spec.size)));
    }
    if spec.count == 0 {
        return Err(Error::invalid("synthetic count must be positive"));
    }
    let labeled = spec.kind == SynthKind::BlobsLabeled;
    if labeled && (spec.count < 2 || spec.count % 2 != 0) {
        return Err(Error::invalid(format!(
            "labeled synthetic domains need an even count of at least 2, got {}",
            spec.count
        )));
    }
    let mut rng = rng::stream(spec.seed, rng::STREAM_SYNTH);
    let size = spec.size;
    let mut samples = Vec::with_capacity(spec.count);
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for i in 0..spec.count {
        match spec.kind {
            SynthKind::Shapes => {
                samples.push(Tensor::from_parts(vec![1, size, size], draw_shapes(&mut rng, size)));
            }
            SynthKind::Textures => {
                samples.push(Tensor::from_parts(vec![1, size, size], draw_texture(&mut rng, size)));
            }
            SynthKind::BlobsLabeled => {
                let class = i % 2;
                let blob = draw_blob(&mut rng, size, class == 1);
                samples.push(Tensor::from_parts(vec![1, size, size], blob.image));
                labels.push(class);
            }
            SynthKind::BlobsMasked => {
                let blob = draw_blob(&mut rng, size, i % 2 == 1);
                samples.push(Tensor::from_parts(vec![1, size, size], blob.image));
                masks.push(Mask { h: size, w: size, data: blob.mask });
            }
        }
    }
    let role = match spec.kind {
        SynthKind::Shapes | SynthKind::Textures => Role::Source,
        SynthKind::BlobsLabeled | SynthKind::BlobsMasked => Role::Target,
    };
    let domain = Domain {
        name: format!("{}-{}", kind_name(spec.kind), spec.seed),
        role,
        samples,
        labels: labeled.then_some(labels),
        masks: (spec.kind == SynthKind::BlobsMasked).then_some(masks),
    };
    domain.validate()?;
    Ok(domain)
}

pub fn kind_name(kind: SynthKind) -> &'static str {
    match kind {
        SynthKind::Shapes => "shapes",
        SynthKind::Textures => "textures",
        SynthKind::BlobsLabeled => "blobs-labeled",
        SynthKind::BlobsMasked => "blobs-masked",
    }
}

// ===== splitting =====

fn shuffled(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Seed-deterministic train/test split. Labeled domains are stratified:
/// every class keeps its proportion within one sample on each side.
pub fn split(domain: &Domain, fraction: f64, seed: u64) -> Result<(Domain, Domain)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let mut rng = rng::stream(seed, rng::STREAM_SPLIT);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    match &domain.labels {
        Some(labels) => {
            for class in domain.classes_present() {
                let mut members: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == class).collect();
                if members.len() < 2 {
                    return Err(Error::data(format!(
                        "stratified split needs at least 2 samples of class {class}, got {}",
                        members.len()
                    )));
                }
                shuffled(&mut members, &mut rng);
                let k = ((fraction * members.len() as f64).round() as usize)
                    .clamp(1, members.len() - 1);
                train_idx.extend_from_slice(&members[..k]);
                test_idx.extend_from_slice(&members[k..]);
            }
            train_idx.sort_unstable();
            test_idx.sort_unstable();
        }
        None => {
            if domain.samples.len() < 2 {
                return Err(Error::data("split needs at least 2 samples"));
            }
            let mut all: Vec<usize> = (0..domain.samples.len()).collect();
            shuffled(&mut all, &mut rng);
            let k = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
            train_idx = all[..k].to_vec();
            test_idx = all[k..].to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
        }
    }
    Ok((
        domain.take(&train_idx, format!("{}-train", domain.name)),
        domain.take(&test_idx, format!("{}-test", domain.name)),
    ))
}
