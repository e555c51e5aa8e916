//! Domain types and dataset handling: registered infrared/visible pairs
//! with optional label maps, the per-class score maps produced by the
//! segmentation generators, signed/unit range conversions, FMB-style
//! directory ingestion, and a deterministic synthetic-scene generator used
//! for ground-truth-complete desk-scale experiments.
//!
//! Disk conventions: 8-bit PNG, grayscale for infrared and labels, RGB for
//! visible, laid out as `<root>/<split>/{Infrared,Visible,Label}/<id>.png`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Range slack when validating unit/signed inputs (absorbs float dust).
const RANGE_TOL: f64 = 1e-5;

/// Class-index convention: names plus the set of ids whose objects are
/// thermally prominent (foreground of the infrared mask).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPalette {
    names: Vec<String>,
    thermal_ids: Vec<u8>,
}

impl LabelPalette {
    /// The 14-class FMB convention. The numeric thermal set {4,8,9,10,11,12}
    /// is authoritative; names are metadata.
    pub fn fmb() -> Self {
        let names = [
            "unlabelled",
            "road",
            "sidewalk",
            "building",
            "lamp",
            "sign",
            "vegetation",
            "sky",
            "person",
            "car",
            "truck",
            "bus",
            "motorcycle",
            "pole",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            thermal_ids: vec![4, 8, 9, 10, 11, 12],
        }
    }

    pub fn new(names: Vec<String>, mut thermal_ids: Vec<u8>) -> Result<Self> {
        thermal_ids.sort_unstable();
        thermal_ids.dedup();
        if names.is_empty() {
            return Err(Error::Config("palette needs at least one class".into()));
        }
        if let Some(&bad) = thermal_ids.iter().find(|&&id| id as usize >= names.len()) {
            return Err(Error::Config(format!(
                "thermal id {bad} out of range for {} classes",
                names.len()
            )));
        }
        Ok(Self { names, thermal_ids })
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn thermal_ids(&self) -> &[u8] {
        &self.thermal_ids
    }

    pub fn is_thermal(&self, id: u8) -> bool {
        self.thermal_ids.contains(&id)
    }
}

/// Dense H*W label image with values in `[0, n)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
}

/// A registered infrared (1-channel) / visible (3-channel) pair in `[0,1]`,
/// with an optional ground-truth label map.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub ir: Tensor<f32>,
    pub vis: Tensor<f32>,
    pub label: Option<LabelMap>,
}

impl ImagePair {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.ir.chw();
        (h, w)
    }
}

/// Per-pixel class scores. `normalized` means every pixel's channel vector
/// is non-negative and sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap<S> {
    pub scores: Tensor<S>,
    pub normalized: bool,
}

impl<S: Scalar> SegMap<S> {
    pub fn n(&self) -> usize {
        self.scores.chw().0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        }
    }
}

/// One split of an FMB-style dataset, discovered from disk.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub role: SplitRole,
    pub ids: Vec<String>,
}

impl DatasetSplit {
    /// Scan `<root>/<split>/Infrared/*.png`; ids are sorted lexicographically.
    pub fn discover(root: &Path, role: SplitRole) -> Result<Self> {
        let dir = root.join(role.dir_name()).join("Infrared");
        if !dir.is_dir() {
            return Err(Error::NotFound(dir));
        }
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(Self {
            root: root.to_path_buf(),
            role,
            ids,
        })
    }

    fn subdir(&self, kind: &str) -> PathBuf {
        self.root.join(self.role.dir_name()).join(kind)
    }

    pub fn ir_path(&self, id: &str) -> PathBuf {
        self.subdir("Infrared").join(format!("{id}.png"))
    }

    pub fn vis_path(&self, id: &str) -> PathBuf {
        self.subdir("Visible").join(format!("{id}.png"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.subdir("Label").join(format!("{id}.png"))
    }
}

/// Load one pair from a split. The label file is loaded when present and
/// validated against the palette size; infrared must decode to one channel
/// and visible to three, and all three images must share H and W.
pub fn load_pair(split: &DatasetSplit, id: &str, palette: &LabelPalette) -> Result<ImagePair> {
    if !split.ids.iter().any(|s| s == id) {
        return Err(Error::NotFound(split.ir_path(id)));
    }
    let ir = load_gray01(&split.ir_path(id))?;
    let vis = load_rgb01(&split.vis_path(id))?;
    let (_, ih, iw) = ir.chw();
    let (_, vh, vw) = vis.chw();
    if (ih, iw) != (vh, vw) {
        return Err(Error::Format(format!(
            "{id}: infrared is {ih}x{iw} but visible is {vh}x{vw}"
        )));
    }
    let label_path = split.label_path(id);
    let label = if label_path.is_file() {
        let lm = load_label(&label_path, palette.n())?;
        if (lm.h, lm.w) != (ih, iw) {
            return Err(Error::Format(format!(
                "{id}: label is {}x{} but images are {ih}x{iw}",
                lm.h, lm.w
            )));
        }
        Some(lm)
    } else {
        None
    };
    Ok(ImagePair {
        id: id.to_string(),
        ir,
        vis,
        label,
    })
}

fn check_range<S: Scalar>(x: &Tensor<S>, lo: f64, hi: f64, what: &str) -> Result<()> {
    for &v in x.data() {
        let v = v.to_f64();
        if !(lo - RANGE_TOL..=hi + RANGE_TOL).contains(&v) || !v.is_finite() {
            return Err(Error::Range(format!(
                "{what}: value {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Affine map `[0,1] -> [-1,1]`, `x -> 2x - 1`.
pub fn to_signed<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    check_range(x, 0.0, 1.0, "to_signed input")?;
    Ok(x.map(|v| v + v - S::ONE))
}

/// Affine map `[-1,1] -> [0,1]`, `x -> (x + 1) / 2`.
pub fn from_signed<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    check_range(x, -1.0, 1.0, "from_signed input")?;
    let half = S::from_f64(0.5);
    Ok(x.map(|v| (v + S::ONE) * half))
}

/// One-hot embedding of a label map into an `n`-channel score map.
pub fn onehot<S: Scalar>(label: &LabelMap, n: usize) -> Result<SegMap<S>> {
    let hw = label.h * label.w;
    let mut scores = Tensor::zeros(&[n, label.h, label.w]);
    for (p, &c) in label.data.iter().enumerate() {
        if c as usize >= n {
            return Err(Error::LabelRange(format!(
                "label value {c} at pixel {p} exceeds class count {n}"
            )));
        }
        scores.data_mut()[c as usize * hw + p] = S::ONE;
    }
    Ok(SegMap {
        scores,
        normalized: true,
    })
}

/// Per-pixel argmax over channels; ties resolve to the lowest index.
pub fn argmax_decode<S: Scalar>(seg: &SegMap<S>) -> LabelMap {
    let (n, h, w) = seg.scores.chw();
    assert!(n >= 1, "segmentation map needs at least one class");
    let hw = h * w;
    let data = (0..hw)
        .map(|p| {
            let mut best = 0u8;
            let mut best_v = seg.scores.data()[p];
            for c in 1..n {
                let v = seg.scores.data()[c * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c as u8;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, data)
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Per-class appearance: a distinct infrared intensity band per class
/// (thermal classes high, the rest low) and a distinct visible color
/// (thermal classes dim, the rest brighter). The classes the scene
/// generator actually paints get hand-picked, widely separated
/// appearances so that desk-scale training budgets suffice; remaining ids
/// fall back to a generic spread.
fn class_appearance(c: u8, palette: &LabelPalette) -> (f64, [f64; 3]) {
    // FMB ids: 1 road, 3 building, 6 vegetation, 7 sky, 8 person, 9 car.
    match c {
        1 => return (0.10, [0.20, 0.20, 0.80]),
        3 => return (0.22, [0.85, 0.25, 0.20]),
        6 => return (0.34, [0.15, 0.75, 0.20]),
        7 => return (0.46, [0.90, 0.85, 0.30]),
        8 => return (0.70, [0.30, 0.12, 0.30]),
        9 => return (0.97, [0.10, 0.25, 0.28]),
        _ => {}
    }
    let thermal: Vec<u8> = palette.thermal_ids().to_vec();
    let ir = if palette.is_thermal(c) {
        let k = thermal.iter().position(|&t| t == c).unwrap() as f64;
        let span = (thermal.len() as f64 - 1.0).max(1.0);
        0.78 + 0.20 * k / span
    } else {
        let others: Vec<u8> = (0..palette.n() as u8)
            .filter(|id| !palette.is_thermal(*id))
            .collect();
        let k = others.iter().position(|&t| t == c).unwrap() as f64;
        let span = (others.len() as f64 - 1.0).max(1.0);
        0.06 + 0.38 * k / span
    };
    let hue = (c as f64 * 0.618_033_988_75 + 0.13).fract();
    let (sat, val) = if palette.is_thermal(c) {
        (0.55, 0.20 + 0.10 * (c as f64 * 0.37).fract())
    } else {
        (0.50, 0.55 + 0.25 * (c as f64 * 0.71).fract())
    };
    (ir, hsv_to_rgb(hue, sat, val))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic scene of geometric primitives on a banded background.
/// Thermal-class regions are bright in infrared and dim in visible;
/// non-thermal regions carry a sinusoidal texture in visible and are flat
/// in infrared. The label map is exact by construction.
pub fn synth_scene(
    seed: u64,
    size: (usize, usize),
    palette: &LabelPalette,
    stride: usize,
) -> Result<ImagePair> {
    let (h, w) = size;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Size(format!(
            "scene size {h}x{w} is not divisible by the network stride {stride}"
        )));
    }
    if palette.thermal_ids().is_empty() || palette.n() < 4 {
        return Err(Error::Config(
            "scene generator needs >= 4 classes and a non-empty thermal set".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    let n = palette.n() as u8;
    // Scenes draw from a fixed, widely separated class inventory when the
    // palette contains it (the FMB convention), so that every class stays
    // learnable at desk-scale training budgets.
    let preferred_bg: Vec<u8> = [1u8, 3, 6, 7]
        .into_iter()
        .filter(|&c| c < n && !palette.is_thermal(c))
        .collect();
    let preferred_th: Vec<u8> = [8u8, 9]
        .into_iter()
        .filter(|&c| c < n && palette.is_thermal(c))
        .collect();
    let non_thermal: Vec<u8> = if preferred_bg.is_empty() {
        (0..n).filter(|c| !palette.is_thermal(*c)).collect()
    } else {
        preferred_bg
    };
    let thermal: Vec<u8> = if preferred_th.is_empty() {
        palette.thermal_ids().to_vec()
    } else {
        preferred_th
    };

    // Banded background from non-thermal classes.
    let mut label = LabelMap::new(h, w, vec![non_thermal[0]; h * w]);
    let n_bands = 3 + rng.below(2);
    let mut cuts: Vec<usize> = (0..n_bands - 1)
        .map(|_| h / 6 + rng.below(2 * h / 3))
        .collect();
    cuts.sort_unstable();
    cuts.push(h);
    let mut band_classes = Vec::new();
    for _ in 0..n_bands {
        band_classes.push(non_thermal[rng.below(non_thermal.len())]);
    }
    let mut y0 = 0;
    for (band, &y1) in cuts.iter().enumerate() {
        for y in y0..y1 {
            for x in 0..w {
                label.data[y * w + x] = band_classes[band];
            }
        }
        y0 = y1;
    }

    // Non-thermal then thermal shapes; thermal painted last so it is never
    // fully occluded.
    let mut paint = |rng: &mut SeededRng, classes: &[u8], count: usize, min_frac: f64| {
        for i in 0..count {
            let c = classes[(rng.below(classes.len()) + i) % classes.len()];
            let sh = ((h as f64) * rng.uniform(min_frac, 0.34)) as usize;
            let sw = ((w as f64) * rng.uniform(min_frac, 0.34)) as usize;
            let (sh, sw) = (sh.max(6), sw.max(6));
            let cy = rng.below(h.saturating_sub(sh).max(1));
            let cx = rng.below(w.saturating_sub(sw).max(1));
            let ellipse = rng.below(2) == 0;
            for y in cy..(cy + sh).min(h) {
                for x in cx..(cx + sw).min(w) {
                    if ellipse {
                        let dy = (y as f64 - (cy as f64 + sh as f64 / 2.0)) / (sh as f64 / 2.0);
                        let dx = (x as f64 - (cx as f64 + sw as f64 / 2.0)) / (sw as f64 / 2.0);
                        if dy * dy + dx * dx > 1.0 {
                            continue;
                        }
                    }
                    label.data[y * w + x] = c;
                }
            }
        }
    };
    let n_bg_shapes = 2 + rng.below(3);
    paint(&mut rng, &non_thermal, n_bg_shapes, 0.16);
    let n_th_shapes = 2 + rng.below(3);
    paint(&mut rng, &thermal, n_th_shapes, 0.18);

    // Render both modalities from the label map.
    let mut ir = Tensor::zeros(&[1, h, w]);
    let mut vis = Tensor::zeros(&[3, h, w]);
    let tex_amp = 0.04;
    let tex_fx = rng.uniform(0.05, 0.25);
    let tex_fy = rng.uniform(0.05, 0.25);
    let tex_phase = rng.uniform(0.0, std::f64::consts::TAU);
    let appearance: Vec<(f64, [f64; 3])> =
        (0..n).map(|c| class_appearance(c, palette)).collect();
    for y in 0..h {
        for x in 0..w {
            let c = label.data[y * w + x];
            let (ir_base, rgb) = appearance[c as usize];
            let noise = rng.normal() * 0.005;
            ir.data_mut()[y * w + x] = (ir_base + noise).clamp(0.0, 1.0) as f32;
            let tex = if palette.is_thermal(c) {
                0.0
            } else {
                tex_amp * (tex_fx * x as f64 + tex_fy * y as f64 + tex_phase).sin()
            };
            for ch in 0..3 {
                let noise = rng.normal() * 0.005;
                vis.data_mut()[ch * h * w + y * w + x] =
                    (rgb[ch] + tex + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(ImagePair {
        id: format!("{seed:05}"),
        ir,
        vis,
        label: Some(label),
    })
}

// ---------------------------------------------------------------------------
// Color space
// ---------------------------------------------------------------------------

/// BT.601 luminance plane of an RGB image.
pub fn luminance(vis: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = vis.chw();
    assert_eq!(c, 3, "luminance expects RGB");
    let hw = h * w;
    let data = (0..hw)
        .map(|p| {
            0.299 * vis.data()[p] + 0.587 * vis.data()[hw + p] + 0.114 * vis.data()[2 * hw + p]
        })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Replace the luminance plane of `vis` with `y`, keeping its chrominance
/// (YCbCr recombination), clamped to `[0,1]`.
pub fn attach_chroma(y: &Tensor<f32>, vis: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = y.chw();
    let (c, vh, vw) = vis.chw();
    assert_eq!((c, vh, vw), (3, h, w), "chrominance source shape");
    let hw = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    for p in 0..hw {
        let (r, g, b) = (
            vis.data()[p] as f64,
            vis.data()[hw + p] as f64,
            vis.data()[2 * hw + p] as f64,
        );
        let y_src = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = 0.564 * (b - y_src);
        let cr = 0.713 * (r - y_src);
        let yf = y.data()[p] as f64;
        let nr = yf + cr / 0.713;
        let nb = yf + cb / 0.564;
        let ng = (yf - 0.299 * nr - 0.114 * nb) / 0.587;
        out.data_mut()[p] = nr.clamp(0.0, 1.0) as f32;
        out.data_mut()[hw + p] = ng.clamp(0.0, 1.0) as f32;
        out.data_mut()[2 * hw + p] = nb.clamp(0.0, 1.0) as f32;
    }
    out
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

/// Strictly 8-bit grayscale.
pub fn load_gray01(path: &Path) -> Result<Tensor<f32>> {
    match open_image(path)? {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Ok(Tensor::new(vec![1, h as usize, w as usize], data))
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Strictly 8-bit RGB.
pub fn load_rgb01(path: &Path) -> Result<Tensor<f32>> {
    match open_image(path)? {
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut t = Tensor::zeros(&[3, h, w]);
            for (p, px) in img.pixels().enumerate() {
                for ch in 0..3 {
                    t.data_mut()[ch * h * w + p] = px.0[ch] as f32 / 255.0;
                }
            }
            Ok(t)
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit RGB, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn load_label(path: &Path, n: usize) -> Result<LabelMap> {
    match open_image(path)? {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.as_raw().clone();
            if let Some(&bad) = data.iter().find(|&&v| v as usize >= n) {
                return Err(Error::LabelRange(format!(
                    "{}: label value {bad} exceeds class count {n}",
                    path.display()
                )));
            }
            Ok(LabelMap::new(h as usize, w as usize, data))
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit grayscale label, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray01(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 1, "save_gray01 expects one channel");
    let buf: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

pub fn save_rgb01(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3, "save_rgb01 expects three channels");
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            buf.push(quantize(t.data()[ch * hw + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Raw class indices as 8-bit grayscale (bit-exact round trip).
pub fn save_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    let img =
        image::GrayImage::from_raw(label.w as u32, label.h as u32, label.data.clone())
            .expect("buffer size");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Mirror a pair (and its label) horizontally. Optional train-time
/// augmentation; off by default.
pub fn hflip_pair(pair: &ImagePair) -> ImagePair {
    let flip_t = |t: &Tensor<f32>| -> Tensor<f32> {
        let (c, h, w) = t.chw();
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ci, y, x, t.at(ci, y, w - 1 - x));
                }
            }
        }
        out
    };
    let label = pair.label.as_ref().map(|l| {
        let mut data = vec![0u8; l.h * l.w];
        for y in 0..l.h {
            for x in 0..l.w {
                data[y * l.w + x] = l.at(y, l.w - 1 - x);
            }
        }
        LabelMap::new(l.h, l.w, data)
    });
    ImagePair {
        id: pair.id.clone(),
        ir: flip_t(&pair.ir),
        vis: flip_t(&pair.vis),
        label,
    }
}

/// Crop a window out of a pair (and its label).
pub fn crop_pair(pair: &ImagePair, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<ImagePair> {
    let (h, w) = pair.size();
    if y0 + ch > h || x0 + cw > w {
        return Err(Error::Size(format!(
            "crop {ch}x{cw}+{y0}+{x0} exceeds image {h}x{w}"
        )));
    }
    let crop_t = |t: &Tensor<f32>| -> Tensor<f32> {
        let (c, _, _) = t.chw();
        let mut out = Tensor::zeros(&[c, ch, cw]);
        for ci in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    out.set(ci, y, x, t.at(ci, y0 + y, x0 + x));
                }
            }
        }
        out
    };
    let label = pair.label.as_ref().map(|l| {
        let mut data = vec![0u8; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                data[y * cw + x] = l.at(y0 + y, x0 + x);
            }
        }
        LabelMap::new(ch, cw, data)
    });
    Ok(ImagePair {
        id: pair.id.clone(),
        ir: crop_t(&pair.ir),
        vis: crop_t(&pair.vis),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_roundtrip_and_endpoints() {
        let t = Tensor::<f64>::new(vec![3], vec![0.0, 0.5, 1.0]);
        let s = to_signed(&t).unwrap();
        assert_eq!(s.data(), &[-1.0, 0.0, 1.0]);
        let back = from_signed(&s).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7);
        }

        let mut rng = SeededRng::new(3);
        let v = Tensor::<f64>::new(vec![1000], (0..1000).map(|_| rng.next_f64()).collect());
        let rt = from_signed(&to_signed(&v).unwrap()).unwrap();
        for (a, b) in rt.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-7);
        }

        let bad = Tensor::<f64>::new(vec![1], vec![1.5]);
        assert!(matches!(to_signed(&bad), Err(Error::Range(_))));
    }

    #[test]
    fn onehot_definition_and_inverse() {
        let l = LabelMap::new(1, 1, vec![3]);
        let seg = onehot::<f64>(&l, 4).unwrap();
        assert_eq!(seg.scores.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(seg.normalized);

        // exhaustive inverse for n<=4 on 2x2 grids
        for n in 1..=4u8 {
            let cells = 4usize;
            for code in 0..(n as usize).pow(cells as u32) {
                let mut v = Vec::with_capacity(cells);
                let mut rest = code;
                for _ in 0..cells {
                    v.push((rest % n as usize) as u8);
                    rest /= n as usize;
                }
                let l = LabelMap::new(2, 2, v);
                let seg = onehot::<f64>(&l, n as usize).unwrap();
                assert_eq!(argmax_decode(&seg), l);
            }
        }

        // randomized inverse for n=14
        let mut rng = SeededRng::new(9);
        for _ in 0..20 {
            let data: Vec<u8> = (0..48).map(|_| rng.below(14) as u8).collect();
            let l = LabelMap::new(6, 8, data);
            let seg = onehot::<f32>(&l, 14).unwrap();
            assert_eq!(argmax_decode(&seg), l);
            // per-pixel sums are exactly one
            for p in 0..48 {
                let s: f32 = (0..14).map(|c| seg.scores.data()[c * 48 + p]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }

        let bad = LabelMap::new(1, 1, vec![14]);
        assert!(matches!(onehot::<f64>(&bad, 14), Err(Error::LabelRange(_))));
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let uniform = SegMap {
            scores: Tensor::<f64>::full(&[3, 2, 2], 1.0 / 3.0),
            normalized: true,
        };
        assert!(argmax_decode(&uniform).data.iter().all(|&v| v == 0));

        let seg = SegMap {
            scores: Tensor::<f64>::new(vec![3, 1, 1], vec![0.1, 0.7, 0.2]),
            normalized: true,
        };
        assert_eq!(argmax_decode(&seg).data, vec![1]);
    }

    #[test]
    fn synth_scene_is_deterministic_and_thermally_consistent() {
        let palette = LabelPalette::fmb();
        let a = synth_scene(42, (64, 64), &palette, 8).unwrap();
        let b = synth_scene(42, (64, 64), &palette, 8).unwrap();
        assert_eq!(a.ir, b.ir);
        assert_eq!(a.vis, b.vis);
        assert_eq!(a.label, b.label);

        for seed in 0..100 {
            let p = synth_scene(seed, (48, 48), &palette, 8).unwrap();
            let label = p.label.as_ref().unwrap();
            let (mut th_sum, mut th_n, mut bg_sum, mut bg_n) = (0f64, 0usize, 0f64, 0usize);
            for (px, &c) in label.data.iter().enumerate() {
                let v = p.ir.data()[px] as f64;
                if palette.is_thermal(c) {
                    th_sum += v;
                    th_n += 1;
                } else {
                    bg_sum += v;
                    bg_n += 1;
                }
            }
            assert!(th_n > 0 && bg_n > 0, "seed {seed} lacks a region");
            assert!(
                th_sum / th_n as f64 > bg_sum / bg_n as f64,
                "seed {seed}: thermal regions must be brighter in ir"
            );
            assert!(label.data.iter().all(|&v| v < 14));
        }

        assert!(matches!(
            synth_scene(0, (65, 64), &palette, 8),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn png_roundtrip_and_format_errors() {
        let dir = std::env::temp_dir().join(format!("semfuse-dm-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let palette = LabelPalette::fmb();
        let pair = synth_scene(7, (32, 32), &palette, 8).unwrap();
        let base = dir.join("train");
        save_gray01(&base.join("Infrared/00007.png"), &pair.ir).unwrap();
        save_rgb01(&base.join("Visible/00007.png"), &pair.vis).unwrap();
        save_label_png(&base.join("Label/00007.png"), pair.label.as_ref().unwrap()).unwrap();

        let split = DatasetSplit::discover(&dir, SplitRole::Train).unwrap();
        assert_eq!(split.ids, vec!["00007"]);
        let loaded = load_pair(&split, "00007", &palette).unwrap();
        assert_eq!(loaded.size(), (32, 32));
        assert_eq!(loaded.label.as_ref().unwrap(), pair.label.as_ref().unwrap());
        // 8-bit quantization bound
        for (a, b) in loaded.ir.data().iter().zip(pair.ir.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        // a grayscale file in the Visible slot is a format error
        save_gray01(&dir.join("train/Visible/00008.png"), &pair.ir).unwrap();
        save_gray01(&dir.join("train/Infrared/00008.png"), &pair.ir).unwrap();
        let split = DatasetSplit::discover(&dir, SplitRole::Train).unwrap();
        assert!(matches!(
            load_pair(&split, "00008", &palette),
            Err(Error::Format(_))
        ));

        // a label containing the value n is rejected
        let bad = LabelMap::new(32, 32, vec![14; 32 * 32]);
        save_label_png(&dir.join("train/Label/00009.png"), &bad).unwrap();
        assert!(matches!(
            load_label(&dir.join("train/Label/00009.png"), 14),
            Err(Error::LabelRange(_))
        ));

        assert!(matches!(
            load_pair(&split, "99999", &palette),
            Err(Error::NotFound(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn luminance_chroma_rebuild_is_consistent() {
        let palette = LabelPalette::fmb();
        let pair = synth_scene(11, (32, 32), &palette, 8).unwrap();
        let y = luminance(&pair.vis);
        let rebuilt = attach_chroma(&y, &pair.vis);
        for (a, b) in rebuilt.data().iter().zip(pair.vis.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
