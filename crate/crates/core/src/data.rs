//! Instances, crop transforms, the synthetic stick-figure generator and the
//! multi-task batch sampler.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::Keypoint;
use crate::{Error, Real, Result, Rng, Tensor};

/// Extra context around a person box when cropping.
pub const BOX_PADDING: f64 = 1.25;

/// Description of one keypoint dataset (one task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub task_id: usize,
    pub num_keypoints: usize,
    #[serde(default)]
    pub keypoint_names: Vec<String>,
    /// Skeleton edges as keypoint index pairs.
    #[serde(default)]
    pub skeleton: Vec<(usize, usize)>,
    /// Left/right pairs swapped by a horizontal flip.
    #[serde(default)]
    pub flip_pairs: Vec<(usize, usize)>,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub annotation_path: String,
    /// Directory the image file names are relative to; the annotation
    /// file's directory when empty.
    #[serde(default)]
    pub image_root: String,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_keypoints;
        if n == 0 || self.sigmas.len() != n || self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(alloc::format!(
                "dataset `{}`: need {n} positive sigmas, found {}",
                self.name,
                self.sigmas.len()
            )));
        }
        if self.flip_pairs.iter().chain(&self.skeleton).any(|&(a, b)| a >= n || b >= n) {
            return Err(Error::Config(alloc::format!("dataset `{}`: keypoint index out of range", self.name)));
        }
        Ok(())
    }

    /// The 17-keypoint COCO body layout.
    pub fn coco() -> Self {
        let names = [
            "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder", "left_elbow",
            "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip", "left_knee", "right_knee",
            "left_ankle", "right_ankle",
        ];
        DatasetSpec {
            name: String::from("coco"),
            task_id: 0,
            num_keypoints: 17,
            keypoint_names: names.iter().map(|s| String::from(*s)).collect(),
            skeleton: vec![
                (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6), (5, 7), (6, 8), (7, 9),
                (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
            ],
            flip_pairs: vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
            sigmas: crate::metrics::COCO_SIGMAS.to_vec(),
            annotation_path: String::new(),
            image_root: String::new(),
        }
    }

    /// Layout of the synthetic stick figures, truncated to `n` joints.
    pub fn synthetic(n: usize) -> Result<Self> {
        if n == 0 || n > SYNTH_JOINTS {
            return Err(Error::invalid("synthetic", alloc::format!("supports 1..={SYNTH_JOINTS} keypoints")));
        }
        let keep = |&(a, b): &(usize, usize)| a < n && b < n;
        Ok(DatasetSpec {
            name: String::from("synthetic"),
            task_id: 0,
            num_keypoints: n,
            keypoint_names: SYNTH_NAMES[..n].iter().map(|s| String::from(*s)).collect(),
            skeleton: SYNTH_EDGES.iter().copied().filter(keep).collect(),
            flip_pairs: SYNTH_FLIP.iter().copied().filter(keep).collect(),
            sigmas: vec![0.079; n],
            annotation_path: String::new(),
            image_root: String::new(),
        })
    }
}

/// One annotated body instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub id: u64,
    pub image_id: u64,
    pub task: usize,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub keypoints: Vec<Keypoint>,
}

impl PoseInstance {
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }
}

/// Affine map from source image pixels to crop pixels. Pixel centres sit at
/// integer coordinates; the box centre maps to the crop centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub center: (f64, f64),
    /// Source extent `(w, h)` covered by the crop.
    pub scale: (f64, f64),
    /// Counter-clockwise rotation in degrees.
    pub rotation: f64,
    pub output: (usize, usize),
    pub flip: bool,
}

impl CropTransform {
    /// Crop around `bbox [x, y, w, h]` with the box padded by
    /// [`BOX_PADDING`] and widened to the output aspect ratio.
    pub fn from_box(bbox: [f64; 4], output: (usize, usize)) -> Result<Self> {
        let [x, y, w, h] = bbox;
        if !(w > 0.0 && h > 0.0) || output.0 == 0 || output.1 == 0 {
            return Err(Error::invalid("crop_affine", "degenerate box or output size"));
        }
        let aspect = output.1 as f64 / output.0 as f64;
        let (mut sw, mut sh) = (w, h);
        if sw > aspect * sh {
            sh = sw / aspect;
        } else {
            sw = sh * aspect;
        }
        Ok(CropTransform {
            center: (x + w / 2.0, y + h / 2.0),
            scale: (sw * BOX_PADDING, sh * BOX_PADDING),
            rotation: 0.0,
            output,
            flip: false,
        })
    }

    fn zoom(&self) -> f64 {
        self.output.1 as f64 / self.scale.0
    }

    fn out_centre(&self) -> (f64, f64) {
        ((self.output.1 as f64 - 1.0) / 2.0, (self.output.0 as f64 - 1.0) / 2.0)
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (mut dx, dy) = (x - self.center.0, y - self.center.1);
        if self.flip {
            dx = -dx;
        }
        let t = self.rotation.to_radians();
        let (s, c) = (libm::sin(t), libm::cos(t));
        // image y points down, so a counter-clockwise turn on screen
        let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
        let z = self.zoom();
        let o = self.out_centre();
        (o.0 + z * rx, o.1 + z * ry)
    }

    pub fn invert(&self, (u, v): (f64, f64)) -> (f64, f64) {
        let z = self.zoom();
        let o = self.out_centre();
        let (rx, ry) = ((u - o.0) / z, (v - o.1) / z);
        let t = self.rotation.to_radians();
        let (s, c) = (libm::sin(t), libm::cos(t));
        let (mut dx, dy) = (c * rx - s * ry, s * rx + c * ry);
        if self.flip {
            dx = -dx;
        }
        (self.center.0 + dx, self.center.1 + dy)
    }

    /// Keypoints in crop coordinates, with left/right swapped under a flip.
    pub fn keypoints(&self, kps: &[Keypoint], flip_pairs: &[(usize, usize)]) -> Vec<Keypoint> {
        let mut out: Vec<Keypoint> = kps
            .iter()
            .map(|k| {
                let (x, y) = self.apply((k.x, k.y));
                Keypoint { x, y, ..*k }
            })
            .collect();
        if self.flip {
            for &(a, b) in flip_pairs {
                out.swap(a, b);
            }
        }
        out
    }

    /// Keypoints mapped back from crop to source coordinates.
    pub fn keypoints_back(&self, kps: &[Keypoint], flip_pairs: &[(usize, usize)]) -> Vec<Keypoint> {
        let mut out: Vec<Keypoint> = kps
            .iter()
            .map(|k| {
                let (x, y) = self.invert((k.x, k.y));
                Keypoint { x, y, ..*k }
            })
            .collect();
        if self.flip {
            for &(a, b) in flip_pairs {
                out.swap(a, b);
            }
        }
        out
    }
}

/// Random augmentation ranges; the default is no augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub flip_prob: f64,
    /// Rotation drawn uniformly from `[-r, r]` degrees.
    pub rotation: f64,
    /// Scale factor drawn uniformly from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
}

impl Augment {
    pub fn standard() -> Self {
        Augment {
            flip_prob: 0.5,
            rotation: 40.0,
            scale_jitter: 0.35,
        }
    }
}

/// Bilinear sample of `image [C, H, W]` at a real position; zero outside.
fn sample<T: Real>(image: &Tensor<T>, c: usize, (x, y): (f64, f64)) -> T {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (x0, y0) = (libm::floor(x), libm::floor(y));
    let (fx, fy) = (x - x0, y - y0);
    let px = |xx: f64, yy: f64| -> f64 {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            image.data()[(c * h + yy as usize) * w + xx as usize].as_f64()
        }
    };
    let v = px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1.0, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1.0) * (1.0 - fx) * fy
        + px(x0 + 1.0, y0 + 1.0) * fx * fy;
    T::of_f64(v)
}

/// Warps `image [C, H, W]` into the crop of `t`.
pub fn warp<T: Real>(image: &Tensor<T>, t: &CropTransform) -> Result<Tensor<T>> {
    if image.shape().len() != 3 {
        return Err(Error::invalid("crop_affine", "image must be [C, H, W]"));
    }
    let c = image.shape()[0];
    let (oh, ow) = t.output;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for i in 0..oh {
        for j in 0..ow {
            let src = t.invert((j as f64, i as f64));
            for ch in 0..c {
                out.data_mut()[(ch * oh + i) * ow + j] = sample(image, ch, src);
            }
        }
    }
    Ok(out)
}

/// Crops one instance to `output (H, W)` with optional random flip,
/// rotation and scale jitter.
pub fn crop_affine<T: Real>(
    image: &Tensor<T>,
    instance: &PoseInstance,
    output: (usize, usize),
    augment: &Augment,
    flip_pairs: &[(usize, usize)],
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<Keypoint>, CropTransform)> {
    let mut t = CropTransform::from_box(instance.bbox, output)?;
    if augment.scale_jitter > 0.0 {
        let f = rng.uniform_range(1.0 - augment.scale_jitter, 1.0 + augment.scale_jitter);
        t.scale = (t.scale.0 * f, t.scale.1 * f);
    }
    if augment.rotation > 0.0 {
        t.rotation = rng.uniform_range(-augment.rotation, augment.rotation);
    }
    if augment.flip_prob > 0.0 {
        t.flip = rng.bernoulli(augment.flip_prob);
    }
    let crop = warp(image, &t)?;
    let kps = t.keypoints(&instance.keypoints, flip_pairs);
    Ok((crop, kps, t))
}

/// Tight box `[x, y, w, h]` around the labeled keypoints.
pub fn keypoint_box(kps: &[Keypoint]) -> Option<[f64; 4]> {
    let mut it = kps.iter().filter(|k| k.labeled());
    let first = it.next()?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for k in it {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    Some([x0, y0, x1 - x0, y1 - y0])
}

pub const SYNTH_JOINTS: usize = 13;

const SYNTH_NAMES: [&str; SYNTH_JOINTS] = [
    "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
    "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle",
];

const SYNTH_EDGES: [(usize, usize); 12] = [
    (0, 1), (0, 2), (1, 3), (3, 5), (2, 4), (4, 6), (1, 7), (2, 8), (7, 9), (9, 11), (8, 10), (10, 12),
];

const SYNTH_FLIP: [(usize, usize); 6] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)];

/// Joint colours, far apart in RGB so every joint type is recognisable.
const SYNTH_COLOURS: [[f64; 3]; SYNTH_JOINTS] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 0.0],
    [0.5, 0.5, 1.0],
    [0.5, 0.0, 0.0],
    [0.0, 0.0, 0.5],
];

/// Joint positions of a random pose, in units of body height, relative to
/// the mid-hip point.
fn random_pose(rng: &mut Rng) -> [(f64, f64); SYNTH_JOINTS] {
    let mut j = [(0.0, 0.0); SYNTH_JOINTS];
    let lean = rng.uniform_range(-0.25, 0.25);
    let (ls, lc) = (libm::sin(lean), libm::cos(lean));
    let torso = 0.33;
    let neck = (ls * torso, -lc * torso);
    j[0] = (neck.0 + ls * 0.15, neck.1 - lc * 0.15);
    j[1] = (neck.0 - 0.11 * lc, neck.1 - 0.11 * ls);
    j[2] = (neck.0 + 0.11 * lc, neck.1 + 0.11 * ls);
    j[7] = (-0.08, 0.0);
    j[8] = (0.08, 0.0);
    let limb = |from: (f64, f64), len: f64, angle: f64| (from.0 + len * libm::sin(angle), from.1 + len * libm::cos(angle));
    // angles measured from straight down, positive toward +x
    let la = rng.uniform_range(-2.6, -0.1);
    let ra = rng.uniform_range(0.1, 2.6);
    j[3] = limb(j[1], 0.16, la);
    j[4] = limb(j[2], 0.16, ra);
    j[5] = limb(j[3], 0.14, la + rng.uniform_range(-1.2, 1.2));
    j[6] = limb(j[4], 0.14, ra + rng.uniform_range(-1.2, 1.2));
    let lt = rng.uniform_range(-0.6, 0.15);
    let rt = rng.uniform_range(-0.15, 0.6);
    j[9] = limb(j[7], 0.24, lt);
    j[10] = limb(j[8], 0.24, rt);
    j[11] = limb(j[9], 0.23, lt + rng.uniform_range(-0.5, 0.5));
    j[12] = limb(j[10], 0.23, rt + rng.uniform_range(-0.5, 0.5));
    j
}

fn paint_disc(img: &mut [f64], (h, w): (usize, usize), (cx, cy): (f64, f64), r: f64, colour: [f64; 3]) {
    let (y0, y1) = (libm::floor(cy - r).max(0.0) as usize, (libm::ceil(cy + r) as usize).min(h.saturating_sub(1)));
    let (x0, x1) = (libm::floor(cx - r).max(0.0) as usize, (libm::ceil(cx + r) as usize).min(w.saturating_sub(1)));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if libm::hypot(x as f64 - cx, y as f64 - cy) <= r {
                for (c, &v) in colour.iter().enumerate() {
                    img[(c * h + y) * w + x] = v;
                }
            }
        }
    }
}

fn paint_segment(img: &mut [f64], hw: (usize, usize), a: (f64, f64), b: (f64, f64), r: f64, colour: [f64; 3]) {
    let len = libm::hypot(b.0 - a.0, b.1 - a.1);
    let steps = libm::ceil(len * 2.0).max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        paint_disc(img, hw, (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), r, colour);
    }
}

/// Smooth random colour field plus pixel noise.
fn background(rng: &mut Rng, (h, w): (usize, usize)) -> Vec<f64> {
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.uniform_range(0.25, 0.55);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.uniform_range(0.05, 0.12),
                    rng.uniform_range(0.02, 0.3),
                    rng.uniform_range(0.02, 0.3),
                    rng.uniform_range(0.0, 6.3),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = base;
                for &(a, fx, fy, ph) in &waves {
                    v += a * libm::sin(fx * x as f64 + fy * y as f64 + ph);
                }
                v += rng.uniform_range(-0.04, 0.04);
                img[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// A generated image with its people.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: u64,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub instances: Vec<PoseInstance>,
}

/// Renders stick figures with `num_keypoints` coloured joints onto textured
/// backgrounds. Every keypoint lies inside its image and people in one
/// image do not overlap.
pub fn synth_generate(
    num_images: usize,
    persons: (usize, usize),
    num_keypoints: usize,
    image_hw: (usize, usize),
    rng: &mut Rng,
) -> Result<Vec<SynthImage>> {
    DatasetSpec::synthetic(num_keypoints)?;
    let (lo, hi) = persons;
    if lo == 0 || hi < lo {
        return Err(Error::invalid("synth_generate", "person range must be non-empty and positive"));
    }
    let (h, w) = image_hw;
    if h < 16 || w < 12 {
        return Err(Error::invalid("synth_generate", "image must be at least 16x12"));
    }
    let mut out = Vec::with_capacity(num_images);
    let mut next_id = 1u64;
    for img_id in 0..num_images as u64 {
        let count = lo + rng.below(hi - lo + 1);
        let mut img = background(rng, (h, w));
        // one vertical strip per person keeps figures apart
        let strip = w as f64 / count as f64;
        let mut instances = Vec::with_capacity(count);
        for p in 0..count {
            let pose = random_pose(rng);
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in &pose {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let margin = 1.5;
            let max_height = (h as f64 - 2.0 * margin) / (y1 - y0);
            let max_width = (strip - 2.0 * margin) / (x1 - x0);
            let height = max_height.min(max_width) * rng.uniform_range(0.75, 1.0);
            let free_x = strip - 2.0 * margin - height * (x1 - x0);
            let free_y = h as f64 - 2.0 * margin - height * (y1 - y0);
            let ox = p as f64 * strip + margin + rng.uniform() * free_x.max(0.0) - height * x0;
            let oy = margin + rng.uniform() * free_y.max(0.0) - height * y0;
            let pts: Vec<(f64, f64)> = pose.iter().map(|&(x, y)| (ox + height * x, oy + height * y)).collect();
            let tint = [rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7)];
            let limb_r = (0.025 * height).max(0.5);
            for &(a, b) in &SYNTH_EDGES {
                paint_segment(&mut img, (h, w), pts[a], pts[b], limb_r, tint);
            }
            let dot_r = (0.035 * height).max(1.0);
            for (k, &pt) in pts.iter().enumerate().take(num_keypoints) {
                paint_disc(&mut img, (h, w), pt, dot_r, SYNTH_COLOURS[k]);
            }
            let keypoints: Vec<Keypoint> = pts[..num_keypoints]
                .iter()
                .map(|&(x, y)| Keypoint::new(x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64), 2))
                .collect();
            let bbox = keypoint_box(&keypoints).unwrap_or([0.0, 0.0, 1.0, 1.0]);
            let bbox = [bbox[0], bbox[1], bbox[2].max(1.0), bbox[3].max(1.0)];
            instances.push(PoseInstance {
                id: next_id,
                image_id: img_id,
                task: 0,
                bbox,
                area: bbox[2] * bbox[3],
                keypoints,
            });
            next_id += 1;
        }
        out.push(SynthImage {
            id: img_id,
            pixels: Tensor::new(&[3, h, w], img.iter().map(|&v| v as f32).collect())?,
            instances,
        });
    }
    Ok(out)
}

/// A fixed-size training sample: model input and keypoints in input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub keypoints: Vec<Keypoint>,
    pub task: usize,
}

/// Top-down crops of every instance in `images` without augmentation.
pub fn top_down_crops(images: &[SynthImage], output: (usize, usize)) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for img in images {
        for inst in &img.instances {
            let t = CropTransform::from_box(inst.bbox, output)?;
            out.push(Sample {
                image: warp(&img.pixels, &t)?,
                keypoints: t.keypoints(&inst.keypoints, &[]),
                task: inst.task,
            });
        }
    }
    Ok(out)
}

/// Task-homogeneous part of a mixed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatch {
    pub task: usize,
    /// Indices into the task's own pool.
    pub indices: Vec<usize>,
}

/// Uniform sampling over the union of several task pools.
///
/// Each epoch shuffles the concatenated pool with a generator derived only
/// from `(seed, epoch)` and cuts it into batches; within a batch, samples
/// are grouped by task in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskSampler {
    pub pool_sizes: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep a trailing batch smaller than `batch_size`.
    pub keep_last: bool,
}

impl MultiTaskSampler {
    pub fn new(pool_sizes: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if pool_sizes.iter().sum::<usize>() == 0 || batch_size == 0 {
            return Err(Error::invalid("multitask_sampler", "empty pool or zero batch size"));
        }
        Ok(MultiTaskSampler {
            pool_sizes,
            batch_size,
            seed,
            keep_last: true,
        })
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<MicroBatch>> {
        let mut all: Vec<(usize, usize)> = self
            .pool_sizes
            .iter()
            .enumerate()
            .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
            .collect();
        Rng::new(self.seed).fork(epoch as u64).shuffle(&mut all);
        all.chunks(self.batch_size)
            .filter(|c| self.keep_last || c.len() == self.batch_size)
            .map(|chunk| {
                let mut micro: Vec<MicroBatch> = Vec::new();
                for &(task, i) in chunk {
                    match micro.iter_mut().find(|m| m.task == task) {
                        Some(m) => m.indices.push(i),
                        None => micro.push(MicroBatch {
                            task,
                            indices: vec![i],
                        }),
                    }
                }
                micro
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::oks;
    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};

    fn instance(kps: Vec<Keypoint>, bbox: [f64; 4]) -> PoseInstance {
        PoseInstance {
            id: 1,
            image_id: 0,
            task: 0,
            bbox,
            area: bbox[2] * bbox[3],
            keypoints: kps,
        }
    }

    #[test]
    fn box_is_padded_to_output_aspect() {
        let t = CropTransform::from_box([10.0, 20.0, 30.0, 80.0], (256, 192)).unwrap();
        assert_eq!(t.center, (25.0, 60.0));
        assert!((t.scale.0 / t.scale.1 - 0.75).abs() < 1e-12);
        assert!((t.scale.1 - 80.0 * 1.25).abs() < 1e-12);
        assert!(CropTransform::from_box([0.0, 0.0, 0.0, 5.0], (8, 8)).is_err());
    }

    #[test]
    fn centre_maps_to_crop_centre_under_rotation() {
        let mut t = CropTransform::from_box([0.0, 0.0, 40.0, 40.0], (64, 48)).unwrap();
        t.rotation = 90.0;
        let (u, v) = t.apply(t.center);
        assert!((u - 23.5).abs() < 1e-12 && (v - 31.5).abs() < 1e-12);
        // a point right of centre ends up above it after a 90 degree turn
        let (u, v) = t.apply((t.center.0 + 10.0, t.center.1));
        assert!((u - 23.5).abs() < 1e-9 && v < 31.5);
    }

    #[test]
    fn flip_mirrors_and_swaps_pairs() {
        let mut t = CropTransform::from_box([0.0, 0.0, 30.0, 40.0], (32, 24)).unwrap();
        t.flip = true;
        let kps = vec![Keypoint::new(5.0, 10.0, 2), Keypoint::new(25.0, 12.0, 1)];
        let out = t.keypoints(&kps, &[(0, 1)]);
        let mut plain = t;
        plain.flip = false;
        let p = plain.keypoints(&kps, &[]);
        // mirrored about the crop's vertical centre line
        assert!((out[1].x - (23.0 - p[0].x)).abs() < 1e-12 && (out[1].y - p[0].y).abs() < 1e-12);
        assert_eq!((out[0].v, out[1].v), (1, 2));
    }

    #[test]
    fn crop_of_constant_image_is_constant_inside() {
        let img = Tensor::<f64>::full(&[3, 40, 40], 0.5);
        let inst = instance(vec![Keypoint::new(20.0, 20.0, 2)], [10.0, 10.0, 20.0, 20.0]);
        let (crop, kps, _) = crop_affine(&img, &inst, (16, 12), &Augment::default(), &[], &mut Rng::new(0)).unwrap();
        assert_eq!(crop.shape(), &[3, 16, 12]);
        assert!((crop.data()[(16 / 2) * 12 + 6] - 0.5).abs() < 1e-12);
        assert!((kps[0].x - 5.5).abs() < 1e-9 && (kps[0].y - 7.5).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_images() {
        let a = synth_generate(3, (1, 3), 13, (64, 48), &mut Rng::new(7)).unwrap();
        let b = synth_generate(3, (1, 3), 13, (64, 48), &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(3, (1, 3), 13, (64, 48), &mut Rng::new(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_keypoints_inside_and_self_oks_one() {
        let imgs = synth_generate(20, (1, 3), 13, (64, 64), &mut Rng::new(1)).unwrap();
        let sig = DatasetSpec::synthetic(13).unwrap().sigmas;
        for img in &imgs {
            for inst in &img.instances {
                for k in &inst.keypoints {
                    assert!(k.x >= 0.0 && k.y >= 0.0 && k.x <= 63.0 && k.y <= 63.0);
                }
                assert_eq!(oks(&inst.keypoints, &inst.keypoints, &sig, inst.area).unwrap(), Some(1.0));
            }
        }
    }

    #[test]
    fn synthetic_joints_carry_their_colour() {
        let imgs = synth_generate(4, (1, 1), 13, (64, 48), &mut Rng::new(3)).unwrap();
        for img in &imgs {
            let coloured = img.instances[0]
                .keypoints
                .iter()
                .enumerate()
                .filter(|(k, kp)| {
                    let (x, y) = (kp.x.round() as usize, kp.y.round() as usize);
                    (0..3).all(|c| (img.pixels.data()[(c * 64 + y) * 48 + x] as f64 - SYNTH_COLOURS[*k][c]).abs() < 1e-6)
                })
                .count();
            // later dots may cover earlier ones where joints touch
            assert!(coloured >= 10, "{coloured}");
        }
    }

    #[test]
    fn sampler_single_pool_is_a_shuffle() {
        let s = MultiTaskSampler::new(vec![10], 4, 1).unwrap();
        let e = s.epoch(0);
        assert_eq!(e.len(), 3);
        let mut seen: Vec<usize> = e.iter().flatten().flat_map(|m| m.indices.clone()).collect();
        assert!(e.iter().flatten().all(|m| m.task == 0));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(e, s.epoch(0));
        assert_ne!(e, s.epoch(1));
    }

    #[test]
    fn sampler_task_fraction_follows_pool_sizes() {
        let s = MultiTaskSampler::new(vec![900, 100], 32, 5).unwrap();
        let mut a = 0usize;
        let mut total = 0usize;
        'outer: for epoch in 0.. {
            for batch in s.epoch(epoch) {
                for m in batch {
                    for _ in &m.indices {
                        if total == 10_000 {
                            break 'outer;
                        }
                        total += 1;
                        if m.task == 0 {
                            a += 1;
                        }
                    }
                }
            }
        }
        assert!((a as f64 / total as f64 - 0.9).abs() < 0.02);
    }

    #[test]
    fn sampler_rejects_empty_pool() {
        assert!(MultiTaskSampler::new(vec![0, 0], 4, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn crop_round_trip_within_half_pixel(
            bx in 0.0f64..100.0, by in 0.0f64..100.0, bw in 1.0f64..200.0, bh in 1.0f64..200.0,
            rot in -180.0f64..180.0, flip: bool, px in 0.0f64..1.0, py in 0.0f64..1.0,
        ) {
            let mut t = CropTransform::from_box([bx, by, bw, bh], (256, 192)).unwrap();
            t.rotation = rot;
            t.flip = flip;
            let p = (bx + px * bw, by + py * bh);
            let back = t.invert(t.apply(p));
            prop_assert!(libm::hypot(back.0 - p.0, back.1 - p.1) <= 0.5);
        }

        #[test]
        fn sampler_covers_every_instance_once(sizes in proptest::collection::vec(0usize..30, 1..4), bs in 1usize..9, epoch in 0usize..5) {
            prop_assume!(sizes.iter().sum::<usize>() > 0);
            let s = MultiTaskSampler::new(sizes.clone(), bs, 3).unwrap();
            let mut seen: Vec<(usize, usize)> = s.epoch(epoch).iter().flatten()
                .flat_map(|m| m.indices.iter().map(move |&i| (m.task, i))).collect();
            seen.sort();
            let want: Vec<(usize, usize)> = sizes.iter().enumerate().flat_map(|(t, &n)| (0..n).map(move |i| (t, i))).collect();
            prop_assert!(seen == want);
        }
    }
}
