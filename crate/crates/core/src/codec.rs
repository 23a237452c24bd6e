//! Heatmap targets, keypoint decoding and associative-embedding grouping.
//!
//! Coordinates are in heatmap pixels with cell `(i, j)` centred at `x = j`,
//! `y = i`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Tensor};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_MATCH_RADIUS: f64 = 1.0;
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.1;

/// Offset applied toward the larger neighbour when decoding.
pub const SUBPIXEL_SHIFT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 unlabeled, 1 labeled but occluded, 2 labeled and visible.
    pub v: u8,
    #[serde(default)]
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Keypoint { x, y, v, score: 0.0 }
    }

    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

/// Gaussian heatmap targets `[Nk, h, w]` and per-keypoint weights.
///
/// Each labeled keypoint inside the grid gets an unnormalised Gaussian with
/// its peak of exactly 1 at the nearest cell. Unlabeled keypoints and those
/// outside the grid get a zero map and weight 0.
pub fn encode_targets<T: Real>(keypoints: &[Keypoint], (h, w): (usize, usize), sigma: f64) -> Result<(Tensor<T>, Vec<T>)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("encode_targets", "sigma must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("encode_targets", "empty heatmap grid"));
    }
    let mut maps = Tensor::zeros(&[keypoints.len(), h, w]);
    let mut weights = vec![T::zero(); keypoints.len()];
    let denom = 2.0 * sigma * sigma;
    for (k, kp) in keypoints.iter().enumerate() {
        let (cx, cy) = (libm::round(kp.x), libm::round(kp.y));
        if !kp.labeled() || !(cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64) {
            continue;
        }
        weights[k] = T::one();
        let gx: Vec<f64> = (0..w).map(|j| libm::exp(-(j as f64 - cx) * (j as f64 - cx) / denom)).collect();
        let map = &mut maps.data_mut()[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let gy = libm::exp(-(i as f64 - cy) * (i as f64 - cy) / denom);
            for j in 0..w {
                map[i * w + j] = T::of_f64(gy * gx[j]);
            }
        }
    }
    Ok((maps, weights))
}

/// Argmax of one `[h, w]` map with the lowest flat index winning ties.
fn argmax(map: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    best
}

/// Quarter-pixel refinement of an integer peak toward its larger neighbour.
fn refine(map: &[f64], (h, w): (usize, usize), (i, j): (usize, usize)) -> (f64, f64) {
    let at = |y: usize, x: usize| map[y * w + x];
    let step = |lo: f64, hi: f64| {
        if hi > lo {
            SUBPIXEL_SHIFT
        } else if lo > hi {
            -SUBPIXEL_SHIFT
        } else {
            0.0
        }
    };
    let mut x = j as f64;
    let mut y = i as f64;
    if j > 0 && j + 1 < w {
        x += step(at(i, j - 1), at(i, j + 1));
    }
    if i > 0 && i + 1 < h {
        y += step(at(i - 1, j), at(i + 1, j));
    }
    (x, y)
}

/// One keypoint per channel of `heatmaps [Nk, h, w]`.
///
/// Score is the peak value clamped to `[0, 1]`; visibility is 2 for a
/// positive peak and 0 otherwise.
pub fn decode_keypoints<T: Real>(heatmaps: &Tensor<T>) -> Result<Vec<Keypoint>> {
    let s = heatmaps.shape();
    if s.len() != 3 {
        return Err(Error::invalid("decode_keypoints", "heatmaps must be [Nk, h, w]"));
    }
    let (nk, h, w) = (s[0], s[1], s[2]);
    let data: Vec<f64> = heatmaps.data().iter().map(|v| v.as_f64()).collect();
    Ok((0..nk)
        .map(|k| {
            let map = &data[k * h * w..(k + 1) * h * w];
            let best = argmax(map);
            let (x, y) = refine(map, (h, w), (best / w, best % w));
            let score = map[best].clamp(0.0, 1.0);
            Keypoint {
                x,
                y,
                v: if score > 0.0 { 2 } else { 0 },
                score,
            }
        })
        .collect())
}

/// Maps keypoints between grids of different resolution covering the same
/// area. Cell centres sit at integer coordinates on both grids.
pub fn rescale_keypoints(keypoints: &[Keypoint], from_hw: (usize, usize), to_hw: (usize, usize)) -> Vec<Keypoint> {
    let sx = to_hw.1 as f64 / from_hw.1 as f64;
    let sy = to_hw.0 as f64 / from_hw.0 as f64;
    keypoints
        .iter()
        .map(|k| Keypoint {
            x: (k.x + 0.5) * sx - 0.5,
            y: (k.y + 0.5) * sy - 0.5,
            ..*k
        })
        .collect()
}

/// Heatmap targets for several people in one image: the per-person maps are
/// combined by maximum and a keypoint type has weight 1 if anyone labels it.
pub fn encode_scene<T: Real>(people: &[Vec<Keypoint>], num_keypoints: usize, hw: (usize, usize), sigma: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let mut maps = Tensor::zeros(&[num_keypoints, hw.0, hw.1]);
    let mut weights = vec![T::zero(); num_keypoints];
    for kps in people {
        if kps.len() != num_keypoints {
            return Err(Error::shape("encode_scene", &[kps.len()], &[num_keypoints]));
        }
        let (m, w) = encode_targets::<T>(kps, hw, sigma)?;
        for (a, &b) in maps.data_mut().iter_mut().zip(m.data()) {
            if b > *a {
                *a = b;
            }
        }
        for (a, b) in weights.iter_mut().zip(w) {
            if b > *a {
                *a = b;
            }
        }
    }
    Ok((maps, weights))
}

/// One person recovered by [`ae_group`].
#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    /// One slot per keypoint type; `None` when no peak was assigned.
    pub keypoints: Vec<Option<Keypoint>>,
    /// Mean tag of the assigned peaks.
    pub tag: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub threshold: f64,
    pub match_radius: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            threshold: DEFAULT_PEAK_THRESHOLD,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

/// Strict local maxima above `threshold` (ties broken toward the lower
/// flat index so a plateau yields one peak).
fn local_peaks(map: &[f64], (h, w): (usize, usize), threshold: f64) -> Vec<usize> {
    let mut peaks = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = map[i * w + j];
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    if (di, dj) == (0, 0) || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let n = y as usize * w + x as usize;
                    let u = map[n];
                    if u > v || (u == v && n < i * w + j) {
                        is_peak = false;
                    }
                }
            }
            if is_peak {
                peaks.push(i * w + j);
            }
        }
    }
    peaks
}

fn tag_distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Greedy associative-embedding grouping of `heatmaps [Nk, h, w]` with tags
/// `[Nk * D, h, w]`.
///
/// Keypoint types are visited in order and each type's peaks by descending
/// score. A peak joins the group whose mean tag is nearest, provided the
/// distance is below the match radius and the group has no peak of that
/// type yet; otherwise it starts a new group.
pub fn ae_group<T: Real>(heatmaps: &Tensor<T>, tags: &Tensor<T>, cfg: &GroupConfig) -> Result<Vec<Person>> {
    let hs = heatmaps.shape();
    let ts = tags.shape();
    if hs.len() != 3 || ts.len() != 3 || ts[1..] != hs[1..] || hs[0] == 0 || !ts[0].is_multiple_of(hs[0]) {
        return Err(Error::shape("ae_group", hs, ts));
    }
    let (nk, h, w) = (hs[0], hs[1], hs[2]);
    let d = ts[0] / nk;
    let hm: Vec<f64> = heatmaps.data().iter().map(|v| v.as_f64()).collect();
    let tg: Vec<f64> = tags.data().iter().map(|v| v.as_f64()).collect();
    let mut people: Vec<(Person, Vec<f64>, usize)> = Vec::new();
    for k in 0..nk {
        let map = &hm[k * h * w..(k + 1) * h * w];
        let mut peaks = local_peaks(map, (h, w), cfg.threshold);
        peaks.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
        for p in peaks {
            let tag: Vec<f64> = (0..d).map(|c| tg[((k * d + c) * h * w) + p]).collect();
            let (x, y) = refine(map, (h, w), (p / w, p % w));
            let kp = Keypoint {
                x,
                y,
                v: 2,
                score: map[p].clamp(0.0, 1.0),
            };
            let nearest = people
                .iter()
                .enumerate()
                .filter(|(_, (person, _, _))| person.keypoints[k].is_none())
                .map(|(i, (person, _, _))| (i, tag_distance(&person.tag, &tag)))
                .filter(|&(_, dist)| dist < cfg.match_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match nearest {
                Some((i, _)) => {
                    let (person, sum, count) = &mut people[i];
                    person.keypoints[k] = Some(kp);
                    *count += 1;
                    for (s, t) in sum.iter_mut().zip(&tag) {
                        *s += t;
                    }
                    person.tag = sum.iter().map(|s| s / *count as f64).collect();
                }
                None => {
                    let mut keypoints = vec![None; nk];
                    keypoints[k] = Some(kp);
                    people.push((
                        Person {
                            keypoints,
                            tag: tag.clone(),
                            score: 0.0,
                        },
                        tag,
                        1,
                    ));
                }
            }
        }
    }
    Ok(people
        .into_iter()
        .map(|(mut p, _, count)| {
            p.score = p.keypoints.iter().flatten().map(|k| k.score).sum::<f64>() / count as f64;
            p
        })
        .collect())
}
