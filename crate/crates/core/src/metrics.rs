//! Keypoint similarity, COCO-style AP/AR and PCKh.
//!
//! The AP protocol follows the COCO keypoint evaluation: OKS thresholds
//! 0.50:0.05:0.95, at most 20 detections per image, 101-point interpolated
//! precision, medium objects with area in `[32², 96²)` and large ones from
//! `96²` up. Ground truth without labeled keypoints is ignored.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::Keypoint;
use crate::{Error, Result};

/// Per-keypoint sigmas of the 17 COCO body keypoints.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089,
    0.089,
];

pub const MAX_DETS: usize = 20;
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const LARGE_AREA: (f64, f64) = (96.0 * 96.0, 1e10);
const ALL_AREA: (f64, f64) = (0.0, 1e10);

pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Object keypoint similarity of `pred` against `gt`, averaged over the
/// labeled ground-truth keypoints. `None` when nothing is labeled.
pub fn oks(pred: &[Keypoint], gt: &[Keypoint], sigmas: &[f64], area: f64) -> Result<Option<f64>> {
    if pred.len() != gt.len() || gt.len() != sigmas.len() {
        return Err(Error::shape("oks", &[pred.len(), gt.len()], &[sigmas.len()]));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), s) in pred.iter().zip(gt).zip(sigmas) {
        if !g.labeled() {
            continue;
        }
        let d2 = (p.x - g.x) * (p.x - g.x) + (p.y - g.y) * (p.y - g.y);
        let k2 = 4.0 * s * s;
        sum += libm::exp(-d2 / (2.0 * (area + f64::EPSILON) * k2));
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// A detected or annotated body instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    /// Object area in pixels², used for the area split and OKS scale.
    pub area: f64,
    /// Detection confidence; ignored for ground truth.
    #[serde(default)]
    pub score: f64,
}

impl Instance {
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }
}

/// AP and AR over the OKS threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub thresholds: Vec<f64>,
    /// All-area AP per threshold.
    pub ap: Vec<f64>,
    /// All-area recall per threshold.
    pub recall: Vec<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl Sweep {
    pub fn mean_ap(&self) -> f64 {
        mean(&self.ap)
    }

    pub fn mean_recall(&self) -> f64 {
        mean(&self.recall)
    }

    fn at(values: &[f64], thresholds: &[f64], t: f64) -> f64 {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map_or(0.0, |i| values[i])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ImageKey(u64);

/// Per-threshold matches of the detections of one image.
struct ImageEval {
    /// Kept detections as `(score, area)` in descending score order.
    dets: Vec<(f64, f64)>,
    /// `matched[t][d]`: detection `d` matched a non-ignored gt at threshold `t`.
    matched: Vec<Vec<bool>>,
    /// `ignored[t][d]`: detection `d` matched an ignored gt at threshold `t`.
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(dets: &[&Instance], gts: &[&Instance], sigmas: &[f64], range: (f64, f64), thresholds: &[f64]) -> Result<ImageEval> {
    // non-ignored ground truth first, as in the reference evaluator
    let ignore = |g: &Instance| g.num_labeled() == 0 || g.area < range.0 || g.area >= range.1;
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&i| ignore(gts[i]));
    let gts: Vec<&Instance> = order.iter().map(|&i| gts[i]).collect();
    let gt_ignored: Vec<bool> = gts.iter().map(|g| ignore(g)).collect();
    let mut dets: Vec<&Instance> = dets.to_vec();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(MAX_DETS);
    let mut sim = vec![vec![0.0; gts.len()]; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            sim[d][g] = oks(&det.keypoints, &gt.keypoints, sigmas, gt.area)?.unwrap_or(0.0);
        }
    }
    let mut matched = Vec::with_capacity(thresholds.len());
    let mut ignored = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut gt_taken = vec![false; gts.len()];
        let mut m = vec![false; dets.len()];
        let mut ig = vec![false; dets.len()];
        for d in 0..dets.len() {
            let mut best = None;
            let mut best_sim = t.min(1.0 - 1e-10);
            for g in 0..gts.len() {
                if gt_taken[g] {
                    continue;
                }
                // once matched to a real gt, stop at the ignored ones
                if best.is_some_and(|b: usize| !gt_ignored[b]) && gt_ignored[g] {
                    break;
                }
                if sim[d][g] < best_sim {
                    continue;
                }
                best_sim = sim[d][g];
                best = Some(g);
            }
            if let Some(g) = best {
                gt_taken[g] = true;
                if gt_ignored[g] {
                    ig[d] = true;
                } else {
                    m[d] = true;
                }
            } else if dets[d].area < range.0 || dets[d].area >= range.1 {
                ig[d] = true;
            }
        }
        matched.push(m);
        ignored.push(ig);
    }
    Ok(ImageEval {
        dets: dets.iter().map(|d| (d.score, d.area)).collect(),
        matched,
        ignored,
        num_gt: gt_ignored.iter().filter(|&&i| !i).count(),
    })
}

/// AP per threshold (and final recall) over all images for one area range.
/// `None` when the range holds no ground truth.
fn accumulate(evals: &[ImageEval], n_thresholds: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut aps = Vec::with_capacity(n_thresholds);
    let mut recalls = Vec::with_capacity(n_thresholds);
    for t in 0..n_thresholds {
        let mut dets: Vec<(f64, bool)> = Vec::new();
        for e in evals {
            for (d, &(score, _)) in e.dets.iter().enumerate() {
                if !e.ignored[t][d] {
                    dets.push((score, e.matched[t][d]));
                }
            }
        }
        // stable sort keeps image order among equal scores
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut recall = Vec::with_capacity(dets.len());
        let mut precision = Vec::with_capacity(dets.len());
        for &(_, hit) in &dets {
            if hit {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            recall.push(tp / num_gt as f64);
            precision.push(tp / (tp + fp));
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < level);
            if idx < precision.len() {
                ap += precision[idx];
            }
        }
        aps.push(ap / 101.0);
        recalls.push(recall.last().copied().unwrap_or(0.0));
    }
    Some((aps, recalls))
}

/// Matches predictions to ground truth per image at every OKS threshold.
pub fn ap_ar_sweep(predictions: &[Instance], ground_truths: &[Instance], sigmas: &[f64]) -> Result<Sweep> {
    use alloc::collections::BTreeMap;
    let thresholds = oks_thresholds();
    let mut images: BTreeMap<ImageKey, (Vec<&Instance>, Vec<&Instance>)> = BTreeMap::new();
    for g in ground_truths {
        images.entry(ImageKey(g.image_id)).or_default().1.push(g);
    }
    for p in predictions {
        images.entry(ImageKey(p.image_id)).or_default().0.push(p);
    }
    let run = |range: (f64, f64)| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        let evals = images
            .values()
            .map(|(d, g)| evaluate_image(d, g, sigmas, range, &thresholds))
            .collect::<Result<Vec<_>>>()?;
        Ok(accumulate(&evals, thresholds.len()))
    };
    let (ap, recall) = run(ALL_AREA)?.unwrap_or_else(|| (vec![0.0; thresholds.len()], vec![0.0; thresholds.len()]));
    let ap_medium = run(MEDIUM_AREA)?.map(|(a, _)| mean(&a));
    let ap_large = run(LARGE_AREA)?.map(|(a, _)| mean(&a));
    Ok(Sweep {
        thresholds,
        ap,
        recall,
        ap_medium,
        ap_large,
    })
}

/// Per-joint and overall PCKh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pckh {
    pub tau: f64,
    /// Accuracy per joint; `None` for joints never labeled.
    pub per_joint: Vec<Option<f64>>,
    /// Correct fraction over all labeled joints.
    pub mean: f64,
}

/// A joint is correct when its distance is at most `tau * head_size`
/// (closed boundary).
pub fn pckh(pred: &[Vec<Keypoint>], gt: &[Vec<Keypoint>], head_sizes: &[f64], tau: f64) -> Result<Pckh> {
    if pred.len() != gt.len() || gt.len() != head_sizes.len() {
        return Err(Error::shape("pckh", &[pred.len(), gt.len()], &[head_sizes.len()]));
    }
    if let Some(&h) = head_sizes.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::invalid("pckh", alloc::format!("head size must be positive, got {h}")));
    }
    let nk = gt.first().map_or(0, Vec::len);
    let mut correct = vec![0usize; nk];
    let mut labeled = vec![0usize; nk];
    for ((p, g), &head) in pred.iter().zip(gt).zip(head_sizes) {
        if p.len() != nk || g.len() != nk {
            return Err(Error::shape("pckh", &[p.len(), g.len()], &[nk]));
        }
        for k in 0..nk {
            if !g[k].labeled() {
                continue;
            }
            labeled[k] += 1;
            let d = libm::hypot(p[k].x - g[k].x, p[k].y - g[k].y);
            if d <= tau * head {
                correct[k] += 1;
            }
        }
    }
    let total: usize = labeled.iter().sum();
    Ok(Pckh {
        tau,
        per_joint: correct
            .iter()
            .zip(&labeled)
            .map(|(&c, &l)| (l > 0).then(|| c as f64 / l as f64))
            .collect(),
        mean: if total == 0 { 0.0 } else { correct.iter().sum::<usize>() as f64 / total as f64 },
    })
}

/// Evaluation summary. Area-split entries are `None` when no ground truth
/// falls in the range; `params` and `gflops` are filled from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: f64,
    pub ar50: f64,
    pub params: Option<u64>,
    pub gflops: Option<f64>,
    pub flop_convention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pckh: Option<Pckh>,
}

impl EvalReport {
    pub fn from_sweep(s: &Sweep) -> Self {
        EvalReport {
            ap: s.mean_ap(),
            ap50: Sweep::at(&s.ap, &s.thresholds, 0.5),
            ap75: Sweep::at(&s.ap, &s.thresholds, 0.75),
            ap_m: s.ap_medium,
            ap_l: s.ap_large,
            ar: s.mean_recall(),
            ar50: Sweep::at(&s.recall, &s.thresholds, 0.5),
            params: None,
            gflops: None,
            flop_convention: String::from(crate::flops::FLOP_CONVENTION),
            pckh: None,
        }
    }

    pub fn with_model_stats(mut self, params: u64, gflops: f64) -> Self {
        self.params = Some(params);
        self.gflops = Some(gflops);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint::new(x, y, 2)
    }

    #[test]
    fn oks_of_identical_is_one() {
        let g: Vec<Keypoint> = (0..17).map(|i| kp(i as f64, 2.0 * i as f64)).collect();
        assert_eq!(oks(&g, &g, &COCO_SIGMAS, 5000.0).unwrap(), Some(1.0));
    }

    #[test]
    fn oks_far_away_tends_to_zero() {
        let g = vec![kp(0.0, 0.0)];
        let p = vec![kp(1e6, 0.0)];
        assert!(oks(&p, &g, &[0.05], 100.0).unwrap().unwrap() < 1e-300);
    }

    #[test]
    fn oks_two_keypoint_hand_case() {
        let g = vec![kp(0.0, 0.0), kp(10.0, 10.0)];
        let p = vec![kp(3.0, 4.0), kp(10.0, 12.0)];
        let (s, area) = ([0.05, 0.1], 400.0);
        let e0 = (-25.0f64 / (2.0 * area * 4.0 * 0.05 * 0.05)).exp();
        let e1 = (-4.0f64 / (2.0 * area * 4.0 * 0.1 * 0.1)).exp();
        let got = oks(&p, &g, &s, area).unwrap().unwrap();
        assert!((got - (e0 + e1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn oks_skips_unlabeled_and_reports_none() {
        let g = vec![kp(0.0, 0.0), Keypoint::new(5.0, 5.0, 0)];
        let p = vec![kp(0.0, 0.0), kp(100.0, 100.0)];
        assert_eq!(oks(&p, &g, &[0.1, 0.1], 10.0).unwrap(), Some(1.0));
        let none = vec![Keypoint::new(0.0, 0.0, 0); 2];
        assert_eq!(oks(&p, &none, &[0.1, 0.1], 10.0).unwrap(), None);
    }

    fn instance(image_id: u64, kps: Vec<Keypoint>, area: f64, score: f64) -> Instance {
        Instance {
            image_id,
            keypoints: kps,
            area,
            score,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut rng = Rng::new(2);
        let gts: Vec<Instance> = (0..6)
            .map(|i| {
                let kps = (0..17).map(|_| kp(rng.uniform_range(0.0, 100.0), rng.uniform_range(0.0, 100.0))).collect();
                instance(i / 2, kps, if i % 2 == 0 { 2000.0 } else { 12000.0 }, 0.0)
            })
            .collect();
        let preds: Vec<Instance> = gts.iter().map(|g| Instance { score: 1.0, ..g.clone() }).collect();
        let s = ap_ar_sweep(&preds, &gts, &COCO_SIGMAS).unwrap();
        let r = EvalReport::from_sweep(&s);
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar, r.ar50), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!((r.ap_m, r.ap_l), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![instance(0, vec![kp(1.0, 1.0)], 100.0, 0.0)];
        let s = ap_ar_sweep(&[], &gts, &[0.1]).unwrap();
        assert_eq!((s.mean_ap(), s.mean_recall()), (0.0, 0.0));
        assert_eq!(s.ap_large, None);
    }

    #[test]
    fn unlabeled_ground_truth_is_ignored() {
        let gts = vec![
            instance(0, vec![kp(1.0, 1.0)], 100.0, 0.0),
            instance(0, vec![Keypoint::new(50.0, 50.0, 0)], 100.0, 0.0),
        ];
        let preds = vec![instance(0, vec![kp(1.0, 1.0)], 100.0, 0.9)];
        assert_eq!(ap_ar_sweep(&preds, &gts, &[0.1]).unwrap().mean_ap(), 1.0);
    }

    #[test]
    fn detections_beyond_the_cap_are_dropped() {
        let gts: Vec<Instance> = (0..25).map(|i| instance(0, vec![kp(100.0 * i as f64, 0.0)], 100.0, 0.0)).collect();
        let preds: Vec<Instance> = gts.iter().map(|g| Instance { score: 0.5, ..g.clone() }).collect();
        let s = ap_ar_sweep(&preds, &gts, &[0.05]).unwrap();
        assert!((s.mean_recall() - 20.0 / 25.0).abs() < 1e-12);
    }

    /// Independent evaluator: per image and threshold, enumerate every
    /// injective assignment of detections to ground truth and keep the one
    /// with the most matches (ties by higher matched score mass), then read
    /// precision off the ranked list by definition.
    fn brute_force_ap(preds: &[Instance], gts: &[Instance], sigmas: &[f64], t: f64) -> (f64, f64) {
        fn assignments(nd: usize, ng: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
            if cur.len() == nd {
                out.push(cur.clone());
                return;
            }
            cur.push(None);
            assignments(nd, ng, used, cur, out);
            cur.pop();
            for g in 0..ng {
                if !used[g] {
                    used[g] = true;
                    cur.push(Some(g));
                    assignments(nd, ng, used, cur, out);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        let images: Vec<u64> = {
            let mut v: Vec<u64> = gts.iter().chain(preds).map(|i| i.image_id).collect();
            v.sort();
            v.dedup();
            v
        };
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        for id in images {
            let d: Vec<&Instance> = preds.iter().filter(|p| p.image_id == id).collect();
            let g: Vec<&Instance> = gts.iter().filter(|p| p.image_id == id).collect();
            let mut all = Vec::new();
            assignments(d.len(), g.len(), &mut vec![false; g.len()], &mut Vec::new(), &mut all);
            let mut best: Option<(usize, f64, Vec<Option<usize>>)> = None;
            for a in all {
                let valid = a.iter().enumerate().all(|(di, m)| {
                    m.is_none_or(|gi| oks(&d[di].keypoints, &g[gi].keypoints, sigmas, g[gi].area).unwrap().unwrap() >= t)
                });
                if !valid {
                    continue;
                }
                let n = a.iter().flatten().count();
                let mass: f64 = a.iter().enumerate().filter(|(_, m)| m.is_some()).map(|(di, _)| d[di].score).sum();
                if best.as_ref().is_none_or(|b| n > b.0 || (n == b.0 && mass > b.1)) {
                    best = Some((n, mass, a));
                }
            }
            let a = best.unwrap().2;
            ranked.extend(d.iter().zip(&a).map(|(p, m)| (p.score, m.is_some())));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let n_gt = gts.len() as f64;
        let points: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = ranked[..k].iter().filter(|r| r.1).count() as f64;
                (tp / n_gt, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            ap += points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
        }
        (ap / 101.0, points.last().map_or(0.0, |p| p.0))
    }

    /// 20 ground-truth people spread over 7 images, far apart within each
    /// image; predictions are noisy copies with misses and false positives.
    fn synthetic_set(rng: &mut Rng) -> (Vec<Instance>, Vec<Instance>) {
        let nk = 5;
        let sigmas = [0.05; 5];
        let _ = sigmas;
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for i in 0..20u64 {
            let image = i % 7;
            let (ox, oy) = (1000.0 * (i / 7) as f64, 0.0);
            let kps: Vec<Keypoint> = (0..nk).map(|_| kp(ox + rng.uniform_range(0.0, 60.0), oy + rng.uniform_range(0.0, 80.0))).collect();
            let area = rng.uniform_range(500.0, 12000.0);
            if i % 6 != 5 {
                let noise = rng.uniform_range(0.0, 9.0);
                let p: Vec<Keypoint> = kps.iter().map(|k| kp(k.x + noise * rng.normal(), k.y + noise * rng.normal())).collect();
                preds.push(instance(image, p, area, rng.uniform()));
            }
            if i % 5 == 0 {
                let p: Vec<Keypoint> = kps.iter().map(|k| kp(k.x + 500.0, k.y + 300.0)).collect();
                preds.push(instance(image, p, area, rng.uniform()));
            }
            gts.push(instance(image, kps, area, 0.0));
        }
        (preds, gts)
    }

    #[test]
    fn sweep_matches_brute_force_matcher() {
        let sigmas = [0.05; 5];
        for seed in 0..4 {
            let mut rng = Rng::new(seed);
            let (preds, gts) = synthetic_set(&mut rng);
            let s = ap_ar_sweep(&preds, &gts, &sigmas).unwrap();
            for (i, &t) in s.thresholds.iter().enumerate() {
                let (ap, rec) = brute_force_ap(&preds, &gts, &sigmas, t);
                assert!((s.ap[i] - ap).abs() < 1e-9, "seed {seed} t {t}: {} vs {ap}", s.ap[i]);
                assert!((s.recall[i] - rec).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pckh_identity_is_full_marks() {
        let g = vec![vec![kp(1.0, 2.0), kp(3.0, 4.0)]];
        let r = pckh(&g, &g, &[10.0], 0.5).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_joint, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn pckh_boundary_is_closed() {
        let g = vec![vec![kp(0.0, 0.0)]];
        let p = vec![vec![kp(3.0, 4.0)]];
        assert_eq!(pckh(&p, &g, &[10.0], 0.5).unwrap().mean, 1.0);
        let p = vec![vec![kp(3.0, 4.000001)]];
        assert_eq!(pckh(&p, &g, &[10.0], 0.5).unwrap().mean, 0.0);
    }

    #[test]
    fn pckh_rejects_non_positive_head() {
        let g = vec![vec![kp(0.0, 0.0)]];
        assert!(pckh(&g, &g, &[0.0], 0.5).is_err());
    }

    #[test]
    fn pckh_random_sixteen_joints_match_direct_check() {
        let mut rng = Rng::new(8);
        let n = 30;
        let gt: Vec<Vec<Keypoint>> = (0..n)
            .map(|_| (0..16).map(|_| Keypoint::new(rng.uniform_range(0.0, 200.0), rng.uniform_range(0.0, 200.0), rng.below(3) as u8)).collect())
            .collect();
        let pred: Vec<Vec<Keypoint>> = gt
            .iter()
            .map(|g| g.iter().map(|k| kp(k.x + 8.0 * rng.normal(), k.y + 8.0 * rng.normal())).collect())
            .collect();
        let heads: Vec<f64> = (0..n).map(|_| rng.uniform_range(10.0, 40.0)).collect();
        let r = pckh(&pred, &gt, &heads, 0.5).unwrap();
        let (mut hit, mut tot) = (0usize, 0usize);
        for j in 0..16 {
            let (mut c, mut l) = (0, 0);
            for i in 0..n {
                if gt[i][j].v == 0 {
                    continue;
                }
                l += 1;
                let d = ((pred[i][j].x - gt[i][j].x).powi(2) + (pred[i][j].y - gt[i][j].y).powi(2)).sqrt();
                if d <= 0.5 * heads[i] {
                    c += 1;
                }
            }
            assert_eq!(r.per_joint[j], (l > 0).then(|| c as f64 / l as f64));
            hit += c;
            tot += l;
        }
        assert_eq!(r.mean, hit as f64 / tot as f64);
    }

    #[test]
    fn report_serialises_with_fixed_keys() {
        let s = ap_ar_sweep(&[], &[], &[0.1]).unwrap();
        let r = EvalReport::from_sweep(&s).with_model_stats(10, 1.5);
        let v = serde_json::to_value(&r).unwrap();
        for k in ["ap", "ap50", "ap75", "ap_m", "ap_l", "ar", "ar50", "params", "gflops", "flop_convention"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn oks_is_symmetric_in_geometry(xs in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..10), area in 10.0f64..10000.0) {
            let a: Vec<Keypoint> = xs.iter().map(|t| kp(t.0, t.1)).collect();
            let b: Vec<Keypoint> = xs.iter().map(|t| kp(t.2, t.3)).collect();
            let s = vec![0.07; xs.len()];
            let ab = oks(&a, &b, &s, area).unwrap().unwrap();
            let ba = oks(&b, &a, &s, area).unwrap().unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn ap_does_not_increase_with_threshold(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let (preds, gts) = synthetic_set(&mut rng);
            let s = ap_ar_sweep(&preds, &gts, &[0.05; 5]).unwrap();
            for w in s.ap.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let r = EvalReport::from_sweep(&s);
            prop_assert!(r.ap <= r.ap50 + 1e-12);
        }
    }
}
