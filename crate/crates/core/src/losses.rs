//! Training objectives built on the autodiff graph.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::{Error, Real, Result, Tensor};

/// Mean squared error over the spatial dims of `pred [N, Nk, h, w]`,
/// averaged over keypoints with weight `weights [N*Nk]`.
pub fn heatmap_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
    let s = g.shape(pred);
    if s.len() != 4 || s[0] * s[1] != weights.len() {
        return Err(Error::shape("heatmap_mse", s, &[weights.len()]));
    }
    g.weighted_mse(pred, target, weights.to_vec())
}

/// Student-teacher heatmap MSE. The teacher output enters as a constant, so
/// no gradient reaches it.
pub fn output_distill<T: Real>(g: &mut Graph<T>, student: Var, teacher: &Tensor<T>) -> Result<Var> {
    g.mse(student, teacher)
}

/// Ground-truth joints of one person in a bottom-up sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonJoints {
    /// Batch index of the image.
    pub image: usize,
    /// `(keypoint type, row, col)` on the tag map grid.
    pub joints: Vec<(usize, usize, usize)>,
}

/// Associative-embedding loss for `tags [N, Nk*D, h, w]`, averaged over the
/// images that contain at least one person. People only push against
/// others in the same image.
pub fn ae_loss<T: Real>(g: &mut Graph<T>, tags: Var, num_keypoints: usize, people: &[PersonJoints]) -> Result<Var> {
    let s = g.shape(tags).to_vec();
    if s.len() != 4 || num_keypoints == 0 || !s[1].is_multiple_of(num_keypoints) {
        return Err(Error::shape("ae_loss", &s, &[num_keypoints]));
    }
    let (n, d, h, w) = (s[0], s[1] / num_keypoints, s[2], s[3]);
    let mut terms = Vec::new();
    for image in 0..n {
        let mut index = Vec::new();
        let mut groups = Vec::new();
        for p in people.iter().filter(|p| p.image == image) {
            let mut rows = Vec::new();
            for &(k, y, x) in &p.joints {
                if k >= num_keypoints || y >= h || x >= w {
                    return Err(Error::invalid("ae_loss", "joint outside the tag map"));
                }
                rows.push(index.len() / d);
                for c in 0..d {
                    index.push((((image * s[1] + k * d + c) * h + y) * w + x) as u32);
                }
            }
            groups.push(rows);
        }
        if groups.iter().all(Vec::is_empty) {
            continue;
        }
        let rows = index.len() / d;
        let gathered = g.gather(tags, index, &[rows, d])?;
        terms.push(g.ae_loss(gathered, groups)?);
    }
    let Some((&first, rest)) = terms.split_first() else {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(zero);
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, T::one() / T::from_usize(terms.len()).unwrap()))
}
