//! Knowledge-token distillation.
//!
//! A single learnable token is optimised against a frozen teacher so that
//! appending it to the teacher's visual tokens lowers the teacher's heatmap
//! error. The token is then handed to a student as fixed extra input.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::losses::{heatmap_mse, output_distill};
use crate::nn::{Mode, PoseModel, Session};
use crate::optim::{AdamW, Moments};
use crate::train::Batch;
use crate::{Error, Real, Result, Rng, Tensor};

/// Standard deviation of the token's initialisation.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeToken<T> {
    /// `[C]`.
    pub token: Tensor<T>,
    /// Parameter checksum of the teacher the token was fitted to.
    pub source_teacher: u64,
    /// Teacher loss before each update and after the last one.
    pub trace: Vec<f64>,
}

/// Teacher heatmap loss with `token` appended, on one batch.
fn teacher_loss<T: Real>(teacher: &PoseModel<T>, s: &mut Session<T>, batch: &Batch<T>, token: Var) -> Result<Var> {
    let x = s.g.constant(batch.images.clone());
    let out = teacher.forward_with_token(s, x, batch.task, Some(token))?;
    heatmap_mse(&mut s.g, out.heatmaps, &batch.targets, &batch.weights)
}

/// Fits a knowledge token to `teacher` with Adam (no weight decay), cycling
/// through `batches`. The teacher runs in eval mode with every parameter
/// bound as a constant, so only the token changes.
pub fn optimize_knowledge_token<T: Real>(
    teacher: &PoseModel<T>,
    batches: &[Batch<T>],
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<KnowledgeToken<T>> {
    if batches.is_empty() {
        return Err(Error::invalid("optimize_knowledge_token", "no batches"));
    }
    let c = teacher.config().backbone.dim;
    let mut token = Tensor::trunc_normal(&[c], TOKEN_INIT_STD, rng);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut moments = Moments::new(&[c]);
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let mut s = teacher.session(Mode::Eval).frozen();
        let t = s.g.param(token.clone());
        let loss = teacher_loss(teacher, &mut s, batch, t)?;
        let (r, extra) = s.backward_with(loss, &[t])?;
        let l = r.loss.as_f64();
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(l);
        let grad = extra.into_iter().next().flatten().unwrap_or_else(|| Tensor::zeros(&[c]));
        opt.update(&mut token, &grad, &mut moments, lr, false)?;
    }
    trace.push(knowledge_token_loss(teacher, &batches[steps % batches.len()], &token)?);
    Ok(KnowledgeToken {
        token,
        source_teacher: teacher.params().checksum(),
        trace,
    })
}

/// Teacher loss on `batch` with a fixed token.
pub fn knowledge_token_loss<T: Real>(teacher: &PoseModel<T>, batch: &Batch<T>, token: &Tensor<T>) -> Result<f64> {
    let mut s = teacher.session(Mode::Eval).frozen();
    let t = s.g.constant(token.clone());
    let loss = teacher_loss(teacher, &mut s, batch, t)?;
    Ok(s.g.value(loss).item().as_f64())
}

/// Token distillation terms for a student forward pass with the token
/// bound as a constant.
pub struct TokenDistill {
    /// Student output versus ground truth.
    pub td: Var,
    /// `td` plus student output versus teacher output, when requested.
    pub tod: Option<Var>,
    /// The token's graph leaf; it never receives a gradient.
    pub token: Var,
}

/// Student losses with `token` appended: the ground-truth term and, when
/// `teacher_heatmaps` is given, its sum with the teacher term (unit
/// weights).
pub fn token_distill_loss<T: Real>(
    student: &PoseModel<T>,
    s: &mut Session<T>,
    batch: &Batch<T>,
    token: &Tensor<T>,
    teacher_heatmaps: Option<&Tensor<T>>,
) -> Result<TokenDistill> {
    let c = student.config().backbone.dim;
    if token.numel() != c {
        return Err(Error::shape("token_distill_loss", token.shape(), &[c]));
    }
    let x = s.g.constant(batch.images.clone());
    let tok = s.g.constant(token.clone());
    let out = student.forward_with_token(s, x, batch.task, Some(tok))?;
    let td = heatmap_mse(&mut s.g, out.heatmaps, &batch.targets, &batch.weights)?;
    let tod = match teacher_heatmaps {
        Some(kt) => {
            let od = output_distill(&mut s.g, out.heatmaps, kt)?;
            Some(s.g.add(td, od)?)
        }
        None => None,
    };
    Ok(TokenDistill { td, tod, token: tok })
}

/// The combined loss, failing when the teacher output is missing.
pub fn token_output_distill_loss<T: Real>(
    student: &PoseModel<T>,
    s: &mut Session<T>,
    batch: &Batch<T>,
    token: &Tensor<T>,
    teacher_heatmaps: Option<&Tensor<T>>,
) -> Result<Var> {
    let kt = teacher_heatmaps.ok_or_else(|| Error::invalid("token_distill_loss", "combined loss needs teacher heatmaps"))?;
    let terms = token_distill_loss(student, s, batch, token, Some(kt))?;
    Ok(terms.tod.expect("teacher heatmaps were supplied"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, top_down_crops, Sample};
    use crate::nn::{ModelConfig, TaskSpec};

    fn setup(seed: u64) -> (PoseModel<f64>, Batch<f64>) {
        let mut cfg = ModelConfig::preset("tiny_desk").unwrap();
        cfg.tasks = alloc::vec![TaskSpec {
            name: "synth".into(),
            num_keypoints: 4,
        }];
        let mut rng = Rng::new(seed);
        let model = PoseModel::new(cfg, &mut rng).unwrap();
        let imgs = synth_generate(2, (1, 1), 4, (32, 24), &mut rng).unwrap();
        let crops = top_down_crops(&imgs, (32, 24)).unwrap();
        let refs: Vec<&Sample> = crops.iter().collect();
        (model, Batch::top_down(&refs, (32, 24), 2.0).unwrap())
    }

    #[test]
    fn zero_steps_keep_the_initial_token() {
        let (teacher, batch) = setup(0);
        let mut r1 = Rng::new(5);
        let k = optimize_knowledge_token(&teacher, &[batch], 0, 1e-2, &mut r1).unwrap();
        let mut r2 = Rng::new(5);
        assert_eq!(k.token, Tensor::trunc_normal(&[32], TOKEN_INIT_STD, &mut r2));
        assert_eq!(k.trace.len(), 1);
    }

    #[test]
    fn token_fitting_lowers_teacher_loss_and_leaves_teacher_alone() {
        let (teacher, batch) = setup(1);
        let before = teacher.params().checksum();
        let mut rng = Rng::new(2);
        let k = optimize_knowledge_token(&teacher, &[batch], 40, 5e-2, &mut rng).unwrap();
        assert_eq!(teacher.params().checksum(), before);
        assert_eq!(k.source_teacher, before);
        assert!(k.trace[40] < k.trace[0], "{:?}", k.trace);
    }

    #[test]
    fn appending_a_token_changes_the_output() {
        let (model, batch) = setup(3);
        let plain = model.predict(&batch.images, 0).unwrap().heatmaps;
        let mut s = model.session(Mode::Eval).frozen();
        let x = s.g.constant(batch.images.clone());
        let mut rng = Rng::new(0);
        let t = s.g.constant(Tensor::randn(&[32], &mut rng));
        let out = model.forward_with_token(&mut s, x, 0, Some(t)).unwrap();
        assert!(s.g.value(out.heatmaps).max_abs_diff(&plain) > 0.0);
    }

    #[test]
    fn combined_loss_doubles_when_teacher_equals_truth() {
        let (student, batch) = setup(4);
        let mut rng = Rng::new(1);
        let token = Tensor::randn(&[32], &mut rng);
        let mut s = student.session(Mode::Train);
        let terms = token_distill_loss(&student, &mut s, &batch, &token, Some(&batch.targets.clone())).unwrap();
        let td = s.g.value(terms.td).item();
        let tod = s.g.value(terms.tod.unwrap()).item();
        // every target keypoint is labeled, so both terms use identical weights
        assert!(batch.weights.iter().all(|&w| w == 1.0));
        assert!((tod - 2.0 * td).abs() <= 1e-9 * td.max(1.0));
        let (r, extra) = s.backward_with(terms.tod.unwrap(), &[terms.token]).unwrap();
        assert!(extra[0].as_ref().is_none_or(|g| g.norm() == 0.0));
        assert!(r.grads.iter().flatten().any(|g| g.norm() > 0.0));
    }

    #[test]
    fn td_equals_direct_evaluation() {
        let (student, batch) = setup(5);
        let token = Tensor::full(&[32], 0.1);
        let mut s = student.session(Mode::Eval).frozen();
        let terms = token_distill_loss(&student, &mut s, &batch, &token, None).unwrap();
        assert!(terms.tod.is_none());
        let mut s2 = student.session(Mode::Eval).frozen();
        let x = s2.g.constant(batch.images.clone());
        let t = s2.g.constant(token.clone());
        let out = student.forward_with_token(&mut s2, x, 0, Some(t)).unwrap();
        let pred = s2.g.value(out.heatmaps);
        let direct = pred
            .data()
            .iter()
            .zip(batch.targets.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pred.numel() as f64;
        assert!((s.g.value(terms.td).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn missing_teacher_or_wrong_width_is_an_error() {
        let (student, batch) = setup(6);
        let mut s = student.session(Mode::Eval);
        assert!(token_output_distill_loss(&student, &mut s, &batch, &Tensor::zeros(&[32]), None).is_err());
        let mut s = student.session(Mode::Eval);
        assert!(token_distill_loss(&student, &mut s, &batch, &Tensor::zeros(&[31]), None).is_err());
    }
}
