//! Detection losses and their analytic gradients.
//!
//! The total loss is `(b_loc * L_loc + b_cls * L_cls + b_dir * L_dir) / N_pos`
//! where `L_loc` is smooth-L1 over the seven residuals of every positive
//! anchor, `L_cls` is the sigmoid focal loss over every non-ignored
//! (anchor, class) pair and `L_dir` is a two-way softmax cross-entropy on
//! the heading hemisphere of every positive anchor.
//!
//! Everything here runs in f64; sums go in anchor order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::HeadMaps;
use crate::rng::{Draws, Rng};
use crate::targets::{AnchorLayout, ClsTarget, Targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_loc: f64,
    pub beta_cls: f64,
    pub beta_dir: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Smooth-L1 switches from quadratic to linear at `|x| = smooth_l1_beta`.
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_loc: 2.0,
            beta_cls: 1.0,
            beta_dir: 0.2,
            alpha: 0.25,
            gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta_loc,
            self.beta_cls,
            self.beta_dir,
            self.alpha,
            self.gamma,
            self.smooth_l1_beta,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.alpha >= 1.0 {
            return Err(Error::Config(format!("loss weights must be positive (alpha < 1): {self:?}")));
        }
        Ok(())
    }
}

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Smooth-L1 with transition at 1: `0.5 x^2` inside, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    smooth_l1_beta(x, 1.0).0
}

/// Smooth-L1 with transition at `beta`, and its derivative.
pub fn smooth_l1_beta(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss for a probability `p` of the class being present.
///
/// Positives: `-alpha (1 - p)^gamma ln p`; negatives:
/// `-(1 - alpha) p^gamma ln(1 - p)`. `p` is clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss of a logit and its derivative with respect to the logit.
pub fn focal_loss_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(z);
    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = focal_loss(p, positive, alpha, gamma);
    if raw != p {
        return (loss, 0.0);
    }
    let q = 1.0 - p;
    let grad = if positive {
        alpha * q.powf(gamma) * (gamma * p * p.ln() - q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * q.ln())
    };
    (loss, grad)
}

/// Two-way softmax cross-entropy and its gradient `softmax - onehot`.
pub fn direction_loss(logits: [f64; 2], target: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let lse = m + (e0 + e1).ln();
    let t = target as usize;
    let loss = lse - logits[t];
    let s = [e0 / (e0 + e1), e1 / (e0 + e1)];
    let mut grad = s;
    grad[t] -= 1.0;
    (loss, grad)
}

/// `(b_loc * loc + b_cls * cls + b_dir * dir) / n_pos`.
pub fn total_loss(loc: f64, cls: f64, dir: f64, n_pos: usize, w: &LossWeights) -> f64 {
    let n = n_pos.max(1) as f64;
    (w.beta_loc * loc + w.beta_cls * cls + w.beta_dir * dir) / n
}

/// Head outputs flattened in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n_anchors: usize,
    pub n_classes: usize,
    /// `anchor * n_classes + class`.
    pub cls: Vec<f64>,
    /// `anchor * 7 + residual`.
    pub boxes: Vec<f64>,
    /// `anchor * 2 + bin`.
    pub dir: Vec<f64>,
}

impl Predictions {
    pub fn zeros(n_anchors: usize, n_classes: usize) -> Self {
        Self {
            n_anchors,
            n_classes,
            cls: vec![0.0; n_anchors * n_classes],
            boxes: vec![0.0; n_anchors * 7],
            dir: vec![0.0; n_anchors * 2],
        }
    }

    /// Reorders head maps (`channel = orientation * width + value`) into
    /// anchor order.
    pub fn from_head(maps: &HeadMaps, layout: &AnchorLayout, n_classes: usize) -> Result<Self> {
        let (h, w, a) = (layout.height, layout.width, layout.per_loc);
        let check = |name: &str, t: &crate::types::Tensor3, per: usize| -> Result<()> {
            if t.shape() != (a * per, h, w) {
                return Err(Error::Shape {
                    name: name.into(),
                    expected: vec![a * per, h, w],
                    found: vec![t.channels, t.height, t.width],
                });
            }
            Ok(())
        };
        check("cls map", &maps.cls, n_classes)?;
        check("box map", &maps.boxes, 7)?;
        check("dir map", &maps.dir, 2)?;
        let mut out = Self::zeros(layout.len(), n_classes);
        for row in 0..h {
            for col in 0..w {
                for o in 0..a {
                    let i = layout.index(row, col, o);
                    for k in 0..n_classes {
                        out.cls[i * n_classes + k] = maps.cls.get(o * n_classes + k, row, col) as f64;
                    }
                    for j in 0..7 {
                        out.boxes[i * 7 + j] = maps.boxes.get(o * 7 + j, row, col) as f64;
                    }
                    for b in 0..2 {
                        out.dir[i * 2 + b] = maps.dir.get(o * 2 + b, row, col) as f64;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Predictions that reproduce the targets: encoded residuals, and
    /// logits of `+/- saturation` agreeing with every label.
    pub fn from_targets(targets: &Targets, saturation: f64) -> Self {
        let mut p = Self::zeros(targets.n_anchors, targets.n_classes);
        for (i, t) in targets.cls.iter().enumerate() {
            p.cls[i] = if *t == ClsTarget::Positive { saturation } else { -saturation };
        }
        for (a, b) in targets.boxes.iter().enumerate() {
            if let Some(b) = b {
                p.boxes[a * 7..a * 7 + 7].copy_from_slice(&b.residuals);
                p.dir[a * 2 + b.dir as usize] = saturation;
                p.dir[a * 2 + 1 - b.dir as usize] = -saturation;
            }
        }
        p
    }

    fn check(&self, t: &Targets) -> Result<()> {
        if self.n_anchors != t.n_anchors || self.n_classes != t.n_classes {
            return Err(Error::Shape {
                name: "predictions".into(),
                expected: vec![t.n_anchors, t.n_classes],
                found: vec![self.n_anchors, self.n_classes],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
    pub n_pos: usize,
    /// No positive anchors: the total was normalized by 1 instead.
    pub no_positives: bool,
}

/// Gradients of the total loss, laid out like [`Predictions`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub cls: Vec<f64>,
    pub boxes: Vec<f64>,
    pub dir: Vec<f64>,
}

fn evaluate(pred: &Predictions, t: &Targets, w: &LossWeights, grads: Option<&mut Gradients>) -> LossReport {
    evaluate_normalized(pred, t, w, grads, t.num_positive())
}

fn evaluate_normalized(
    pred: &Predictions,
    t: &Targets,
    w: &LossWeights,
    mut grads: Option<&mut Gradients>,
    n_pos: usize,
) -> LossReport {
    let norm = n_pos.max(1) as f64;
    let (mut loc, mut cls, mut dir) = (0.0, 0.0, 0.0);

    for (i, label) in t.cls.iter().enumerate() {
        let positive = match label {
            ClsTarget::Positive => true,
            ClsTarget::Negative => false,
            ClsTarget::Ignored => continue,
        };
        let (l, g) = focal_loss_logit(pred.cls[i], positive, w.alpha, w.gamma);
        cls += l;
        if let Some(gr) = grads.as_deref_mut() {
            gr.cls[i] = w.beta_cls * g / norm;
        }
    }
    for (a, target) in t.boxes.iter().enumerate() {
        let Some(target) = target else { continue };
        for j in 0..7 {
            let (l, g) = smooth_l1_beta(pred.boxes[a * 7 + j] - target.residuals[j], w.smooth_l1_beta);
            loc += l;
            if let Some(gr) = grads.as_deref_mut() {
                gr.boxes[a * 7 + j] = w.beta_loc * g / norm;
            }
        }
        let (l, g) = direction_loss([pred.dir[a * 2], pred.dir[a * 2 + 1]], target.dir);
        dir += l;
        if let Some(gr) = grads.as_deref_mut() {
            gr.dir[a * 2] = w.beta_dir * g[0] / norm;
            gr.dir[a * 2 + 1] = w.beta_dir * g[1] / norm;
        }
    }
    LossReport {
        loc,
        cls,
        dir,
        total: total_loss(loc, cls, dir, n_pos, w),
        n_pos,
        no_positives: n_pos == 0,
    }
}

pub fn compute_loss(pred: &Predictions, targets: &Targets, w: &LossWeights) -> Result<LossReport> {
    pred.check(targets)?;
    Ok(evaluate(pred, targets, w, None))
}

/// Loss and its gradient with respect to every prediction value. Ignored
/// pairs and non-positive anchors get exactly zero gradient.
pub fn loss_gradients(pred: &Predictions, targets: &Targets, w: &LossWeights) -> Result<(LossReport, Gradients)> {
    pred.check(targets)?;
    let mut g = Gradients {
        cls: vec![0.0; pred.cls.len()],
        boxes: vec![0.0; pred.boxes.len()],
        dir: vec![0.0; pred.dir.len()],
    };
    let report = evaluate(pred, targets, w, Some(&mut g));
    Ok((report, g))
}

/// Which prediction array a coordinate lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Cls,
    Box,
    Dir,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(Field, usize)>,
}

fn coord_mut(p: &mut Predictions, field: Field, index: usize) -> &mut f64 {
    match field {
        Field::Cls => &mut p.cls[index],
        Field::Box => &mut p.boxes[index],
        Field::Dir => &mut p.dir[index],
    }
}

/// Smallest denominator used for relative gradient errors.
pub const GRAD_REL_FLOOR: f64 = 1e-8;

/// The predictions and targets of one anchor, for evaluating only the loss
/// terms a coordinate of that anchor can change.
fn single_anchor(pred: &Predictions, t: &Targets, a: usize) -> (Predictions, Targets) {
    let k = t.n_classes;
    let p = Predictions {
        n_anchors: 1,
        n_classes: k,
        cls: pred.cls[a * k..(a + 1) * k].to_vec(),
        boxes: pred.boxes[a * 7..(a + 1) * 7].to_vec(),
        dir: pred.dir[a * 2..(a + 1) * 2].to_vec(),
    };
    let t = Targets { n_anchors: 1, n_classes: k, cls: t.cls[a * k..(a + 1) * k].to_vec(), boxes: vec![t.boxes[a]] };
    (p, t)
}

/// Compares analytic gradients against central finite differences of the
/// total loss at `count` random coordinates. Coordinates whose stencil would
/// straddle a kink (the smooth-L1 transition or the probability clamp) are
/// redrawn. A third of the draws go to each of cls logits, box residuals of
/// positive anchors and direction logits of positive anchors; the last two
/// fall back to cls logits when a frame has no positives.
pub fn gradient_check(
    pred: &Predictions,
    targets: &Targets,
    w: &LossWeights,
    count: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let (_, grads) = loss_gradients(pred, targets, w)?;
    let positives: Vec<usize> = targets
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(a, b)| b.map(|_| a))
        .collect();
    let n_pos = targets.num_positive();
    let mut result = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    let mut attempts = 0;
    while result.checked < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::Internal("gradient check could not find smooth coordinates".into()));
        }
        let field = match (rng.below(3), positives.is_empty()) {
            (_, true) | (0, _) => Field::Cls,
            (1, _) => Field::Box,
            _ => Field::Dir,
        };
        let index = match field {
            Field::Cls => rng.below(pred.cls.len()),
            Field::Box => positives[rng.below(positives.len())] * 7 + rng.below(7),
            Field::Dir => positives[rng.below(positives.len())] * 2 + rng.below(2),
        };
        let x0 = match field {
            Field::Cls => pred.cls[index],
            Field::Box => pred.boxes[index],
            Field::Dir => pred.dir[index],
        };
        let smooth = match field {
            Field::Cls => {
                let lo = sigmoid(x0 - step);
                let hi = sigmoid(x0 + step);
                lo > PROB_EPS && hi < 1.0 - PROB_EPS
            }
            Field::Box => {
                let t = targets.boxes[index / 7].expect("positive").residuals[index % 7];
                let d = x0 - t;
                (d.abs() - w.smooth_l1_beta).abs() > 2.0 * step
            }
            Field::Dir => true,
        };
        if !smooth {
            continue;
        }
        // The total is a sum over anchors with a fixed normalization, so the
        // difference only involves the perturbed anchor's terms. Evaluating
        // just those keeps the rounding of the full sum out of the quotient.
        let (anchor, local) = match field {
            Field::Cls => (index / pred.n_classes, index % pred.n_classes),
            Field::Box => (index / 7, index % 7),
            Field::Dir => (index / 2, index % 2),
        };
        let (mut probe, sub) = single_anchor(pred, targets, anchor);
        *coord_mut(&mut probe, field, local) = x0 + step;
        let up = evaluate_normalized(&probe, &sub, w, None, n_pos).total;
        *coord_mut(&mut probe, field, local) = x0 - step;
        let down = evaluate_normalized(&probe, &sub, w, None, n_pos).total;

        let numeric = (up - down) / (2.0 * step);
        let analytic = match field {
            Field::Cls => grads.cls[index],
            Field::Box => grads.boxes[index],
            Field::Dir => grads.dir[index],
        };
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > result.max_rel_err {
            result.max_rel_err = rel;
            result.worst = Some((field, index));
        }
        result.checked += 1;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::BoxTarget;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // continuous derivative at the transition
        let (_, below) = smooth_l1_beta(1.0 - 1e-12, 1.0);
        let (_, above) = smooth_l1_beta(1.0, 1.0);
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn focal_hand_value() {
        let v = focal_loss(0.5, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.043_322).abs() < 1e-6);
        assert!(focal_loss(1.0, true, 0.25, 2.0) < 1e-12);
    }

    #[test]
    fn degenerate_focal_is_scaled_cross_entropy() {
        for p in [0.1, 0.3, 0.7, 0.95] {
            assert_eq!(focal_loss(p, true, 0.5, 0.0), 0.5 * -f64::ln(p));
            assert_eq!(focal_loss(p, false, 0.5, 0.0), 0.5 * -f64::ln(1.0 - p));
        }
    }

    #[test]
    fn focal_bounded_by_weighted_ce() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!(focal_loss(p, true, 0.25, 2.0) <= 0.25 * -p.ln() + 1e-15);
        }
    }

    #[test]
    fn direction_loss_values() {
        let (l, g) = direction_loss([0.0, 0.0], 1);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, [0.5, -0.5]);
        let (l, _) = direction_loss([10.0, -10.0], 0);
        assert!(l < 1e-8);
        let logits = [0.3, -1.2];
        let (_, g) = direction_loss(logits, 0);
        let e = [logits[0].exp(), logits[1].exp()];
        let s = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        assert!((g[0] - (s[0] - 1.0)).abs() < 1e-15 && (g[1] - s[1]).abs() < 1e-15);
    }

    #[test]
    fn total_loss_hand_values() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 3, &w), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 2, &w), 1.6);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 4, &w), 0.8);
    }

    fn toy_targets() -> Targets {
        let mut cls = vec![ClsTarget::Negative; 4];
        cls[1] = ClsTarget::Positive;
        cls[2] = ClsTarget::Ignored;
        let mut boxes = vec![None; 4];
        boxes[1] = Some(BoxTarget { residuals: [0.1, -0.2, 0.0, 0.05, 0.0, 0.0, 0.3], dir: 1, class: 0, gt: 0 });
        Targets { n_anchors: 4, n_classes: 1, cls, boxes }
    }

    #[test]
    fn zero_at_targets_and_masked_gradients() {
        let t = toy_targets();
        let mut p = Predictions::from_targets(&t, 30.0);
        p.boxes[3 * 7] = 5.0; // non-positive anchor
        p.cls[2] = 3.0; // ignored
        let (report, g) = loss_gradients(&p, &t, &LossWeights::default()).unwrap();
        assert!(report.total < 1e-3);
        assert!(g.boxes[7..14].iter().all(|v| *v == 0.0));
        assert!(g.boxes[21..28].iter().all(|v| *v == 0.0));
        assert_eq!(g.cls[2], 0.0);
    }

    #[test]
    fn no_positive_frame_flagged() {
        let t = Targets { n_anchors: 3, n_classes: 1, cls: vec![ClsTarget::Negative; 3], boxes: vec![None; 3] };
        let r = compute_loss(&Predictions::zeros(3, 1), &t, &LossWeights::default()).unwrap();
        assert!(r.no_positives);
        assert_eq!(r.n_pos, 0);
        assert!(r.total > 0.0);
    }

    #[test]
    fn toy_gradient_check() {
        let t = toy_targets();
        let mut p = Predictions::zeros(4, 1);
        p.cls = vec![0.3, -0.7, 1.1, 2.0];
        p.boxes[7..14].copy_from_slice(&[0.5, 0.1, -0.3, 0.2, 0.0, 2.0, -0.4]);
        p.dir[2..4].copy_from_slice(&[0.4, -0.1]);
        let r = gradient_check(&p, &t, &LossWeights::default(), 200, 1e-3, &mut Rng::new(0)).unwrap();
        assert_eq!(r.checked, 200);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
