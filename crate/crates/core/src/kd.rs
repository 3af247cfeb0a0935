//! Teacher-student losses: hint regression on base features, softened
//! classification, teacher-bounded box regression, and the joint objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::oim::{LookupTable, OimConfig};
use crate::params::{Bound, ParamStore};
use crate::psmodel::PersonSearchModel;
use crate::boxes::BBox;

/// Identity-loss weight used when a student trains against a frozen
/// teacher table.
pub const KD_REID_OIM_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdDetConfig {
    pub mu: f64,
    /// Overrides `mu` for the proposal head.
    pub rpn_mu: Option<f64>,
    pub gamma: f64,
    pub hint_weight: f64,
    pub temperature: f64,
    pub margin: f64,
    pub hint_reduction: HintReduction,
}

impl Default for KdDetConfig {
    fn default() -> Self {
        KdDetConfig {
            mu: 0.5,
            rpn_mu: None,
            gamma: 0.5,
            hint_weight: 0.5,
            temperature: 10.0,
            margin: 0.0,
            hint_reduction: HintReduction::Sum,
        }
    }
}

impl KdDetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("kd_det: {m}")));
        for (name, mu) in [("mu", Some(self.mu)), ("rpn_mu", self.rpn_mu)] {
            if let Some(mu) = mu {
                if !(0.0..=1.0).contains(&mu) {
                    return bad(format!("{name} must be in [0, 1], got {mu}"));
                }
            }
        }
        for (name, v) in [("gamma", self.gamma), ("hint_weight", self.hint_weight), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    pub fn rpn_mu(&self) -> f64 {
        self.rpn_mu.unwrap_or(self.mu)
    }
}

/// 1×1 convolution from student to teacher base channels, stored under
/// `adapt.*` in the student's parameters.
pub struct AdaptationLayer;

impl AdaptationLayer {
    pub const WEIGHT: &'static str = "adapt.weight";
    pub const BIAS: &'static str = "adapt.bias";

    /// Adds identity-like initial parameters (zero when channels differ).
    pub fn init(params: &mut ParamStore, student_channels: usize, teacher_channels: usize) {
        let mut w = Tensor::zeros(vec![teacher_channels, student_channels, 1, 1]);
        for c in 0..student_channels.min(teacher_channels) {
            w.data_mut()[c * student_channels + c] = 1.0;
        }
        params.insert(Self::WEIGHT, w);
        params.insert(Self::BIAS, Tensor::zeros(vec![teacher_channels]));
    }

    pub fn forward(g: &mut Graph, bp: &Bound, student_features: Var) -> Result<Var> {
        g.conv2d(student_features, bp.get(Self::WEIGHT), bp.get(Self::BIAS), 1, 0)
    }
}

/// `‖adapted − teacher‖²`, summed or averaged over elements.
pub fn hint_loss(g: &mut Graph, adapted: Var, teacher: &Tensor, reduction: HintReduction) -> Result<Var> {
    if g.value(adapted).shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            op: "hint_loss",
            lhs: g.value(adapted).shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(adapted, t)?;
    let s = g.squared_norm(d);
    Ok(match reduction {
        HintReduction::Sum => s,
        HintReduction::Mean => g.scale(s, 1.0 / teacher.numel().max(1) as f64),
    })
}

/// `−Σ P_t log P_s` with both distributions softened by `temperature`,
/// averaged over rows. `student` is `[n, C]`, `teacher` the matching logits.
pub fn soft_cls_loss(g: &mut Graph, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    let s = g.value(student).shape().to_vec();
    if s != teacher.shape() || s.len() != 2 || s[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "soft_cls_loss",
            lhs: s,
            rhs: teacher.shape().to_vec(),
        });
    }
    if s[0] == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let tv = g.constant(teacher.clone());
    let pt = g.softmax(tv, temperature)?;
    let pt = g.constant(g.value(pt).clone());
    let logps = g.log_softmax(student, temperature)?;
    let prod = g.mul(pt, logps)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / s[0] as f64))
}

fn nonnegative_scalar(g: &Graph, v: Var, op: &'static str) -> Result<()> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::invalid(op, format!("expected a scalar loss, got shape {:?}", t.shape())));
    }
    if !(t.item() >= 0.0) {
        return Err(Error::invalid(op, format!("loss must be nonnegative, got {}", t.item())));
    }
    Ok(())
}

/// `μ·L_g + (1−μ)·L_t`.
pub fn combined_cls_loss(g: &mut Graph, gt: Var, teacher: Var, mu: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("combined_cls_loss", format!("mu must be in [0, 1], got {mu}")));
    }
    nonnegative_scalar(g, gt, "combined_cls_loss")?;
    nonnegative_scalar(g, teacher, "combined_cls_loss")?;
    let a = g.scale(gt, mu);
    let b = g.scale(teacher, 1.0 - mu);
    g.add(a, b)
}

/// Squared error of `deltas[rows]` against `targets`, counted only for rows
/// where the student's squared error plus `margin` exceeds the teacher's.
/// Averaged over rows; zero when there are none.
pub fn bounded_reg_loss(
    g: &mut Graph,
    deltas: Var,
    rows: &[usize],
    teacher: &Tensor,
    targets: &[[f64; 4]],
    margin: f64,
) -> Result<Var> {
    if rows.len() != targets.len() || teacher.shape() != [rows.len(), 4] {
        return Err(Error::ShapeMismatch {
            op: "bounded_reg_loss",
            lhs: vec![rows.len(), 4],
            rhs: teacher.shape().to_vec(),
        });
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let sel = g.select_rows(deltas, rows)?;
    let y = Tensor::new(vec![rows.len(), 4], targets.iter().flatten().copied().collect())?;
    let sq_err = |r: &[f64], t: &[f64; 4]| r.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut mask = Vec::with_capacity(rows.len() * 4);
    for (i, t) in targets.iter().enumerate() {
        let s = sq_err(g.value(sel).row(i), t);
        let te = sq_err(teacher.row(i), t);
        let on = if s + margin > te { 1.0 } else { 0.0 };
        mask.extend([on; 4]);
    }
    let yv = g.constant(y);
    let d = g.sub(sel, yv)?;
    let m = g.constant(Tensor::new(vec![rows.len(), 4], mask)?);
    let dm = g.mul(d, m)?;
    let s = g.squared_norm(dm);
    Ok(g.scale(s, 1.0 / rows.len() as f64))
}

/// `L_g + γ·L_t`.
pub fn combined_reg_loss(g: &mut Graph, gt: Var, teacher: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid("combined_reg_loss", format!("gamma must be nonnegative, got {gamma}")));
    }
    nonnegative_scalar(g, gt, "combined_reg_loss")?;
    nonnegative_scalar(g, teacher, "combined_reg_loss")?;
    let b = g.scale(teacher, gamma);
    g.add(gt, b)
}

/// Sum of the four detector terms plus the weighted hint and identity
/// losses. Absent terms contribute nothing.
pub fn total_objective(
    g: &mut Graph,
    detector: [Var; 4],
    hint: Option<(Var, f64)>,
    oim: Option<(Var, f64)>,
) -> Result<Var> {
    let mut terms = detector.to_vec();
    for (v, w) in [hint, oim].into_iter().flatten() {
        if !(w >= 0.0) {
            return Err(Error::invalid("total_objective", format!("loss weight must be nonnegative, got {w}")));
        }
        if w > 0.0 {
            terms.push(g.scale(v, w));
        }
    }
    g.add_all(&terms)
}

/// Teacher quantities for one scene, evaluated without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub features: Tensor,
    pub rpn_cls: Tensor,
    pub rpn_deltas: Tensor,
    /// Region logits and deltas on the student's sampled boxes.
    pub rcn_cls: Tensor,
    pub rcn_deltas: Tensor,
}

/// Runs `teacher` on `image` and on the student's region `boxes`, which
/// must all be non-degenerate.
pub fn teacher_outputs(teacher: &PersonSearchModel, image: &Tensor, boxes: &[BBox]) -> Result<TeacherOutputs> {
    let mut g = Graph::new();
    let bp = teacher.params.bind(&mut g, false);
    let img = g.constant(image.clone());
    let f = teacher.backbone_forward(&mut g, &bp, img)?;
    let rpn = teacher.rpn_forward(&mut g, &bp, f)?;
    let (rcn_cls, rcn_deltas) = if boxes.is_empty() {
        (Tensor::zeros(vec![0, 2]), Tensor::zeros(vec![0, 4]))
    } else {
        let (rcn, kept) = teacher.rcn_forward(&mut g, &bp, f, boxes)?;
        if kept.len() != boxes.len() {
            return Err(Error::invalid("teacher_outputs", "student regions must be non-degenerate"));
        }
        (g.value(rcn.head.cls).clone(), g.value(rcn.head.deltas).clone())
    };
    Ok(TeacherOutputs {
        features: g.value(f).clone(),
        rpn_cls: g.value(rpn.cls).clone(),
        rpn_deltas: g.value(rpn.deltas).clone(),
        rcn_cls,
        rcn_deltas,
    })
}

/// Loads a teacher's exported table as the student's frozen table.
pub fn kd_reid_attach(lut_file: &Path, oim: &OimConfig) -> Result<LookupTable> {
    let src = LookupTable::import(lut_file)?;
    LookupTable::copy_frozen(&src, oim.dim, oim.num_labeled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(KdDetConfig::default().validate().is_ok());
        assert!(KdDetConfig { mu: 1.5, ..Default::default() }.validate().is_err());
        assert!(KdDetConfig { rpn_mu: Some(-0.1), ..Default::default() }.validate().is_err());
        assert!(KdDetConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(KdDetConfig { rpn_mu: Some(0.2), ..Default::default() }.rpn_mu(), 0.2);
    }

    #[test]
    fn adaptation_identity_init() {
        let mut p = ParamStore::new();
        AdaptationLayer::init(&mut p, 2, 3);
        let mut g = Graph::new();
        let bp = p.bind(&mut g, true);
        let x = g.constant(Tensor::new(vec![2, 1, 1], vec![4.0, 5.0]).unwrap());
        let y = AdaptationLayer::forward(&mut g, &bp, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 0.0]);
    }
}
