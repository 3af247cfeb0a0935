use rand::Rng;

use super::{Checkpoint, ExperimentConfig};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::kd::{
    bounded_reg_loss, combined_cls_loss, combined_reg_loss, hint_loss, soft_cls_loss, teacher_outputs, total_objective,
    AdaptationLayer, TeacherOutputs,
};
use crate::numerics::{Graph, Sgd, Tensor, Var};
use crate::oim::{oim_forward, oim_update, LookupTable, UnlabeledQueue};
use crate::psmodel::{assign_targets, detector_gt_losses, propose, PersonSearchModel, Targets};
use crate::rng::{checksum, stream};
use crate::synthscene::{DatasetSplit, Scene};

/// Teacher artifacts a student run may depend on.
#[derive(Clone, Debug, Default)]
pub struct Teachers {
    pub detector: Option<PersonSearchModel>,
    pub lut: Option<LookupTable>,
}

impl Teachers {
    /// Loads whatever `cfg.kd_mode` needs from the configured paths.
    pub fn resolve(cfg: &ExperimentConfig) -> Result<Self> {
        let mut t = Teachers::default();
        if cfg.kd_mode.uses_detector_teacher() {
            let p = cfg
                .teacher
                .detector
                .as_ref()
                .ok_or_else(|| Error::Config(format!("kd_mode {:?} needs teacher.detector", cfg.kd_mode)))?;
            t.detector = Some(Checkpoint::load(p)?.model);
        }
        if cfg.kd_mode.uses_teacher_table() {
            let p = cfg
                .teacher
                .lut
                .as_ref()
                .ok_or_else(|| Error::Config(format!("kd_mode {:?} needs teacher.lut", cfg.kd_mode)))?;
            t.lut = Some(LookupTable::import(p)?);
        }
        Ok(t)
    }
}

/// Loss components of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub rcn_cls: f64,
    pub rcn_reg: f64,
    pub hint: f64,
    pub oim: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,total,rpn_cls,rpn_reg,rcn_cls,rcn_reg,hint,oim,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.lr,
            self.total,
            self.rpn_cls,
            self.rpn_reg,
            self.rcn_cls,
            self.rcn_reg,
            self.hint,
            self.oim,
            self.grad_norm
        )
    }
}

/// Lookup-table bookkeeping of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct LutAudit {
    pub frozen: bool,
    pub checksum_start: String,
    pub checksum_end: String,
    /// Labeled identity samples passed to the table update.
    pub labeled_seen: u64,
    pub skipped_writes: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub audit: LutAudit,
    /// Checksums of the detector teacher's parameters before and after.
    pub teacher_checksums: Option<(String, String)>,
}

fn rows_of(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let k = t.shape()[1];
    Tensor::new(vec![rows.len(), k], rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect())
}

struct SceneTerms {
    det: [Var; 4],
    hint: Option<Var>,
    id_embeddings: Option<Var>,
    id_labels: Vec<Option<usize>>,
}

struct StepContext<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a PersonSearchModel,
    anchors: &'a [BBox],
    teacher: Option<&'a PersonSearchModel>,
    oim_weight: f64,
}

impl StepContext<'_> {
    fn scene_terms(
        &self,
        g: &mut Graph,
        bp: &crate::params::Bound,
        scene: &Scene,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<SceneTerms> {
        let (cfg, model) = (self.cfg, self.model);
        let image = scene.tensor();
        let gt = scene.gt_boxes();
        let img = g.constant(image.clone());
        let f = model.backbone_forward(g, bp, img)?;
        let rpn = model.rpn_forward(g, bp, f)?;
        let rpn_t = assign_targets(self.anchors, &gt, cfg.train.rpn_samples, rng);

        let (props, _) = propose(
            self.anchors,
            g.value(rpn.cls),
            g.value(rpn.deltas),
            model.spec.image_size as f64,
            &cfg.inference.proposals,
        )?;
        let mut candidates: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        candidates.extend(&gt);
        let full = assign_targets(&candidates, &gt, cfg.train.rcn_samples, rng);
        let sampled: Vec<BBox> = full.rows.iter().map(|&i| candidates[i]).collect();
        let local = Targets {
            rows: (0..sampled.len()).collect(),
            labels: full.labels.clone(),
            positives: full
                .positives
                .iter()
                .map(|p| full.rows.binary_search(p).expect("positives are sampled"))
                .collect(),
            matched: full.matched.clone(),
            reg_targets: full.reg_targets.clone(),
        };
        let (rcn, kept) = model.rcn_forward(g, bp, f, &sampled)?;
        if kept.len() != sampled.len() {
            return Err(Error::invalid("train", "sampled region became degenerate"));
        }
        let gl = detector_gt_losses(g, rpn, &rpn_t, rcn.head, &local)?;
        let mut det = [gl.rpn_cls, gl.rpn_reg, gl.rcn_cls, gl.rcn_reg];
        let mut hint = None;

        if let Some(teacher) = self.teacher {
            let kd = &cfg.kd_det;
            let t: TeacherOutputs = teacher_outputs(teacher, &image, &sampled)?;
            let adapted = AdaptationLayer::forward(g, bp, f)?;
            hint = Some(hint_loss(g, adapted, &t.features, kd.hint_reduction)?);

            let s_rpn = g.select_rows(rpn.cls, &rpn_t.rows)?;
            let soft = soft_cls_loss(g, s_rpn, &rows_of(&t.rpn_cls, &rpn_t.rows)?, kd.temperature)?;
            det[0] = combined_cls_loss(g, det[0], soft, kd.rpn_mu())?;
            let bounded = bounded_reg_loss(
                g,
                rpn.deltas,
                &rpn_t.positives,
                &rows_of(&t.rpn_deltas, &rpn_t.positives)?,
                &rpn_t.reg_targets,
                kd.margin,
            )?;
            det[1] = combined_reg_loss(g, det[1], bounded, kd.gamma)?;

            let soft = soft_cls_loss(g, rcn.head.cls, &t.rcn_cls, kd.temperature)?;
            det[2] = combined_cls_loss(g, det[2], soft, kd.mu)?;
            let bounded = bounded_reg_loss(
                g,
                rcn.head.deltas,
                &local.positives,
                &rows_of(&t.rcn_deltas, &local.positives)?,
                &local.reg_targets,
                kd.margin,
            )?;
            det[3] = combined_reg_loss(g, det[3], bounded, kd.gamma)?;
        }

        let (mut id_embeddings, mut id_labels) = (None, Vec::new());
        if self.oim_weight > 0.0 && !local.positives.is_empty() {
            let h = g.select_rows(rcn.hidden, &local.positives)?;
            id_embeddings = Some(model.idnet_forward(g, bp, h)?);
            id_labels = local.matched.iter().map(|&m| scene.persons[m].label).collect();
        }
        Ok(SceneTerms {
            det,
            hint,
            id_embeddings,
            id_labels,
        })
    }
}

/// Trains one model on `data` with the given teachers.
pub fn train_with(cfg: &ExperimentConfig, data: &DatasetSplit, teachers: &Teachers) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.num_labeled != cfg.oim.num_labeled || data.image_size != cfg.dataset.image_size {
        return Err(Error::Config("dataset does not match the experiment config".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let teacher = if cfg.kd_mode.uses_detector_teacher() {
        let t = teachers
            .detector
            .as_ref()
            .ok_or_else(|| Error::Config("detector distillation needs a detector teacher".into()))?;
        if t.spec.image_size != cfg.dataset.image_size || t.spec.feature_size() != cfg.spec().feature_size() {
            return Err(Error::DimensionMismatch("teacher feature geometry differs from the student".into()));
        }
        Some(t)
    } else {
        None
    };
    let teacher_before = teacher.map(|t| checksum(&t.params.to_bytes()));

    let mut model = PersonSearchModel::new(cfg.spec(), cfg.seed);
    if let Some(t) = teacher {
        AdaptationLayer::init(&mut model.params, model.spec.feature_channels(), t.spec.feature_channels());
    }
    let mut lut = if cfg.kd_mode.uses_teacher_table() {
        let src = teachers
            .lut
            .as_ref()
            .ok_or_else(|| Error::Config("identity distillation needs a teacher lookup table".into()))?;
        LookupTable::copy_frozen(src, cfg.oim.dim, cfg.oim.num_labeled)?
    } else {
        LookupTable::random(cfg.oim.dim, cfg.oim.num_labeled, cfg.seed)?
    };
    let mut queue = UnlabeledQueue::new(cfg.oim.dim, cfg.oim.queue_size);
    let checksum_start = checksum(&lut.to_bytes());
    let anchors = model.anchors();
    let mut opt = Sgd::new(cfg.train.momentum)?.with_max_grad_norm(cfg.train.max_grad_norm)?;
    let oim_weight = cfg.oim_weight();
    let batch = cfg.train.batch_size;
    let mut log = Vec::with_capacity(cfg.train.steps);
    let mut labeled_seen = 0u64;

    for step in 0..cfg.train.steps {
        let lr = cfg.train.lr_at(step);
        let mut order_rng = stream(cfg.seed, "train/batch", step as u64);
        let scenes: Vec<usize> = (0..batch).map(|_| order_rng.random_range(0..data.train.len())).collect();

        let mut g = Graph::new();
        let bp = model.params.bind(&mut g, true);
        let ctx = StepContext {
            cfg,
            model: &model,
            anchors: &anchors,
            teacher,
            oim_weight,
        };
        let mut det_terms: [Vec<Var>; 4] = Default::default();
        let mut hints = Vec::new();
        let mut embs = Vec::new();
        let mut labels = Vec::new();
        for (b, &si) in scenes.iter().enumerate() {
            let mut rng = stream(cfg.seed, "train/sample", (step * batch + b) as u64);
            let t = ctx.scene_terms(&mut g, &bp, &data.train[si], &mut rng)?;
            for (acc, v) in det_terms.iter_mut().zip(t.det) {
                acc.push(v);
            }
            hints.extend(t.hint);
            if let Some(e) = t.id_embeddings {
                embs.push(e);
                labels.extend(t.id_labels);
            }
        }
        let avg = |g: &mut Graph, vs: &[Var]| -> Result<Var> {
            let s = g.add_all(vs)?;
            Ok(g.scale(s, 1.0 / vs.len() as f64))
        };
        let det = [
            avg(&mut g, &det_terms[0])?,
            avg(&mut g, &det_terms[1])?,
            avg(&mut g, &det_terms[2])?,
            avg(&mut g, &det_terms[3])?,
        ];
        let hint = if hints.is_empty() { None } else { Some(avg(&mut g, &hints)?) };
        let mut id_batch = None;
        let oim = if embs.is_empty() {
            None
        } else {
            let x = g.concat_rows(&embs)?;
            let out = oim_forward(&mut g, x, &labels, &lut, &queue, cfg.oim.temperature)?;
            id_batch = Some(x);
            Some(out.loss)
        };
        let total = total_objective(
            &mut g,
            det,
            hint.map(|h| (h, cfg.kd_det.hint_weight)),
            oim.map(|o| (o, oim_weight)),
        )?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let entry = StepLog {
            step,
            lr,
            total: g.value(total).item(),
            rpn_cls: g.value(det[0]).item(),
            rpn_reg: g.value(det[1]).item(),
            rcn_cls: g.value(det[2]).item(),
            rcn_reg: g.value(det[3]).item(),
            hint: value(hint),
            oim: value(oim),
            grad_norm: 0.0,
        };
        if !entry.total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {entry:?}"),
            });
        }
        let grads = g.backward(total)?;
        model.params.apply(&mut opt, &g, &bp, &grads, lr).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, what },
            e => e,
        })?;
        let entry = StepLog {
            grad_norm: opt.last_grad_norm(),
            ..entry
        };
        if step % 100 == 0 {
            log::debug!("step {step}: {entry:?}");
        }
        log.push(entry);
        if let Some(x) = id_batch {
            labeled_seen += labels.iter().filter(|l| l.is_some()).count() as u64;
            oim_update(g.value(x), &labels, &mut lut, &mut queue, &cfg.oim)?;
        }
    }

    let audit = LutAudit {
        frozen: lut.is_frozen(),
        checksum_start,
        checksum_end: checksum(&lut.to_bytes()),
        labeled_seen,
        skipped_writes: lut.skipped_writes(),
    };
    if audit.frozen && (audit.checksum_start != audit.checksum_end || audit.labeled_seen != audit.skipped_writes) {
        return Err(Error::invalid("train", format!("frozen lookup table audit failed: {audit:?}")));
    }
    let teacher_checksums = teacher.zip(teacher_before).map(|(t, before)| (before, checksum(&t.params.to_bytes())));
    if let Some((a, b)) = &teacher_checksums {
        if a != b {
            return Err(Error::invalid("train", "teacher parameters changed during student training"));
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            oim: cfg.oim,
            lut,
            queue,
            step: cfg.train.steps as u64,
        },
        log,
        audit,
        teacher_checksums,
    })
}
