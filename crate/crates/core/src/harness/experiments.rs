//! λ sweep and ablation suite.
//!
//! Runs go through a [`Runner`], which memoises finished runs by config and
//! teacher fingerprint so that rows sharing a configuration (for instance
//! the λ = 1 sweep point and the ablation baseline) train once.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, Checkpoint, ExperimentConfig, KdMode, RunResult, Teachers};
use crate::codec::write_file;
use crate::error::{Error, Result};
use crate::oim::LookupTable;
use crate::psmodel::BackboneSize;
use crate::rng::checksum;
use crate::synthscene::DatasetSplit;

/// λ_oim grid of the sweep.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.05, 0.1, 0.3, 0.6, 1.0];

/// Memoising executor for runs on one dataset.
pub struct Runner<'a> {
    data: &'a DatasetSplit,
    cache: Mutex<HashMap<String, Arc<RunResult>>>,
}

impl<'a> Runner<'a> {
    pub fn new(data: &'a DatasetSplit) -> Self {
        Runner {
            data,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn data(&self) -> &DatasetSplit {
        self.data
    }

    /// Number of distinct runs executed so far.
    pub fn runs(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn run(&self, cfg: &ExperimentConfig, teachers: &Teachers) -> Result<Arc<RunResult>> {
        let key = fingerprint(cfg, teachers);
        if let Some(r) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(r));
        }
        let t0 = std::time::Instant::now();
        let r = Arc::new(run(cfg, self.data, teachers)?);
        log::info!(
            "run seed={} kd={:?} size={} λ={} took {:.1}s: det {:.4} search {:.4}",
            cfg.seed,
            cfg.kd_mode,
            cfg.model.size,
            cfg.oim_weight(),
            t0.elapsed().as_secs_f64(),
            r.report.det_map,
            r.report.search_map
        );
        self.cache.lock().expect("cache lock").insert(key, Arc::clone(&r));
        Ok(r)
    }
}

fn fingerprint(cfg: &ExperimentConfig, teachers: &Teachers) -> String {
    // paths only locate the teachers; their contents are hashed instead
    let mut c = cfg.clone();
    c.teacher = Default::default();
    let mut key = c.to_toml();
    if cfg.kd_mode.uses_detector_teacher() {
        if let Some(d) = &teachers.detector {
            key.push_str(&checksum(&d.params.to_bytes()));
        }
    }
    if cfg.kd_mode.uses_teacher_table() {
        if let Some(l) = &teachers.lut {
            key.push_str(&checksum(&l.to_bytes()));
        }
    }
    key
}

/// Student seeds `base.seed, base.seed + 1, …`.
pub fn seeds(base: &ExperimentConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.seed + i).collect()
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // tied values share the average of their positions
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either sample is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub search_map: f64,
    pub cmc_top1: f64,
    pub det_map: f64,
    pub det_recall: f64,
}

/// One row per (λ, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "lambda_oim,seed,search_map,cmc_top1,det_map,det_recall";
    pub const PLOT_HEADER: &'static str =
        "lambda_oim,det_map_mean,det_map_min,det_map_max,search_map_mean,search_map_min,search_map_max";

    /// Distinct λ values in first-seen order.
    pub fn lambdas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.lambda) {
                out.push(r.lambda);
            }
        }
        out
    }

    pub fn at(&self, lambda: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.lambda == lambda)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.lambda, r.seed, r.search_map, r.cmc_top1, r.det_map, r.det_recall
            );
        }
        s
    }

    /// Per-λ mean and range of detection and search mAP, x = λ_oim.
    pub fn plot_data_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PLOT_HEADER);
        for l in self.lambdas() {
            let det: Vec<f64> = self.at(l).map(|r| r.det_map).collect();
            let search: Vec<f64> = self.at(l).map(|r| r.search_map).collect();
            let stats = |v: &[f64]| {
                (
                    v.iter().sum::<f64>() / v.len() as f64,
                    v.iter().cloned().fold(f64::INFINITY, f64::min),
                    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            let (dm, dlo, dhi) = stats(&det);
            let (sm, slo, shi) = stats(&search);
            let _ = writeln!(s, "{l},{dm:.6},{dlo:.6},{dhi:.6},{sm:.6},{slo:.6},{shi:.6}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("sweep.csv"), self.to_csv().as_bytes())?;
        write_file(&dir.join("sweep_plot.csv"), self.plot_data_csv().as_bytes())
    }
}

/// Trains the joint model without distillation at every λ_oim in
/// `lambdas` for every seed. λ = 0 is the pure detector.
pub fn lambda_sweep(runner: &Runner, base: &ExperimentConfig, lambdas: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one λ and one seed".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Config(format!("λ_oim must be nonnegative, got {l}")));
    }
    let jobs: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(lambda, seed)| {
            let mut cfg = base.clone();
            cfg.kd_mode = KdMode::None;
            cfg.oim.weight = Some(lambda);
            cfg.seed = seed;
            let r = runner.run(&cfg, &Teachers::default())?;
            Ok(SweepRow {
                lambda,
                seed,
                search_map: r.report.search_map,
                cmc_top1: r.report.cmc_top1,
                det_map: r.report.det_map,
                det_recall: r.report.det_recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

/// Teachers of the ablation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Same backbone trained with λ_oim = 0.
    Detector,
    /// Same backbone, joint model, same schedule as the students.
    Converged,
    /// Joint model trained twice as long.
    Strong,
    /// Joint model on the SMALL backbone.
    Weak,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 4] = [
        TeacherKind::Detector,
        TeacherKind::Converged,
        TeacherKind::Strong,
        TeacherKind::Weak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Detector => "detector",
            TeacherKind::Converged => "converged",
            TeacherKind::Strong => "strong",
            TeacherKind::Weak => "weak",
        }
    }

    /// Teacher training configuration derived from the student base.
    pub fn config(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.kd_mode = KdMode::None;
        c.teacher = Default::default();
        c.oim.weight = Some(1.0);
        c.model.size = BackboneSize::Large;
        match self {
            TeacherKind::Detector => {
                c.oim.weight = Some(0.0);
                c.seed = base.seed + 1001;
            }
            TeacherKind::Converged => c.seed = base.seed + 1000,
            TeacherKind::Strong => {
                c.seed = base.seed + 1003;
                c.train.steps *= 2;
            }
            TeacherKind::Weak => {
                c.seed = base.seed + 1002;
                c.model.size = BackboneSize::Small;
            }
        }
        c
    }
}

/// Trained teacher checkpoints with their own evaluation.
#[derive(Clone, Debug, Default)]
pub struct TeacherSet {
    pub runs: HashMap<TeacherKind, Arc<RunResult>>,
}

impl TeacherSet {
    pub fn train(runner: &Runner, base: &ExperimentConfig, kinds: &[TeacherKind]) -> Result<Self> {
        let runs = kinds
            .par_iter()
            .map(|&k| Ok((k, runner.run(&k.config(base), &Teachers::default())?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(TeacherSet { runs })
    }

    pub fn checkpoint(&self, kind: TeacherKind) -> Option<&Checkpoint> {
        self.runs.get(&kind).map(|r| &r.outcome.checkpoint)
    }

    pub fn lut(&self, kind: TeacherKind) -> Option<&LookupTable> {
        self.checkpoint(kind).map(|c| &c.lut)
    }

    /// Writes `<name>.psck` and `<name>.lut` per teacher.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (k, r) in &self.runs {
            r.outcome.checkpoint.save(&dir.join(format!("{}.psck", k.name())))?;
            r.outcome.checkpoint.lut.export(&dir.join(format!("{}.lut", k.name())))?;
        }
        Ok(())
    }
}

/// Rows of the ablation table, mirroring the distillation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRowKind {
    Baseline,
    KdDet,
    KdDetLowLambda,
    KdReid,
    Both,
    KdReidWeakTeacher,
    KdReidStrongTeacher,
    SmallBaseline,
    SmallKdReid,
}

impl AblationRowKind {
    pub const ALL: [AblationRowKind; 9] = [
        AblationRowKind::Baseline,
        AblationRowKind::KdDet,
        AblationRowKind::KdDetLowLambda,
        AblationRowKind::KdReid,
        AblationRowKind::Both,
        AblationRowKind::KdReidWeakTeacher,
        AblationRowKind::KdReidStrongTeacher,
        AblationRowKind::SmallBaseline,
        AblationRowKind::SmallKdReid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRowKind::Baseline => "baseline",
            AblationRowKind::KdDet => "kd_det",
            AblationRowKind::KdDetLowLambda => "kd_det_low_lambda",
            AblationRowKind::KdReid => "kd_reid",
            AblationRowKind::Both => "kd_det+kd_reid",
            AblationRowKind::KdReidWeakTeacher => "kd_reid_weak_teacher",
            AblationRowKind::KdReidStrongTeacher => "kd_reid_strong_teacher",
            AblationRowKind::SmallBaseline => "small_baseline",
            AblationRowKind::SmallKdReid => "small_kd_reid",
        }
    }

    pub fn size(self) -> BackboneSize {
        match self {
            AblationRowKind::SmallBaseline | AblationRowKind::SmallKdReid => BackboneSize::Small,
            _ => BackboneSize::Large,
        }
    }

    pub fn kd_mode(self) -> KdMode {
        match self {
            AblationRowKind::Baseline | AblationRowKind::SmallBaseline => KdMode::None,
            AblationRowKind::KdDet | AblationRowKind::KdDetLowLambda => KdMode::KdDet,
            AblationRowKind::Both => KdMode::Both,
            _ => KdMode::KdReid,
        }
    }

    pub fn lambda(self) -> f64 {
        match self {
            AblationRowKind::Baseline | AblationRowKind::SmallBaseline | AblationRowKind::KdDet => 1.0,
            AblationRowKind::KdDetLowLambda => 0.1,
            _ => crate::kd::KD_REID_OIM_WEIGHT,
        }
    }

    /// Teacher whose lookup table the row distills from.
    pub fn lut_teacher(self) -> Option<TeacherKind> {
        match self {
            AblationRowKind::KdReid | AblationRowKind::Both | AblationRowKind::SmallKdReid => Some(TeacherKind::Converged),
            AblationRowKind::KdReidWeakTeacher => Some(TeacherKind::Weak),
            AblationRowKind::KdReidStrongTeacher => Some(TeacherKind::Strong),
            _ => None,
        }
    }

    /// Teachers this row needs.
    pub fn teachers(self) -> Vec<TeacherKind> {
        let mut t = Vec::new();
        if self.kd_mode().uses_detector_teacher() {
            t.push(TeacherKind::Detector);
        }
        t.extend(self.lut_teacher());
        t
    }

    pub fn config(self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.model.size = self.size();
        c.kd_mode = self.kd_mode();
        c.teacher = Default::default();
        c.oim.weight = Some(self.lambda());
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub kind: AblationRowKind,
    pub lambda: f64,
    /// `(seed, report)` per student run; empty when skipped.
    pub runs: Vec<(u64, Arc<RunResult>)>,
    pub skipped: Option<String>,
}

impl AblationRow {
    fn metric(&self, f: impl Fn(&RunResult) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().map(|(_, r)| f(r)).collect();
        (!v.is_empty()).then(|| median(&v))
    }

    pub fn median_det_map(&self) -> Option<f64> {
        self.metric(|r| r.report.det_map)
    }

    pub fn median_det_recall(&self) -> Option<f64> {
        self.metric(|r| r.report.det_recall)
    }

    pub fn median_search_map(&self) -> Option<f64> {
        self.metric(|r| r.report.search_map)
    }

    pub fn median_cmc_top1(&self) -> Option<f64> {
        self.metric(|r| r.report.cmc_top1)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "row,backbone,kd_mode,lambda_oim,teacher,seeds,search_map,cmc_top1,det_map,det_recall,note";
    pub const PER_SEED_HEADER: &'static str = "row,seed,search_map,cmc_top1,det_map,det_recall";

    pub fn row(&self, kind: AblationRowKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Medians over seeds, one line per row; skipped rows keep empty metrics.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let teacher = r.kind.lut_teacher().map(TeacherKind::name).unwrap_or("");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.kind.name(),
                r.kind.size(),
                r.kind.kd_mode().name(),
                r.lambda,
                teacher,
                r.runs.len(),
                fmt(r.median_search_map()),
                fmt(r.median_cmc_top1()),
                fmt(r.median_det_map()),
                fmt(r.median_det_recall()),
                r.skipped.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }

    pub fn per_seed_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PER_SEED_HEADER);
        for r in &self.rows {
            for (seed, run) in &r.runs {
                let m = &run.report;
                let _ = writeln!(
                    s,
                    "{},{seed},{:.6},{:.6},{:.6},{:.6}",
                    r.kind.name(),
                    m.search_map,
                    m.cmc_top1,
                    m.det_map,
                    m.det_recall
                );
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        write_file(&dir.join("ablation_per_seed.csv"), self.per_seed_csv().as_bytes())
    }
}

/// Runs the requested rows for every seed. A row whose teacher is absent
/// from `teachers` is skipped with a diagnostic.
pub fn run_ablation_suite(
    runner: &Runner,
    base: &ExperimentConfig,
    teachers: &TeacherSet,
    kinds: &[AblationRowKind],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let missing: Vec<&str> = kind
            .teachers()
            .into_iter()
            .filter(|t| !teachers.runs.contains_key(t))
            .map(TeacherKind::name)
            .collect();
        if !missing.is_empty() {
            let msg = format!("missing teacher: {}", missing.join(" "));
            log::warn!("ablation row {} skipped: {msg}", kind.name());
            rows.push(AblationRow {
                kind,
                lambda: kind.lambda(),
                runs: Vec::new(),
                skipped: Some(msg),
            });
            continue;
        }
        let t = Teachers {
            detector: kind
                .kd_mode()
                .uses_detector_teacher()
                .then(|| teachers.checkpoint(TeacherKind::Detector).map(|c| c.model.clone()))
                .flatten(),
            lut: kind.lut_teacher().and_then(|k| teachers.lut(k).cloned()),
        };
        let runs = seeds
            .par_iter()
            .map(|&seed| Ok((seed, runner.run(&kind.config(base, seed), &t)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            kind,
            lambda: kind.lambda(),
            runs,
            skipped: None,
        });
    }
    Ok(AblationTable { rows })
}
