//! Distillation losses and the alternating training loop.
//!
//! Each step first updates the student (the follower) on
//! `L_Cls + α₁ L_KD_RGB + α₂ L_KD_Fre` with Adam. Then, in `tokd` mode,
//! it updates the two rotations (the leader) on the cosine alignment
//! objective, using per-sample gradients recorded from the same forward
//! pass. The leader's learning rate must decay at least as fast as the
//! follower's.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{shuffled, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::frequency::HighPassSpec;
use crate::metrics::EvalMetrics;
use crate::nn::{cross_entropy, prefixed, Adam, Grads, StepLrSchedule};
use crate::rotation::{rotation_loss, Branch, GradientRecord};
use crate::student::{StudentConfig, StudentNet};
use crate::teacher::TeacherNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Vanilla,
    RgbOnly,
    FreOnly,
    NaiveBoth,
    Tokd,
}

impl DistillMode {
    pub const ALL: [DistillMode; 5] =
        [DistillMode::Vanilla, DistillMode::RgbOnly, DistillMode::FreOnly, DistillMode::NaiveBoth, DistillMode::Tokd];

    pub fn uses_rgb(self) -> bool {
        matches!(self, DistillMode::RgbOnly | DistillMode::NaiveBoth | DistillMode::Tokd)
    }

    pub fn uses_fre(self) -> bool {
        matches!(self, DistillMode::FreOnly | DistillMode::NaiveBoth | DistillMode::Tokd)
    }

    /// Modes that record per-sample gradients of both branches.
    pub fn records_gradients(self) -> bool {
        matches!(self, DistillMode::NaiveBoth | DistillMode::Tokd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::Vanilla => "vanilla",
            DistillMode::RgbOnly => "rgb_only",
            DistillMode::FreOnly => "fre_only",
            DistillMode::NaiveBoth => "naive_both",
            DistillMode::Tokd => "tokd",
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vanilla" => Ok(DistillMode::Vanilla),
            "rgb" | "rgb_only" => Ok(DistillMode::RgbOnly),
            "fre" | "fre_only" => Ok(DistillMode::FreOnly),
            "both" | "naive_both" => Ok(DistillMode::NaiveBoth),
            "tokd" => Ok(DistillMode::Tokd),
            other => Err(Error::Config(format!("unknown distillation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub alpha1: f64,
    pub alpha2: f64,
    pub d: usize,
    pub eta_s: StepLrSchedule,
    pub eta_r: StepLrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub highpass: HighPassSpec,
    pub seed: u64,
    pub distance: Distance,
    /// Normalize per-sample gradients before averaging them into targets.
    pub normalize_grads: bool,
    /// Output channels of the student's backbone stages.
    pub student_stages: Vec<usize>,
    /// Update the teacher projectors along with the student.
    pub train_teacher_projectors: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Tokd,
            alpha1: 10.0,
            alpha2: 10.0,
            d: 64,
            eta_s: StepLrSchedule { base_lr: 1e-4, step_epochs: 5, gamma: 0.1 },
            eta_r: StepLrSchedule { base_lr: 1e-4, step_epochs: 5, gamma: 0.01 },
            epochs: 15,
            batch_size: 32,
            highpass: HighPassSpec::default(),
            seed: 0,
            distance: Distance::Mse,
            normalize_grads: false,
            student_stages: vec![16, 32, 64],
            train_teacher_projectors: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {a}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("rotation dimension must be positive".into()));
        }
        if self.student_stages.is_empty() {
            return Err(Error::Config("student needs at least one stage".into()));
        }
        HighPassSpec::new(self.highpass.cutoff_fraction())?;
        for s in [&self.eta_s, &self.eta_r] {
            StepLrSchedule::new(s.base_lr, s.step_epochs, s.gamma)?;
        }
        if self.mode == DistillMode::Tokd {
            let horizon = self.epochs.max(self.eta_s.step_epochs * self.eta_r.step_epochs + 1);
            let mut prev = f64::INFINITY;
            for e in 0..horizon {
                let ratio = self.eta_r.lr(e) / self.eta_s.lr(e);
                if ratio > prev * (1.0 + 1e-12) {
                    return Err(Error::Config(format!(
                        "rotation learning rate must decay at least as fast as the student's (ratio rises at epoch {e})"
                    )));
                }
                prev = ratio;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    pub fn student_config(&self, data: &LabeledDataset, teacher: &TeacherNet) -> StudentConfig {
        let [c, h, _] = data.image_shape();
        StudentConfig {
            image_size: h,
            in_channels: c,
            stages: self.student_stages.clone(),
            proj_channels: teacher.config.proj_channels,
            rotation_dim: self.d,
            seed: self.seed,
        }
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Distillation loss value and gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub loss: f64,
    pub grad_student: Tensor,
    pub grad_teacher: Tensor,
}

/// Mean squared error between per-sample L2-normalized features, averaged
/// over all `N·D` elements. An antipodal pair scores `4/D` per sample and
/// an orthogonal pair `2/D`.
pub fn kd_loss(f_s: &Tensor, f_t: &Tensor) -> Result<KdLoss> {
    f_s.check_same_shape(f_t, "kd_loss")?;
    let n = f_s.dim(0);
    let dim = f_s.len() / n.max(1);
    let total = (n * dim) as f64;
    let mut gs = vec![0.0; f_s.len()];
    let mut gt = vec![0.0; f_t.len()];
    let mut loss = 0.0;
    for i in 0..n {
        let s = &f_s.data()[i * dim..(i + 1) * dim];
        let t = &f_t.data()[i * dim..(i + 1) * dim];
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ns == 0.0 || nt == 0.0 {
            return Err(Error::Loss(format!(
                "sample {i} has a zero-norm {} feature",
                if ns == 0.0 { "student" } else { "teacher" }
            )));
        }
        let a: Vec<f64> = s.iter().map(|v| v / ns).collect();
        let b: Vec<f64> = t.iter().map(|v| v / nt).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        // dL/da = 2(a - b)/total; back through a = s/|s|
        let da: Vec<f64> = diff.iter().map(|d| 2.0 * d / total).collect();
        let a_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        let b_db: f64 = -b.iter().zip(&da).map(|(x, y)| x * y).sum::<f64>();
        for k in 0..dim {
            gs[i * dim + k] = (da[k] - a[k] * a_da) / ns;
            gt[i * dim + k] = (-da[k] - b[k] * b_db) / nt;
        }
    }
    Ok(KdLoss {
        loss: loss / total,
        grad_student: Tensor::new(f_s.shape().to_vec(), gs)?,
        grad_teacher: Tensor::new(f_t.shape().to_vec(), gt)?,
    })
}

/// `L_Cls + α₁ L_KD_RGB + α₂ L_KD_Fre` with the terms the mode disables
/// dropped.
pub fn total_loss(cls: f64, kd_rgb: f64, kd_fre: f64, cfg: &DistillConfig) -> Result<f64> {
    if cfg.alpha1 < 0.0 || cfg.alpha2 < 0.0 {
        return Err(Error::Config("distillation weights must be nonnegative".into()));
    }
    let mut total = cls;
    if cfg.mode.uses_rgb() {
        total += cfg.alpha1 * kd_rgb;
    }
    if cfg.mode.uses_fre() {
        total += cfg.alpha2 * kd_fre;
    }
    Ok(total)
}

/// Loss terms and diagnostics of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub cls: f64,
    pub kd_rgb: Option<f64>,
    pub kd_fre: Option<f64>,
    pub total: f64,
    pub rot_rgb: Option<f64>,
    pub rot_fre: Option<f64>,
    pub cos_raw: Option<f64>,
    pub cos_rotated: Option<f64>,
}

/// One batch with the frozen teacher branch features for it.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub teacher_rgb: Tensor,
    pub teacher_fre: Tensor,
}

/// Student, teacher projectors, rotations and optimizer state.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub cfg: DistillConfig,
    pub student: StudentNet,
    pub teacher: TeacherNet,
    pub adam: Adam,
}

impl Distiller {
    pub fn new(cfg: DistillConfig, student: StudentNet, teacher: TeacherNet) -> Result<Self> {
        cfg.validate()?;
        if student.projection_shape() != teacher.projection_shape() {
            return Err(Error::Config(format!(
                "student projects to {:?}, teacher to {:?}",
                student.projection_shape(),
                teacher.projection_shape()
            )));
        }
        let mut student = student;
        student.rotation.schedule = cfg.eta_r;
        let adam = Adam::new(cfg.eta_s.lr(0));
        Ok(Self { cfg, student, teacher, adam })
    }

    pub fn step(&mut self, batch: &DistillBatch, epoch: usize) -> Result<StepReport> {
        let mode = self.cfg.mode;
        let (rgb, fre) = (mode.uses_rgb(), mode.uses_fre());
        let out = self.student.forward_train(&batch.x, rgb, fre)?;
        let (t_rgb, t_fre) = self
            .teacher
            .project_train(rgb.then_some(&batch.teacher_rgb), fre.then_some(&batch.teacher_fre))?;
        let (cls, d_logits) = cross_entropy(&out.logits, &batch.labels)?;

        let weighted = |kd: &KdLoss, alpha: f64| (kd.grad_student.scale(alpha), kd.grad_teacher.scale(alpha));
        let kd_r = match (&out.f_rgb, &t_rgb) {
            (Some(s), Some(t)) => Some(kd_loss(s, t)?),
            _ => None,
        };
        let kd_f = match (&out.f_fre, &t_fre) {
            (Some(s), Some(t)) => Some(kd_loss(s, t)?),
            _ => None,
        };
        let g_r = kd_r.as_ref().map(|k| weighted(k, self.cfg.alpha1));
        let g_f = kd_f.as_ref().map(|k| weighted(k, self.cfg.alpha2));

        // per-sample gradients come from the same forward pass as the
        // follower update
        let record = if mode.records_gradients() {
            let (gr, gf) = (g_r.as_ref().expect("rgb active"), g_f.as_ref().expect("fre active"));
            let u_r = self.student.per_sample_grads(Branch::Rgb, &gr.0)?;
            let u_f = self.student.per_sample_grads(Branch::Fre, &gf.0)?;
            Some(GradientRecord::build(&u_r, &u_f, &self.student.rotation, self.cfg.normalize_grads)?)
        } else {
            None
        };

        let mut grads: Grads =
            self.student.backward(&d_logits, g_r.as_ref().map(|g| &g.0), g_f.as_ref().map(|g| &g.0))?;
        if let Some((_, gt)) = &g_r {
            let (_, g) = self.teacher.proj_rgb.backward(gt)?;
            grads.extend(prefixed("teacher_proj_rgb", g));
        }
        if let Some((_, gt)) = &g_f {
            let (_, g) = self.teacher.proj_fre.backward(gt)?;
            grads.extend(prefixed("teacher_proj_fre", g));
        }
        self.adam.lr = self.cfg.eta_s.lr(epoch);
        let mut params = self.student.trainable_params_mut(rgb, fre);
        let (rgb, fre) = (rgb && self.cfg.train_teacher_projectors, fre && self.cfg.train_teacher_projectors);
        if rgb {
            params.extend(
                self.teacher.proj_rgb.params_mut().into_iter().map(|(k, v)| (format!("teacher_proj_rgb.{k}"), v)),
            );
        }
        if fre {
            params.extend(
                self.teacher.proj_fre.params_mut().into_iter().map(|(k, v)| (format!("teacher_proj_fre.{k}"), v)),
            );
        }
        self.adam.step(params, &grads)?;

        let (mut rot_rgb, mut rot_fre) = (None, None);
        if let Some(rec) = &record {
            for branch in [Branch::Rgb, Branch::Fre] {
                let rl = rotation_loss(rec, self.student.rotation.get(branch), rec.grads(branch))?;
                if mode == DistillMode::Tokd {
                    self.student.rotation.update(branch, &rl.grad, epoch)?;
                }
                match branch {
                    Branch::Rgb => rot_rgb = Some(rl.loss),
                    Branch::Fre => rot_fre = Some(rl.loss),
                }
            }
        }

        let kd_rgb = kd_r.map(|k| k.loss);
        let kd_fre = kd_f.map(|k| k.loss);
        let total = total_loss(cls, kd_rgb.unwrap_or(0.0), kd_fre.unwrap_or(0.0), &self.cfg)?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
        }
        Ok(StepReport {
            cls,
            kd_rgb,
            kd_fre,
            total,
            rot_rgb,
            rot_fre,
            cos_raw: record.as_ref().and_then(|r| r.cos_raw),
            cos_rotated: record.as_ref().and_then(|r| r.cos_rotated),
        })
    }
}

/// One row of the per-epoch metrics CSV. Loss columns are step means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "lr_S")]
    pub lr_s: f64,
    #[serde(rename = "lr_R")]
    pub lr_r: f64,
    #[serde(rename = "L_Cls")]
    pub l_cls: f64,
    #[serde(rename = "L_KD_RGB")]
    pub l_kd_rgb: Option<f64>,
    #[serde(rename = "L_KD_Fre")]
    pub l_kd_fre: Option<f64>,
    #[serde(rename = "L_Rr")]
    pub l_rr: Option<f64>,
    #[serde(rename = "L_Rf")]
    pub l_rf: Option<f64>,
    pub mean_grad_cosine_raw: Option<f64>,
    pub mean_grad_cosine_rotated: Option<f64>,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mode: DistillMode,
    pub config_hash: String,
    pub config: DistillConfig,
    pub epochs: Vec<EpochRecord>,
    /// Earliest epoch with the highest validation accuracy; `None` when
    /// no epochs were run.
    pub best_epoch: Option<usize>,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
    /// Every step's report, in order.
    pub steps: Vec<StepReport>,
}

impl ExperimentResult {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// The JSON summary (without per-step reports).
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "mode": self.mode,
            "config_hash": self.config_hash,
            "config": self.config,
            "best_epoch": self.best_epoch,
            "val": self.val,
            "test": self.test,
            "epochs": self.epochs,
        });
        serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Result plus the student selected by validation accuracy.
#[derive(Debug, Clone)]
pub struct DistillRun {
    pub result: ExperimentResult,
    pub best: StudentNet,
    pub teacher: TeacherNet,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Frozen teacher branch features for every sample, computed once.
pub fn teacher_features(teacher: &TeacherNet, data: &LabeledDataset) -> Result<(Tensor, Tensor)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rgb = Vec::new();
    let mut fre = Vec::new();
    let mut shape = vec![data.len()];
    shape.extend_from_slice(teacher.feature_shape());
    for chunk in all.chunks(256) {
        let (x, xf, _) = data.batch(chunk)?;
        let (r, f) = teacher.branch_features(&x, &xf)?;
        rgb.extend(r.into_data());
        fre.extend(f.into_data());
    }
    Ok((Tensor::new(shape.clone(), rgb)?, Tensor::new(shape, fre)?))
}

/// Train a student with `cfg` against a trained teacher.
pub fn run_distillation(cfg: &DistillConfig, teacher: &TeacherNet, data: &LabeledDataset) -> Result<DistillRun> {
    let feats = if cfg.mode == DistillMode::Vanilla { None } else { Some(teacher_features(teacher, data)?) };
    run_distillation_with(cfg, teacher, data, feats.as_ref())
}

/// As [`run_distillation`], reusing precomputed [`teacher_features`].
pub fn run_distillation_with(
    cfg: &DistillConfig,
    teacher: &TeacherNet,
    data: &LabeledDataset,
    feats: Option<&(Tensor, Tensor)>,
) -> Result<DistillRun> {
    cfg.validate()?;
    let train = data.indices(Split::Train);
    for (split, idx) in [(Split::Train, &train), (Split::Val, &data.indices(Split::Val)), (Split::Test, &data.indices(Split::Test))] {
        if idx.is_empty() {
            return Err(Error::Data(format!("{} split is empty", split.as_str())));
        }
    }
    let student = StudentNet::new(cfg.student_config(data, teacher))?;
    let mut dist = Distiller::new(cfg.clone(), student, teacher.clone())?;
    let owned;
    let feats = match feats {
        Some(f) => f,
        None if cfg.mode == DistillMode::Vanilla => {
            let shape: Vec<usize> = std::iter::once(0).chain(teacher.feature_shape().iter().cloned()).collect();
            owned = (Tensor::zeros(&shape), Tensor::zeros(&shape));
            &owned
        }
        None => {
            owned = teacher_features(teacher, data)?;
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut best = dist.student.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = shuffled(&train, &mut rng);
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, _, labels) = data.batch(chunk)?;
            let (teacher_rgb, teacher_fre) = if cfg.mode == DistillMode::Vanilla {
                (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
            } else {
                (feats.0.select_rows(chunk)?, feats.1.select_rows(chunk)?)
            };
            steps.push(dist.step(&DistillBatch { x, labels, teacher_rgb, teacher_fre }, epoch)?);
        }
        let ep = &steps[first..];
        let val = dist.student.evaluate(data, Split::Val)?;
        log::info!("{} epoch {epoch}: cls {:.4} val_acc {:.4}", cfg.mode, mean_of(ep.iter().map(|s| Some(s.cls))).unwrap_or(f64::NAN), val.accuracy);
        epochs.push(EpochRecord {
            epoch,
            lr_s: cfg.eta_s.lr(epoch),
            lr_r: if cfg.mode == DistillMode::Tokd { cfg.eta_r.lr(epoch) } else { 0.0 },
            l_cls: mean_of(ep.iter().map(|s| Some(s.cls))).unwrap_or(f64::NAN),
            l_kd_rgb: mean_of(ep.iter().map(|s| s.kd_rgb)),
            l_kd_fre: mean_of(ep.iter().map(|s| s.kd_fre)),
            l_rr: mean_of(ep.iter().map(|s| s.rot_rgb)),
            l_rf: mean_of(ep.iter().map(|s| s.rot_fre)),
            mean_grad_cosine_raw: mean_of(ep.iter().map(|s| s.cos_raw)),
            mean_grad_cosine_rotated: mean_of(ep.iter().map(|s| s.cos_rotated)),
            val_acc: val.accuracy,
            val_auc: val.auc,
        });
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            best_epoch = Some(epoch);
            best = dist.student.clone();
            best.clear_cache();
        }
    }
    let val = best.evaluate(data, Split::Val)?;
    let test = best.evaluate(data, Split::Test)?;
    let result = ExperimentResult {
        mode: cfg.mode,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        epochs,
        best_epoch,
        val,
        test,
        steps,
    };
    Ok(DistillRun { result, best, teacher: dist.teacher })
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kd_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[3, 10], &mut rng);
        assert!(kd_loss(&t.scale(2.5), &t).unwrap().loss.abs() < 1e-15);
        let anti = kd_loss(&t.scale(-1.0), &t).unwrap().loss;
        assert!((anti - 4.0 / 10.0).abs() < 1e-12);
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
        assert!((kd_loss(&a, &b).unwrap().loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kd_zero_norm_names_sample() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::ones(&[2, 2]);
        let err = kd_loss(&a, &b).unwrap_err();
        assert!(matches!(&err, Error::Loss(m) if m.contains("sample 1")), "{err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut cfg = DistillConfig { mode: DistillMode::Tokd, ..DistillConfig::default() };
        assert!((total_loss(0.5, 0.01, 0.02, &cfg).unwrap() - 0.8).abs() < 1e-12);
        cfg.alpha1 = 200.0;
        cfg.alpha2 = 200.0;
        assert!((total_loss(0.5, 0.01, 0.02, &cfg).unwrap() - 6.5).abs() < 1e-12);
        cfg.alpha1 = 0.0;
        cfg.alpha2 = 0.0;
        assert_eq!(total_loss(0.5, 0.01, 0.02, &cfg).unwrap(), 0.5);
        cfg.mode = DistillMode::RgbOnly;
        cfg.alpha1 = 10.0;
        cfg.alpha2 = 10.0;
        assert!((total_loss(0.5, 0.01, 0.02, &cfg).unwrap() - 0.6).abs() < 1e-12);
        cfg.alpha1 = -1.0;
        assert!(matches!(total_loss(0.5, 0.01, 0.02, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_ratio_validation() {
        let ok = DistillConfig::default();
        ok.validate().unwrap();
        let bad = DistillConfig { eta_r: StepLrSchedule { base_lr: 1e-4, step_epochs: 10, gamma: 0.1 }, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let neg = DistillConfig { alpha2: -0.5, ..ok };
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parsing() {
        for m in DistillMode::ALL {
            assert_eq!(m.as_str().parse::<DistillMode>().unwrap(), m);
        }
        assert_eq!("both".parse::<DistillMode>().unwrap(), DistillMode::NaiveBoth);
        assert!("nope".parse::<DistillMode>().is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
