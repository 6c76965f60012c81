//! Single-branch student: backbone `S_B`, the rotation insertion point,
//! projectors `G_Sr` / `G_Sf` and the classifier `G_Sc`.
//!
//! Training runs `z = S_B(x)`, `m_k = rotate(z, R_k)`, `F_Sk = G_Sk(m_k)`
//! and `logits = G_Sc(z)`. Prediction only runs `G_Sc(S_B(x))`; the
//! projectors and rotations can be dropped from the deployed model.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvalMetrics, ScoredPredictions};
use crate::nn::{conv_bn_relu, prefixed, softmax, BnGrad, Checkpoint, Grads, Layer, NetworkGraph, StepLrSchedule};
use crate::rotation::{rotate, rotate_backward, Branch, RotationPair};
use crate::teacher::build_stages;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 backbone stage.
    pub stages: Vec<usize>,
    /// Channel width of the common distillation space.
    pub proj_channels: usize,
    /// Rotation dimension `d`.
    pub rotation_dim: usize,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { image_size: 64, in_channels: 3, stages: vec![16, 32, 64], proj_channels: 64, rotation_dim: 64, seed: 0 }
    }
}

/// G_Sr: two conv-BN-ReLU blocks.
pub fn student_rgb_projector(in_shape: &[usize], out_channels: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let mut layers = conv_bn_relu(in_shape[0], out_channels, 3, 1, rng);
    layers.extend(conv_bn_relu(out_channels, out_channels, 3, 1, rng));
    NetworkGraph::new(in_shape, layers)
}

/// G_Sf: three conv-BN-ReLU blocks.
pub fn student_fre_projector(in_shape: &[usize], out_channels: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let mut layers = conv_bn_relu(in_shape[0], out_channels, 3, 1, rng);
    layers.extend(conv_bn_relu(out_channels, out_channels, 3, 1, rng));
    layers.extend(conv_bn_relu(out_channels, out_channels, 3, 1, rng));
    NetworkGraph::new(in_shape, layers)
}

/// Outputs of one training forward pass.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    /// `S_B(x)`, unrotated.
    pub z: Tensor,
    pub logits: Tensor,
    pub f_rgb: Option<Tensor>,
    pub f_fre: Option<Tensor>,
}

/// The deployable part of a student: backbone and classifier only.
#[derive(Debug, Clone)]
pub struct InferenceStudent {
    pub config: StudentConfig,
    pub backbone: NetworkGraph,
    pub classifier: NetworkGraph,
}

impl InferenceStudent {
    /// `softmax(G_Sc(S_B(x)))`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        softmax(&self.classifier.infer(&self.backbone.infer(x)?)?)
    }

    pub fn evaluate(&self, data: &LabeledDataset, split: Split) -> Result<EvalMetrics> {
        evaluate_with(data, split, |x| self.predict(x))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(meta_json(MetaKind::Inference, &self.config)?);
        ck.extend_prefixed("backbone.", self.backbone.state());
        ck.extend_prefixed("classifier.", self.classifier.state());
        Ok(ck)
    }

    /// Loads either an inference or a full student checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (_, config) = parse_meta(&ck.meta)?;
        let mut s = StudentNet::new(config)?.inference();
        s.backbone.load_state(&ck.tensors, "backbone.")?;
        s.classifier.load_state(&ck.tensors, "classifier.")?;
        Ok(s)
    }
}

pub(crate) fn evaluate_with(
    data: &LabeledDataset,
    split: Split,
    predict: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<EvalMetrics> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let (x, _, _) = data.batch(chunk)?;
        scores.extend(predict(&x)?.data().chunks(2).map(|r| r[1]));
    }
    let labels = idx.iter().map(|&i| data.labels()[i]).collect();
    EvalMetrics::compute(&ScoredPredictions::new(scores, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MetaKind {
    Full,
    Inference,
}

#[derive(Serialize, Deserialize)]
struct StudentMeta {
    kind: MetaKind,
    config: StudentConfig,
}

fn meta_json(kind: MetaKind, config: &StudentConfig) -> Result<String> {
    serde_json::to_string(&StudentMeta { kind, config: config.clone() }).map_err(|e| Error::Format(e.to_string()))
}

fn parse_meta(meta: &str) -> Result<(MetaKind, StudentConfig)> {
    let m: StudentMeta = serde_json::from_str(meta).map_err(|e| Error::Format(format!("student metadata: {e}")))?;
    Ok((m.kind, m.config))
}

#[derive(Debug)]
pub struct StudentNet {
    pub config: StudentConfig,
    pub backbone: NetworkGraph,
    pub classifier: NetworkGraph,
    pub proj_rgb: NetworkGraph,
    pub proj_fre: NetworkGraph,
    pub rotation: RotationPair,
    feature_shape: Vec<usize>,
    rotation_evals: AtomicUsize,
}

impl Clone for StudentNet {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            classifier: self.classifier.clone(),
            proj_rgb: self.proj_rgb.clone(),
            proj_fre: self.proj_fre.clone(),
            rotation: self.rotation.clone(),
            feature_shape: self.feature_shape.clone(),
            rotation_evals: AtomicUsize::new(self.rotation_evals.load(Ordering::Relaxed)),
        }
    }
}

impl StudentNet {
    /// Parameters are drawn in the order backbone, classifier, projectors,
    /// so the backbone and classifier do not depend on the projector plan.
    pub fn new(config: StudentConfig) -> Result<Self> {
        if config.stages.is_empty() || config.image_size == 0 || config.in_channels == 0 || config.proj_channels == 0 {
            return Err(Error::Config("student needs at least one stage and nonzero sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input = [config.in_channels, config.image_size, config.image_size];
        let (stages, feature_shape) = build_stages(input, &config.stages, &mut rng)?;
        let layers: Vec<Layer> = stages.into_iter().flat_map(|g| g.layers().to_vec()).collect();
        let backbone = NetworkGraph::new(&input, layers)?;
        let m: usize = feature_shape.iter().product();
        if config.rotation_dim > m {
            return Err(Error::Config(format!(
                "rotation dimension {} exceeds flattened backbone feature length {m}",
                config.rotation_dim
            )));
        }
        let c = feature_shape[0];
        let classifier = NetworkGraph::new(&feature_shape, vec![Layer::global_avg_pool(), Layer::linear(c, 2, &mut rng)])?;
        let proj_rgb = student_rgb_projector(&feature_shape, config.proj_channels, &mut rng)?;
        let proj_fre = student_fre_projector(&feature_shape, config.proj_channels, &mut rng)?;
        // replaced by the distiller's schedule
        let rotation = RotationPair::new(config.rotation_dim, StepLrSchedule::new(1e-4, 3, 0.1)?)?;
        Ok(Self {
            config,
            backbone,
            classifier,
            proj_rgb,
            proj_fre,
            rotation,
            feature_shape,
            rotation_evals: AtomicUsize::new(0),
        })
    }

    /// Per-sample shape of `S_B(x)`.
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn projection_shape(&self) -> &[usize] {
        self.proj_rgb.output_shape()
    }

    /// Number of `rotate` calls made by this student.
    pub fn rotation_evals(&self) -> usize {
        self.rotation_evals.load(Ordering::Relaxed)
    }

    fn flat(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(0);
        z.reshaped(&[n, z.len() / n.max(1)])
    }

    fn spatial(&self, m: Tensor) -> Result<Tensor> {
        let mut shape = vec![m.dim(0)];
        shape.extend_from_slice(&self.feature_shape);
        m.reshape(&shape)
    }

    /// `m_k = rotate(z, R_k)`, reshaped back to the spatial layout of `z`.
    pub fn rotated(&self, z: &Tensor, branch: Branch) -> Result<Tensor> {
        self.rotation_evals.fetch_add(1, Ordering::Relaxed);
        self.spatial(rotate(&self.flat(z)?, self.rotation.get(branch))?)
    }

    /// Training forward pass. Projectors run only when requested.
    pub fn forward_train(&mut self, x: &Tensor, want_rgb: bool, want_fre: bool) -> Result<StudentOutput> {
        let z = self.backbone.forward_train(x)?;
        let logits = self.classifier.forward_train(&z)?;
        let f_rgb = if want_rgb {
            let m = self.rotated(&z, Branch::Rgb)?;
            Some(self.proj_rgb.forward_train(&m)?)
        } else {
            None
        };
        let f_fre = if want_fre {
            let m = self.rotated(&z, Branch::Fre)?;
            Some(self.proj_fre.forward_train(&m)?)
        } else {
            None
        };
        Ok(StudentOutput { z, logits, f_rgb, f_fre })
    }

    /// Parameter gradients for upstream gradients on the logits and the
    /// projected features. Names are prefixed with `backbone.`,
    /// `classifier.`, `proj_rgb.` and `proj_fre.`.
    pub fn backward(&self, d_logits: &Tensor, d_rgb: Option<&Tensor>, d_fre: Option<&Tensor>) -> Result<Grads> {
        let (mut dz, g) = self.classifier.backward(d_logits)?;
        let mut grads = prefixed("classifier", g);
        for (branch, proj, up, name) in [
            (Branch::Rgb, &self.proj_rgb, d_rgb, "proj_rgb"),
            (Branch::Fre, &self.proj_fre, d_fre, "proj_fre"),
        ] {
            if let Some(up) = up {
                let (dm, g) = proj.backward(up)?;
                grads.extend(prefixed(name, g));
                let back = self.spatial(rotate_backward(&self.flat(&dm)?, self.rotation.get(branch))?)?;
                dz.axpy(1.0, &back)?;
            }
        }
        let (_, g) = self.backbone.backward(&dz)?;
        grads.extend(prefixed("backbone", g));
        Ok(grads)
    }

    /// Per-sample gradients of each sample's own loss with respect to
    /// `m_k`, flattened to `N×M`. `d_proj` is the gradient of the
    /// batch-mean loss with respect to the projector output; projector
    /// batch statistics are held fixed so samples decouple.
    pub fn per_sample_grads(&self, branch: Branch, d_proj: &Tensor) -> Result<Tensor> {
        let proj = match branch {
            Branch::Rgb => &self.proj_rgb,
            Branch::Fre => &self.proj_fre,
        };
        let (dm, _) = proj.backward_with(d_proj, BnGrad::FrozenStats)?;
        let n = dm.dim(0) as f64;
        self.flat(&dm.scale(n))
    }

    /// Parameters updated by distillation for the given active branches.
    pub fn trainable_params_mut(&mut self, rgb: bool, fre: bool) -> Vec<(String, &mut Tensor)> {
        let mut parts: Vec<(&str, &mut NetworkGraph)> =
            vec![("backbone", &mut self.backbone), ("classifier", &mut self.classifier)];
        if rgb {
            parts.push(("proj_rgb", &mut self.proj_rgb));
        }
        if fre {
            parts.push(("proj_fre", &mut self.proj_fre));
        }
        let mut out = Vec::new();
        for (p, g) in parts {
            out.extend(g.params_mut().into_iter().map(|(k, t)| (format!("{p}.{k}"), t)));
        }
        out
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        softmax(&self.classifier.infer(&self.backbone.infer(x)?)?)
    }

    pub fn evaluate(&self, data: &LabeledDataset, split: Split) -> Result<EvalMetrics> {
        evaluate_with(data, split, |x| self.predict(x))
    }

    /// Backbone and classifier only.
    pub fn inference(&self) -> InferenceStudent {
        InferenceStudent {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            classifier: self.classifier.clone(),
        }
    }

    pub fn clear_cache(&mut self) {
        self.backbone.clear_cache();
        self.classifier.clear_cache();
        self.proj_rgb.clear_cache();
        self.proj_fre.clear_cache();
    }

    /// Everything, including projectors and rotations.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(meta_json(MetaKind::Full, &self.config)?);
        ck.extend_prefixed("backbone.", self.backbone.state());
        ck.extend_prefixed("classifier.", self.classifier.state());
        ck.extend_prefixed("proj_rgb.", self.proj_rgb.state());
        ck.extend_prefixed("proj_fre.", self.proj_fre.state());
        ck.tensors.insert("rotation.rgb".into(), self.rotation.get(Branch::Rgb).clone());
        ck.tensors.insert("rotation.fre".into(), self.rotation.get(Branch::Fre).clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (kind, config) = parse_meta(&ck.meta)?;
        if kind != MetaKind::Full {
            return Err(Error::Registry("inference checkpoint has no projectors or rotations".into()));
        }
        let mut s = Self::new(config)?;
        s.backbone.load_state(&ck.tensors, "backbone.")?;
        s.classifier.load_state(&ck.tensors, "classifier.")?;
        s.proj_rgb.load_state(&ck.tensors, "proj_rgb.")?;
        s.proj_fre.load_state(&ck.tensors, "proj_fre.")?;
        for (branch, key) in [(Branch::Rgb, "rotation.rgb"), (Branch::Fre, "rotation.fre")] {
            let r = ck
                .tensors
                .get(key)
                .ok_or_else(|| Error::Registry(format!("checkpoint is missing `{key}`")))?;
            s.rotation.set(branch, r.clone())?;
        }
        Ok(s)
    }
}
