//! Dual-branch teacher: an RGB branch on `x`, a frequency branch on the
//! high-pass view `x^F`, cross-branch attention (RFAM) after the first
//! stages, a fused classification head, and the two projectors that
//! condense each branch's final feature for distillation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvalMetrics, ScoredPredictions};
use crate::nn::{conv_bn_relu, cross_entropy, prefixed, softmax, Adam, Checkpoint, Grads, Layer, NetworkGraph, StepLrSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub stages: Vec<usize>,
    /// Attention blocks, applied after the first `rfam_blocks` stages.
    pub rfam_blocks: usize,
    /// Conv-BN-ReLU modules inside each attention block.
    pub rfam_modules: usize,
    /// Multiply by `1 + A` instead of `A`.
    pub rfam_residual: bool,
    /// Channel width of the common distillation space.
    pub proj_channels: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            stages: vec![16, 32, 64],
            rfam_blocks: 3,
            rfam_modules: 2,
            rfam_residual: false,
            proj_channels: 64,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.image_size == 0 || self.in_channels == 0 || self.proj_channels == 0 {
            return Err(Error::Config("teacher needs at least one stage and nonzero sizes".into()));
        }
        if self.rfam_blocks > self.stages.len() {
            return Err(Error::Config(format!(
                "{} attention blocks for {} stages",
                self.rfam_blocks,
                self.stages.len()
            )));
        }
        if self.rfam_blocks > 0 && self.rfam_modules == 0 {
            return Err(Error::Config("attention blocks need at least one conv module".into()));
        }
        Ok(())
    }
}

/// Stride-2 conv-BN-ReLU stages; returns one graph per stage and the final
/// per-sample feature shape.
pub(crate) fn build_stages(
    in_shape: [usize; 3],
    stages: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<NetworkGraph>, Vec<usize>)> {
    let mut shape = in_shape.to_vec();
    let mut out = Vec::with_capacity(stages.len());
    for &c in stages {
        let g = NetworkGraph::new(&shape, conv_bn_relu(shape[0], c, 3, 2, rng))?;
        shape = g.output_shape().to_vec();
        out.push(g);
    }
    Ok((out, shape))
}

/// RGB-frequency attention: concatenated branch features go through conv
/// modules and a sigmoid; the result is split into one attention map per
/// branch and multiplied into that branch.
#[derive(Debug, Clone)]
pub struct RfamBlock {
    net: NetworkGraph,
    channels: usize,
    residual: bool,
    cache: Option<RfamCache>,
}

#[derive(Debug, Clone)]
struct RfamCache {
    f_rgb: Tensor,
    f_fre: Tensor,
    a_rgb: Tensor,
    a_fre: Tensor,
}

impl RfamBlock {
    pub fn new(feature_shape: &[usize], modules: usize, residual: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = feature_shape[0];
        let mut layers = Vec::new();
        for _ in 0..modules {
            layers.extend(conv_bn_relu(2 * c, 2 * c, 3, 1, rng));
        }
        layers.push(Layer::sigmoid());
        let shape = [2 * c, feature_shape[1], feature_shape[2]];
        Ok(Self { net: NetworkGraph::new(&shape, layers)?, channels: c, residual, cache: None })
    }

    pub fn net(&self) -> &NetworkGraph {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NetworkGraph {
        &mut self.net
    }

    fn check(&self, f_rgb: &Tensor, f_fre: &Tensor) -> Result<()> {
        if f_rgb.shape() != f_fre.shape() || f_rgb.rank() != 4 || f_rgb.dim(1) != self.channels {
            return Err(Error::Dimension(format!(
                "attention block over {} channels got {:?} and {:?}",
                self.channels,
                f_rgb.shape(),
                f_fre.shape()
            )));
        }
        Ok(())
    }

    fn gate(&self, f: &Tensor, a: &Tensor) -> Result<Tensor> {
        if self.residual {
            f.add(&f.mul(a)?)
        } else {
            f.mul(a)
        }
    }

    /// Attention maps `(A_rgb, A_fre)` for a pair of features (inference).
    pub fn attention(&self, f_rgb: &Tensor, f_fre: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f_rgb, f_fre)?;
        let att = self.net.infer(&Tensor::concat_channels(f_rgb, f_fre)?)?;
        att.split_channels(self.channels)
    }

    pub fn forward_train(&mut self, f_rgb: &Tensor, f_fre: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f_rgb, f_fre)?;
        let att = self.net.forward_train(&Tensor::concat_channels(f_rgb, f_fre)?)?;
        let (a_rgb, a_fre) = att.split_channels(self.channels)?;
        let out = (self.gate(f_rgb, &a_rgb)?, self.gate(f_fre, &a_fre)?);
        self.cache = Some(RfamCache { f_rgb: f_rgb.clone(), f_fre: f_fre.clone(), a_rgb, a_fre });
        Ok(out)
    }

    pub fn infer(&self, f_rgb: &Tensor, f_fre: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a_rgb, a_fre) = self.attention(f_rgb, f_fre)?;
        Ok((self.gate(f_rgb, &a_rgb)?, self.gate(f_fre, &a_fre)?))
    }

    /// Gradients with respect to both input features, plus parameter grads.
    pub fn backward(&self, g_rgb: &Tensor, g_fre: &Tensor) -> Result<(Tensor, Tensor, Grads)> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("attention backward without a cached forward".into()))?;
        let da_rgb = g_rgb.mul(&c.f_rgb)?;
        let da_fre = g_fre.mul(&c.f_fre)?;
        let (dcat, grads) = self.net.backward(&Tensor::concat_channels(&da_rgb, &da_fre)?)?;
        let (dc_rgb, dc_fre) = dcat.split_channels(self.channels)?;
        let mut df_rgb = g_rgb.mul(&c.a_rgb)?.add(&dc_rgb)?;
        let mut df_fre = g_fre.mul(&c.a_fre)?.add(&dc_fre)?;
        if self.residual {
            df_rgb.axpy(1.0, g_rgb)?;
            df_fre.axpy(1.0, g_fre)?;
        }
        Ok((df_rgb, df_fre, grads))
    }
}

/// RGB projector: three conv-BN-ReLU blocks.
pub fn rgb_projector(in_shape: &[usize], out_channels: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let c = in_shape[0];
    let mut layers = conv_bn_relu(c, out_channels, 3, 1, rng);
    layers.extend(conv_bn_relu(out_channels, out_channels, 3, 1, rng));
    layers.extend(conv_bn_relu(out_channels, out_channels, 3, 1, rng));
    NetworkGraph::new(in_shape, layers)
}

/// Frequency projector: five convolutions, BN and ReLU after the second
/// and the fourth.
pub fn fre_projector(in_shape: &[usize], out_channels: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let c = in_shape[0];
    let o = out_channels;
    let layers = vec![
        Layer::conv(c, o, 3, 1, 1, rng),
        Layer::conv(o, o, 3, 1, 1, rng),
        Layer::batch_norm(o),
        Layer::relu(),
        Layer::conv(o, o, 3, 1, 1, rng),
        Layer::conv(o, o, 3, 1, 1, rng),
        Layer::batch_norm(o),
        Layer::relu(),
        Layer::conv(o, o, 3, 1, 1, rng),
    ];
    NetworkGraph::new(in_shape, layers)
}

#[derive(Debug, Clone)]
pub struct TeacherNet {
    pub config: TeacherConfig,
    pub rgb_branch: Vec<NetworkGraph>,
    pub fre_branch: Vec<NetworkGraph>,
    pub rfam_blocks: Vec<RfamBlock>,
    pub fusion_head: NetworkGraph,
    pub proj_rgb: NetworkGraph,
    pub proj_fre: NetworkGraph,
    feature_shape: Vec<usize>,
}

/// Teacher outputs for one batch.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub logits: Tensor,
    pub feat_rgb: Tensor,
    pub feat_fre: Tensor,
}

impl TeacherNet {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input = [config.in_channels, config.image_size, config.image_size];
        let (rgb_branch, feature_shape) = build_stages(input, &config.stages, &mut rng)?;
        let (fre_branch, _) = build_stages(input, &config.stages, &mut rng)?;
        let mut rfam_blocks = Vec::with_capacity(config.rfam_blocks);
        for g in rgb_branch.iter().take(config.rfam_blocks) {
            rfam_blocks.push(RfamBlock::new(g.output_shape(), config.rfam_modules, config.rfam_residual, &mut rng)?);
        }
        let c = feature_shape[0];
        let fusion_head = NetworkGraph::new(
            &[2 * c, feature_shape[1], feature_shape[2]],
            vec![Layer::global_avg_pool(), Layer::linear(2 * c, 2, &mut rng)],
        )?;
        let proj_rgb = rgb_projector(&feature_shape, config.proj_channels, &mut rng)?;
        let proj_fre = fre_projector(&feature_shape, config.proj_channels, &mut rng)?;
        if proj_rgb.output_shape() != proj_fre.output_shape() {
            return Err(Error::Config(format!(
                "teacher projector outputs differ: {:?} vs {:?}",
                proj_rgb.output_shape(),
                proj_fre.output_shape()
            )));
        }
        Ok(Self { config, rgb_branch, fre_branch, rfam_blocks, fusion_head, proj_rgb, proj_fre, feature_shape })
    }

    /// Per-sample shape of each branch's final feature.
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    /// Per-sample shape of the projected (distillation) features.
    pub fn projection_shape(&self) -> &[usize] {
        self.proj_rgb.output_shape()
    }

    fn check_inputs(&self, x: &Tensor, x_f: &Tensor) -> Result<()> {
        if x.shape() != x_f.shape() {
            return Err(Error::Dimension(format!(
                "teacher inputs differ in shape: {:?} vs {:?}",
                x.shape(),
                x_f.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass (caches activations, updates BN stats).
    pub fn forward_train(&mut self, x: &Tensor, x_f: &Tensor) -> Result<TeacherOutput> {
        self.check_inputs(x, x_f)?;
        let (mut r, mut f) = (x.clone(), x_f.clone());
        for i in 0..self.rgb_branch.len() {
            r = self.rgb_branch[i].forward_train(&r)?;
            f = self.fre_branch[i].forward_train(&f)?;
            if let Some(block) = self.rfam_blocks.get_mut(i) {
                (r, f) = block.forward_train(&r, &f)?;
            }
        }
        let logits = self.fusion_head.forward_train(&Tensor::concat_channels(&r, &f)?)?;
        Ok(TeacherOutput { logits, feat_rgb: r, feat_fre: f })
    }

    pub fn infer(&self, x: &Tensor, x_f: &Tensor) -> Result<TeacherOutput> {
        let (r, f) = self.branch_features(x, x_f)?;
        let logits = self.fusion_head.infer(&Tensor::concat_channels(&r, &f)?)?;
        Ok(TeacherOutput { logits, feat_rgb: r, feat_fre: f })
    }

    /// Final branch features in inference mode (frozen branches).
    pub fn branch_features(&self, x: &Tensor, x_f: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_inputs(x, x_f)?;
        let (mut r, mut f) = (x.clone(), x_f.clone());
        for i in 0..self.rgb_branch.len() {
            r = self.rgb_branch[i].infer(&r)?;
            f = self.fre_branch[i].infer(&f)?;
            if let Some(block) = self.rfam_blocks.get(i) {
                (r, f) = block.infer(&r, &f)?;
            }
        }
        Ok((r, f))
    }

    /// Parameter gradients of the classification path for `d_logits`.
    pub fn backward(&self, d_logits: &Tensor) -> Result<Grads> {
        let (dcat, head) = self.fusion_head.backward(d_logits)?;
        let mut grads = prefixed("head", head);
        let (mut dr, mut df) = dcat.split_channels(self.feature_shape[0])?;
        for i in (0..self.rgb_branch.len()).rev() {
            if let Some(block) = self.rfam_blocks.get(i) {
                let (a, b, g) = block.backward(&dr, &df)?;
                grads.extend(prefixed(&format!("rfam.{i}"), g));
                dr = a;
                df = b;
            }
            let (a, g) = self.rgb_branch[i].backward(&dr)?;
            grads.extend(prefixed(&format!("rgb.{i}"), g));
            dr = a;
            let (b, g) = self.fre_branch[i].backward(&df)?;
            grads.extend(prefixed(&format!("fre.{i}"), g));
            df = b;
        }
        Ok(grads)
    }

    /// Branches, attention blocks and fusion head (everything but the
    /// projectors), with the names used by [`TeacherNet::backward`].
    pub fn classifier_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, g) in self.rgb_branch.iter_mut().enumerate() {
            out.extend(g.params_mut().into_iter().map(|(k, v)| (format!("rgb.{i}.{k}"), v)));
        }
        for (i, g) in self.fre_branch.iter_mut().enumerate() {
            out.extend(g.params_mut().into_iter().map(|(k, v)| (format!("fre.{i}.{k}"), v)));
        }
        for (i, b) in self.rfam_blocks.iter_mut().enumerate() {
            out.extend(b.net.params_mut().into_iter().map(|(k, v)| (format!("rfam.{i}.{k}"), v)));
        }
        out.extend(self.fusion_head.params_mut().into_iter().map(|(k, v)| (format!("head.{k}"), v)));
        out
    }

    /// `(G_Tr(feat_rgb), G_Tf(feat_fre))` in training mode.
    pub fn project_train(&mut self, feat_rgb: Option<&Tensor>, feat_fre: Option<&Tensor>) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let r = feat_rgb.map(|f| self.proj_rgb.forward_train(f)).transpose()?;
        let f = feat_fre.map(|f| self.proj_fre.forward_train(f)).transpose()?;
        Ok((r, f))
    }

    /// `(G_Tr(feat_rgb), G_Tf(feat_fre))` in inference mode.
    pub fn project(&self, feat_rgb: &Tensor, feat_fre: &Tensor) -> Result<(Tensor, Tensor)> {
        let r = self.proj_rgb.infer(feat_rgb)?;
        let f = self.proj_fre.infer(feat_fre)?;
        if r.shape() != f.shape() {
            return Err(Error::Dimension(format!(
                "projected features differ: {:?} vs {:?}",
                r.shape(),
                f.shape()
            )));
        }
        Ok((r, f))
    }

    /// Checksum-friendly copy of all branch, attention and head tensors.
    pub fn frozen_state(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for g in self.rgb_branch.iter().chain(&self.fre_branch) {
            out.extend(g.state().into_values());
        }
        for b in &self.rfam_blocks {
            out.extend(b.net.state().into_values());
        }
        out.extend(self.fusion_head.state().into_values());
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut ck = Checkpoint::new(meta);
        for (i, g) in self.rgb_branch.iter().enumerate() {
            ck.extend_prefixed(&format!("rgb.{i}."), g.state());
        }
        for (i, g) in self.fre_branch.iter().enumerate() {
            ck.extend_prefixed(&format!("fre.{i}."), g.state());
        }
        for (i, b) in self.rfam_blocks.iter().enumerate() {
            ck.extend_prefixed(&format!("rfam.{i}."), b.net.state());
        }
        ck.extend_prefixed("head.", self.fusion_head.state());
        ck.extend_prefixed("proj_rgb.", self.proj_rgb.state());
        ck.extend_prefixed("proj_fre.", self.proj_fre.state());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TeacherConfig =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Format(format!("teacher metadata: {e}")))?;
        let mut t = Self::new(config)?;
        for (i, g) in t.rgb_branch.iter_mut().enumerate() {
            g.load_state(&ck.tensors, &format!("rgb.{i}."))?;
        }
        for (i, g) in t.fre_branch.iter_mut().enumerate() {
            g.load_state(&ck.tensors, &format!("fre.{i}."))?;
        }
        for (i, b) in t.rfam_blocks.iter_mut().enumerate() {
            b.net.load_state(&ck.tensors, &format!("rfam.{i}."))?;
        }
        t.fusion_head.load_state(&ck.tensors, "head.")?;
        t.proj_rgb.load_state(&ck.tensors, "proj_rgb.")?;
        t.proj_fre.load_state(&ck.tensors, "proj_fre.")?;
        Ok(t)
    }

    /// Fake-class probabilities for `split`, in inference mode.
    pub fn evaluate(&self, data: &LabeledDataset, split: Split) -> Result<EvalMetrics> {
        let idx = data.indices(split);
        if idx.is_empty() {
            return Err(Error::Data(format!("{split:?} split is empty")));
        }
        let mut scores = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let (x, xf, _) = data.batch(chunk)?;
            let p = softmax(&self.infer(&x, &xf)?.logits)?;
            scores.extend(p.data().chunks(2).map(|r| r[1]));
        }
        let labels = idx.iter().map(|&i| data.labels()[i]).collect();
        EvalMetrics::compute(&ScoredPredictions::new(scores, labels)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepLrSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epochs: Vec<TeacherEpoch>,
    /// Mean cross-entropy of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Supervised end-to-end training of branches, attention and fusion head.
/// Projectors are left untouched; they are trained during distillation.
pub fn train_teacher(t: &mut TeacherNet, data: &LabeledDataset, cfg: &TeacherTrainConfig) -> Result<TeacherReport> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("teacher training needs a nonempty train split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam = Adam::new(cfg.lr.lr(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TeacherReport { epochs: Vec::new(), step_losses: Vec::new() };
    let has_val = !data.indices(Split::Val).is_empty();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr.lr(epoch);
        let order = crate::datagen::shuffled(&train, &mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, xf, y) = data.batch(chunk)?;
            let out = t.forward_train(&x, &xf)?;
            let (loss, dlogits) = cross_entropy(&out.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("teacher loss diverged at epoch {epoch}")));
            }
            report.step_losses.push(loss);
            loss_sum += loss * chunk.len() as f64;
            hits += out
                .logits
                .data()
                .chunks(2)
                .zip(&y)
                .filter(|(l, &lab)| usize::from(l[1] >= l[0]) == lab)
                .count();
            let grads = t.backward(&dlogits)?;
            adam.step(t.classifier_params_mut(), &grads)?;
        }
        let (val_acc, val_auc) = if has_val {
            let m = t.evaluate(data, Split::Val)?;
            (m.accuracy, m.auc)
        } else {
            (f64::NAN, f64::NAN)
        };
        log::info!("teacher epoch {epoch}: loss {:.4} val_acc {val_acc:.4}", loss_sum / train.len() as f64);
        report.epochs.push(TeacherEpoch {
            epoch,
            lr: adam.lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_acc,
            val_auc,
        });
    }
    Ok(report)
}
