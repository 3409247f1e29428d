//! Backbone, optimisation loop, metrics and the head comparison runner.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::cylinder::{view_specific_features_batch, CylinderGeometry, CylindricalKernel, PadMode, ViewFeatures};
use crate::error::{Error, Result};
use crate::head::{
    angular_residual_value, azimuth_bin, baseline_features, baseline_maps, ccn_scores, predict, scores_from_maps,
    total_loss, BBox, BaselineParams, BoundBaseline, BoundHead, HeadParams, LossConfig, ViewScores,
};
use crate::synthcam::{crop_frame, Dataset, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadMode {
    #[default]
    Ccn,
    Baseline,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Ccn => "ccn",
            HeadMode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccn" => Ok(HeadMode::Ccn),
            "baseline" => Ok(HeadMode::Baseline),
            other => Err(Error::Config(format!("unknown head mode '{other}' (expected ccn or baseline)"))),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape-determining hyperparameters; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub k: usize,
    pub n_views: usize,
    pub n_classes: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub head_mode: HeadMode,
    pub pad_mode: PadMode,
}

impl Architecture {
    pub fn cylinder(&self) -> Result<CylinderGeometry> {
        CylinderGeometry::new(self.k, self.n_views, self.ch_in, self.ch_out, self.pad_mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.cylinder()?;
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial size after the four backbone blocks.
pub fn backbone_output_size(image_size: usize) -> usize {
    let conv = |g: usize, stride: usize, pad: usize| (g + 2 * pad).saturating_sub(3) / stride + 1;
    conv(conv(conv(conv(image_size, 1, 1), 2, 1), 1, 1), 2, 0)
}

/// (stride, padding) of each 3×3 backbone block.
const BLOCKS: [(usize, usize); 4] = [(1, 1), (2, 1), (1, 1), (2, 0)];

pub const DEFAULT_BACKBONE_WIDTHS: [usize; 3] = [16, 32, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Architecture plus all trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: Vec<NamedTensor>,
}

impl Model {
    /// Seeded He initialisation. The backbone is drawn first, so two models
    /// that differ only in head mode share their backbone.
    pub fn init(arch: Architecture, widths: [usize; 3], seed: u64) -> Result<Model> {
        arch.validate()?;
        if widths.contains(&0) {
            return Err(Error::Config(format!("backbone widths must be positive, got {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [1, widths[0], widths[1], widths[2], arch.ch_in];
        let mut params = Vec::new();
        for i in 0..4 {
            let std = (2.0 / (9 * chans[i]) as f64).sqrt();
            params.push(named(&format!("backbone.conv{}.weight", i + 1), Tensor::randn(&[3, 3, chans[i], chans[i + 1]], std, &mut rng)));
            params.push(named(&format!("backbone.conv{}.bias", i + 1), Tensor::zeros(&[chans[i + 1]])));
        }
        match arch.head_mode {
            HeadMode::Ccn => {
                let cyl = arch.cylinder()?.init(&mut rng);
                let head = HeadParams::init(arch.n_classes, arch.n_views, arch.ch_out, &mut rng);
                params.extend([
                    named("cylinder.side", cyl.side),
                    named("cylinder.front", cyl.front),
                    named("cylinder.rear", cyl.rear),
                    named("head.w_cls", head.w_cls),
                    named("head.b_cls", head.b_cls),
                    named("head.w_reg", head.w_reg),
                    named("head.b_reg", head.b_reg),
                ]);
            }
            HeadMode::Baseline => {
                let b = BaselineParams::init(arch.k, arch.n_views, arch.n_classes, arch.ch_in, arch.ch_out, &mut rng);
                params.extend([
                    named("baseline.w_feat", b.w_feat),
                    named("baseline.w_cls", b.w_cls),
                    named("baseline.b_cls", b.b_cls),
                    named("baseline.w_reg", b.w_reg),
                    named("baseline.b_reg", b.b_reg),
                ]);
            }
        }
        Ok(Model { arch, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against `arch`. The backbone widths are read off the tensors.
    pub fn from_named(arch: Architecture, params: Vec<NamedTensor>) -> Result<Model> {
        arch.validate()?;
        let width = |i: usize| -> Result<usize> {
            let name = format!("backbone.conv{i}.weight");
            params
                .iter()
                .find(|p| p.name == name)
                .and_then(|p| p.tensor.shape().get(3).copied())
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks a rank-4 '{name}'")))
        };
        let widths = [width(1)?, width(2)?, width(3)?];
        let reference = Model::init(arch, widths, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors for a {} model, found {}",
                reference.params.len(),
                arch.head_mode,
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(&params) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Contract(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Puts every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Result<BoundModel<'g>> {
        let vars: Vec<Var<'g>> = self
            .params
            .iter()
            .map(|p| if trainable { graph.param(p.tensor.clone()) } else { graph.constant(p.tensor.clone()) })
            .collect();
        BoundModel::from_vars(self.arch, vars)
    }
}

fn named(name: &str, tensor: Tensor) -> NamedTensor {
    NamedTensor { name: name.to_string(), tensor }
}

enum BoundHeadKind<'g> {
    Ccn { kernel: CylindricalKernel<'g>, head: BoundHead<'g> },
    Baseline(BoundBaseline<'g>),
}

/// A [`Model`] placed on a graph.
pub struct BoundModel<'g> {
    pub arch: Architecture,
    /// Same order as [`Model::params`].
    pub vars: Vec<Var<'g>>,
    head: BoundHeadKind<'g>,
}

impl<'g> BoundModel<'g> {
    /// Wraps vars laid out as in [`Model::params`].
    pub fn from_vars(arch: Architecture, vars: Vec<Var<'g>>) -> Result<Self> {
        let expected = match arch.head_mode {
            HeadMode::Ccn => 15,
            HeadMode::Baseline => 13,
        };
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "a {} model has {expected} tensors, got {}",
                arch.head_mode,
                vars.len()
            )));
        }
        let head = match arch.head_mode {
            HeadMode::Ccn => BoundHeadKind::Ccn {
                kernel: CylindricalKernel::new(arch.cylinder()?, vars[8], vars[9], vars[10])?,
                head: BoundHead {
                    n_classes: arch.n_classes,
                    n_views: arch.n_views,
                    w_cls: vars[11],
                    b_cls: vars[12],
                    w_reg: vars[13],
                    b_reg: vars[14],
                },
            },
            HeadMode::Baseline => BoundHeadKind::Baseline(BoundBaseline {
                n_classes: arch.n_classes,
                n_views: arch.n_views,
                w_feat: vars[8],
                w_cls: vars[9],
                b_cls: vars[10],
                w_reg: vars[11],
                b_reg: vars[12],
            }),
        };
        Ok(BoundModel { arch, vars, head })
    }

    /// ROI features `[B, k, k, ch_in]` for a batch `[B, G, G, 1]`.
    pub fn backbone(&self, x: Var<'g>) -> Result<Var<'g>> {
        let mut h = x;
        for (i, &(stride, pad)) in BLOCKS.iter().enumerate() {
            h = h.conv2d(self.vars[2 * i], stride, pad)?.add_bias(self.vars[2 * i + 1])?.relu();
        }
        let s = h.shape();
        if s[1] != self.arch.k || s[2] != self.arch.k {
            return Err(Error::dim(format!(
                "backbone produces {}x{} maps but the head expects {}x{}",
                s[1], s[2], self.arch.k, self.arch.k
            )));
        }
        Ok(h)
    }

    /// Head outputs for a batch of ROI features `[B, k, k, ch_in]`.
    pub fn head(&self, roi: Var<'g>) -> Result<Vec<ViewScores<'g>>> {
        let batch = roi.shape()[0];
        match &self.head {
            BoundHeadKind::Ccn { kernel, head } => {
                let feats = view_specific_features_batch(roi, kernel)?;
                (0..batch)
                    .map(|b| ccn_scores(&ViewFeatures::new(feats.select(1, b)?)?, head))
                    .collect()
            }
            BoundHeadKind::Baseline(params) => {
                let feats = baseline_features(roi, params)?;
                (0..batch)
                    .map(|b| {
                        let (s, t) = baseline_maps(feats.select(0, b)?, params)?;
                        scores_from_maps(s, t)
                    })
                    .collect()
            }
        }
    }

    pub fn forward(&self, images: Var<'g>) -> Result<Vec<ViewScores<'g>>> {
        self.head(self.backbone(images)?)
    }
}

/// Stacks sample images into a `[B, G, G, 1]` tensor.
pub fn image_batch(samples: &[&Sample], image_size: usize) -> Result<Tensor> {
    let px = image_size * image_size;
    let mut data = Vec::with_capacity(samples.len() * px);
    for s in samples {
        if s.image.len() != px {
            return Err(Error::dim(format!("image has {} pixels, expected {px}", s.image.len())));
        }
        data.extend(s.image.iter().map(|&p| f64::from(p)));
    }
    Tensor::new(vec![samples.len(), image_size, image_size, 1], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub backbone_widths: [usize; 3],
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch indices (from 0) at whose start the rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_view: f64,
    pub seed: u64,
    pub train_data: String,
    pub val_data: String,
    pub checkpoint: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture {
                k: 7,
                n_views: 24,
                n_classes: 3,
                ch_in: 32,
                ch_out: 64,
                head_mode: HeadMode::Ccn,
                pad_mode: PadMode::Wrap,
            },
            backbone_widths: DEFAULT_BACKBONE_WIDTHS,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            lr_decay_epochs: vec![15],
            lr_decay_factor: 0.1,
            w_cls: 1.0,
            w_reg: 1.0,
            w_view: 1.0,
            seed: 0,
            train_data: "data/train.ccns".into(),
            val_data: "data/val.ccns".into(),
            checkpoint: "model.ccnw".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        for (name, w) in [("w_cls", self.w_cls), ("w_reg", self.w_reg), ("w_view", self.w_view)] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be non-negative, got {w}"));
            }
        }
        if self.backbone_widths.contains(&0) {
            return fail(format!("backbone widths must be positive, got {:?}", self.backbone_widths));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { w_cls: self.w_cls, w_reg: self.w_reg, w_view: self.w_view, ..LossConfig::for_views(self.arch.n_views) }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`, for every tensor.
///
/// Nothing is modified unless every gradient is finite and shape-matched.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != velocity[i].shape() {
            return Err(Error::dim(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for parameter {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Per-epoch training record. Loss terms are unweighted sample means.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_view: f64,
    /// Annotated samples whose angle term was dropped for a vanished resultant.
    pub view_skipped: usize,
    pub val_top1: f64,
    pub val_mederr_deg: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.3e} loss={:.6} l_cls={:.6} l_reg={:.6} l_view={:.6} view_skipped={} val_top1={:.4} val_mederr={:.3}",
            self.epoch,
            self.lr,
            self.loss,
            self.l_cls,
            self.l_reg,
            self.l_view,
            self.view_skipped,
            self.val_top1,
            self.val_mederr_deg
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Training stopped early. `last_good` holds the parameters before the
/// failing update, when a model existed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Model>>,
    pub log: Vec<EpochRecord>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} complete epochs)", self.error, self.log.len())
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, last_good: None, log: Vec::new() }
    }
}

fn check_compatible(arch: &Architecture, data: &Dataset, what: &str) -> Result<()> {
    if data.n_classes != arch.n_classes || data.n_views != arch.n_views {
        return Err(Error::Config(format!(
            "{what} has {} classes and {} views, the model {} and {}",
            data.n_classes, data.n_views, arch.n_classes, arch.n_views
        )));
    }
    let out = backbone_output_size(data.image_size);
    if out != arch.k {
        return Err(Error::Config(format!(
            "{what} images are {0}x{0}, which the backbone maps to {out}x{out}, not k = {1}",
            data.image_size, arch.k
        )));
    }
    Ok(())
}

/// Trains a freshly initialised model. `val` is evaluated after every
/// epoch; `on_epoch` sees each record as soon as it exists.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    let model = Model::init(config.arch, config.backbone_widths, config.seed)?;
    train_from(config, model, train_set, val, on_epoch)
}

/// Like [`train`], starting from the given parameters.
pub fn train_from(
    config: &TrainConfig,
    mut model: Model,
    train_set: &Dataset,
    val: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    if model.arch != config.arch {
        return Err(Error::Config("model architecture differs from the configuration".into()).into());
    }
    check_compatible(&config.arch, train_set, "training set")?;
    check_compatible(&config.arch, val, "validation set")?;
    train_set.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()).into());
    }
    let loss_cfg = config.loss_config();
    let proposal = crop_frame(train_set.image_size);
    let mut velocity: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let step = (|| -> Result<(Vec<Tensor>, [f64; 5])> {
                let g = Graph::new();
                let bound = model.bind(&g, true)?;
                let x = g.constant(image_batch(&batch, train_set.image_size)?);
                let scores = bound.forward(x)?;
                let mut total: Option<Var<'_>> = None;
                let mut terms = [0.0; 5];
                for (s, sample) in scores.iter().zip(&batch) {
                    let l = total_loss(s, &sample.target(), &proposal, &loss_cfg)?;
                    terms[0] += l.total.item();
                    terms[1] += l.cls;
                    terms[2] += l.reg;
                    terms[3] += l.view;
                    terms[4] += f64::from(u8::from(l.view_skipped));
                    total = Some(match total {
                        Some(t) => t.add(l.total)?,
                        None => l.total,
                    });
                }
                let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
                if !loss.item().is_finite() {
                    return Err(Error::Divergence(format!("loss became {} in epoch {epoch}", loss.item())));
                }
                let grads = g.backward(loss)?;
                let grads = bound
                    .vars
                    .iter()
                    .zip(&model.params)
                    .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
                    .collect();
                Ok((grads, terms))
            })();
            let fail = |error: Error, model: &Model, log: &Vec<EpochRecord>| TrainFailure {
                error,
                last_good: Some(Box::new(model.clone())),
                log: log.clone(),
            };
            let (grads, terms) = match step {
                Ok(v) => v,
                Err(e) => return Err(fail(e, &model, &log)),
            };
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            let mut tensors: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
            if let Err(e) = sgd_step(&mut tensors, &grads, &mut velocity, lr, config.momentum, config.weight_decay) {
                return Err(fail(e, &model, &log));
            }
            for (p, t) in model.params.iter_mut().zip(tensors) {
                p.tensor = t;
            }
        }
        let n = train_set.len() as f64;
        let report = evaluate(&model, val).map_err(|e| TrainFailure {
            error: e,
            last_good: Some(Box::new(model.clone())),
            log: log.clone(),
        })?;
        let record = EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            l_cls: sums[1] / n,
            l_reg: sums[2] / n,
            l_view: sums[3] / n,
            view_skipped: sums[4] as usize,
            val_top1: report.top1,
            val_mederr_deg: report.mederr_deg,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// Prediction for one foreground sample, paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub label: usize,
    /// Foreground classes by decreasing score.
    pub ranking: Vec<usize>,
    pub angle: f64,
    pub angle_degenerate: bool,
    pub azimuth: Option<f64>,
    pub pred_box: BBox,
    pub true_box: BBox,
}

const EVAL_BATCH: usize = 32;

/// Runs the model over the foreground samples of `data`.
pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Vec<EvalRecord>> {
    check_compatible(&model.arch, data, "dataset")?;
    let proposal = crop_frame(data.image_size);
    let fg: Vec<&Sample> = data.samples.iter().filter(|s| s.label > 0).collect();
    let mut out = Vec::with_capacity(fg.len());
    for chunk in fg.chunks(EVAL_BATCH) {
        let g = Graph::new();
        let bound = model.bind(&g, false)?;
        let scores = bound.forward(g.constant(image_batch(chunk, data.image_size)?))?;
        for (s, sample) in scores.iter().zip(chunk) {
            let p = predict(s, &proposal)?;
            out.push(EvalRecord {
                label: usize::from(sample.label),
                ranking: p.ranking,
                angle: p.angle,
                angle_degenerate: p.angle_degenerate,
                azimuth: sample.azimuth_rad(),
                pred_box: p.bbox,
                true_box: sample.bbox(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub n_samples: usize,
    pub top1: f64,
    pub acc_pi_6: Option<f64>,
    pub mederr_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_samples: usize,
    /// Samples whose azimuth is annotated; the angular metrics use these.
    pub n_with_azimuth: usize,
    pub top1: f64,
    pub top3: f64,
    /// Share of angular errors strictly below 30°.
    pub acc_pi_6: f64,
    /// Median angular error over all annotated samples, degrees.
    pub mederr_deg: f64,
    /// Median angular error over correctly classified samples only.
    pub mederr_correct_deg: Option<f64>,
    pub aos: f64,
    pub avp_joint: f64,
    pub per_class: Vec<ClassReport>,
}

impl MetricReport {
    /// `key=value` lines for scripts.
    pub fn porcelain(&self) -> String {
        let mut s = format!(
            "n_samples={}\nn_with_azimuth={}\ntop1={}\ntop3={}\nacc_pi_6={}\nmederr_deg={}\nmederr_correct_deg={}\naos={}\navp_joint={}\n",
            self.n_samples,
            self.n_with_azimuth,
            self.top1,
            self.top3,
            self.acc_pi_6,
            self.mederr_deg,
            opt(self.mederr_correct_deg),
            self.aos,
            self.avp_joint
        );
        for c in &self.per_class {
            s += &format!(
                "class{0}.n_samples={1}\nclass{0}.top1={2}\nclass{0}.acc_pi_6={3}\nclass{0}.mederr_deg={4}\n",
                c.class,
                c.n_samples,
                c.top1,
                opt(c.acc_pi_6),
                opt(c.mederr_deg)
            );
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("samples", self.n_samples.to_string()),
            ("with azimuth", self.n_with_azimuth.to_string()),
            ("top-1", format!("{:.4}", self.top1)),
            ("top-3", format!("{:.4}", self.top3)),
            ("Acc_pi/6", format!("{:.4}", self.acc_pi_6)),
            ("MedErr (deg)", format!("{:.3}", self.mederr_deg)),
            ("MedErr correct (deg)", self.mederr_correct_deg.map_or("-".into(), |v| format!("{v:.3}"))),
            ("AOS", format!("{:.4}", self.aos)),
            ("AVP joint", format!("{:.4}", self.avp_joint)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<22}{v:>12}")?;
        }
        writeln!(f, "{:<8}{:>8}{:>10}{:>12}{:>14}", "class", "n", "top-1", "Acc_pi/6", "MedErr (deg)")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<8}{:>8}{:>10.4}{:>12}{:>14}",
                c.class,
                c.n_samples,
                c.top1,
                c.acc_pi_6.map_or("-".into(), |v| format!("{v:.4}")),
                c.mederr_deg.map_or("-".into(), |v| format!("{v:.3}"))
            )?;
        }
        Ok(())
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Absolute wrapped angular difference, degrees in [0, 180].
pub fn angular_error_deg(angle: f64, truth: f64) -> f64 {
    (angular_residual_value(angle, truth).abs() * 180.0 / PI).min(180.0)
}

const ACC_THRESHOLD_DEG: f64 = 30.0;
const AVP_IOU: f64 = 0.5;

/// The metric suite over a set of predictions.
pub fn compute_metrics(records: &[EvalRecord], n_classes: usize, n_views: usize) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Evaluation("no foreground samples to evaluate".into()));
    }
    let n = records.len() as f64;
    let correct = |r: &EvalRecord| r.ranking.first() == Some(&r.label);
    let top1 = records.iter().filter(|r| correct(r)).count() as f64 / n;
    let top3 = records.iter().filter(|r| r.ranking.iter().take(3).any(|&c| c == r.label)).count() as f64 / n;

    let errors = |pick: &dyn Fn(&EvalRecord) -> bool| -> Vec<f64> {
        records
            .iter()
            .filter(|r| pick(r))
            .filter_map(|r| r.azimuth.map(|a| angular_error_deg(r.angle, a)))
            .collect()
    };
    let all = errors(&|_| true);
    if all.is_empty() {
        return Err(Error::Evaluation("no sample carries an azimuth annotation".into()));
    }
    let acc = |e: &[f64]| e.iter().filter(|&&x| x < ACC_THRESHOLD_DEG).count() as f64 / e.len() as f64;

    let mut aos_sum = 0.0;
    let mut aos_n = 0usize;
    let mut avp = 0usize;
    for r in records.iter().filter(|r| correct(r)) {
        if let Some(a) = r.azimuth {
            aos_sum += (1.0 + angular_residual_value(r.angle, a).cos()) / 2.0;
            aos_n += 1;
            if r.pred_box.iou(&r.true_box) >= AVP_IOU && azimuth_bin(r.angle, n_views) == azimuth_bin(a, n_views) {
                avp += 1;
            }
        }
    }

    let per_class = (1..=n_classes)
        .filter_map(|c| {
            let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.label == c).collect();
            if rs.is_empty() {
                return None;
            }
            let e = errors(&|r| r.label == c);
            Some(ClassReport {
                class: c,
                n_samples: rs.len(),
                top1: rs.iter().filter(|r| correct(r)).count() as f64 / rs.len() as f64,
                acc_pi_6: (!e.is_empty()).then(|| acc(&e)),
                mederr_deg: median(&e),
            })
        })
        .collect();

    Ok(MetricReport {
        n_samples: records.len(),
        n_with_azimuth: all.len(),
        top1,
        top3,
        acc_pi_6: acc(&all),
        mederr_deg: median(&all).unwrap_or(0.0),
        mederr_correct_deg: median(&errors(&correct)),
        aos: if aos_n == 0 { 0.0 } else { aos_sum / aos_n as f64 },
        avp_joint: avp as f64 / all.len() as f64,
        per_class,
    })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricReport> {
    let records = predict_dataset(model, data)?;
    compute_metrics(&records, model.arch.n_classes, model.arch.n_views)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub report: MetricReport,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub ccn: RunResult,
    pub baseline: RunResult,
}

/// Medians over seeds of the headline metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedianSummary {
    pub top1: f64,
    pub acc_pi_6: f64,
    pub mederr_deg: f64,
    pub aos: f64,
}

impl MedianSummary {
    fn of(reports: &[&MetricReport]) -> Self {
        let m = |f: fn(&MetricReport) -> f64| median(&reports.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(0.0);
        Self { top1: m(|r| r.top1), acc_pi_6: m(|r| r.acc_pi_6), mederr_deg: m(|r| r.mederr_deg), aos: m(|r| r.aos) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<SeedComparison>,
    pub median_ccn: MedianSummary,
    pub median_baseline: MedianSummary,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:<10}{:>8}{:>10}{:>14}{:>8}", "seed", "head", "top-1", "Acc_pi/6", "MedErr (deg)", "AOS")?;
        let mut row = |seed: &str, head: &str, top1: f64, acc: f64, mederr: f64, aos: f64| {
            writeln!(f, "{seed:<10}{head:<10}{top1:>8.4}{acc:>10.4}{mederr:>14.3}{aos:>8.4}")
        };
        for r in &self.runs {
            for (name, res) in [("baseline", &r.baseline), ("ccn", &r.ccn)] {
                let m = &res.report;
                row(&r.seed.to_string(), name, m.top1, m.acc_pi_6, m.mederr_deg, m.aos)?;
            }
        }
        for (name, m) in [("baseline", &self.median_baseline), ("ccn", &self.median_ccn)] {
            row("median", name, m.top1, m.acc_pi_6, m.mederr_deg, m.aos)?;
        }
        Ok(())
    }
}

/// Trains both head modes on seeds `config.seed .. config.seed + n_seeds`
/// with everything else shared, and evaluates each on `val`.
pub fn compare_heads(
    config: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    n_seeds: usize,
    on_epoch: &mut dyn FnMut(u64, HeadMode, &EpochRecord),
) -> std::result::Result<Comparison, TrainFailure> {
    if n_seeds == 0 {
        return Err(Error::Config("compare_heads needs at least one seed".into()).into());
    }
    let mut runs = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds as u64 {
        let seed = config.seed + i;
        let mut run = |mode: HeadMode| -> std::result::Result<RunResult, TrainFailure> {
            let cfg = TrainConfig { seed, arch: Architecture { head_mode: mode, ..config.arch }, ..config.clone() };
            let outcome = train(&cfg, train_set, val, &mut |rec| on_epoch(seed, mode, rec))?;
            let report = evaluate(&outcome.model, val)?;
            Ok(RunResult { report, outcome })
        };
        let ccn = run(HeadMode::Ccn)?;
        let baseline = run(HeadMode::Baseline)?;
        runs.push(SeedComparison { seed, ccn, baseline });
    }
    let median_ccn = MedianSummary::of(&runs.iter().map(|r| &r.ccn.report).collect::<Vec<_>>());
    let median_baseline = MedianSummary::of(&runs.iter().map(|r| &r.baseline.report).collect::<Vec<_>>());
    Ok(Comparison { runs, median_ccn, median_baseline })
}
