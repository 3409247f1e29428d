//! Joint category / viewpoint prediction head.
//!
//! From per-view features `F_v` the head produces a score map
//! `S[v][c] = W_cls · F_v + b`, a per-class distribution over views
//! `P[·][c] = softmax_v S[·][c]`, category logits `S_c = Σ_v S[v][c] P[v][c]`
//! and per-class azimuths from the probability-weighted resultant of the bin
//! directions. Box deltas are predicted for every (view, class) pair.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{atan2, cross_entropy_logits, smooth_l1, tensordot, Graph, Var};
use crate::cylinder::{bin_angle, ViewFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in centre/size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Geometry(format!("{what} box has non-positive size {}x{}", self.w, self.h)));
        }
        Ok(())
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.cx + self.w / 2.0).min(other.cx + other.w / 2.0)
            - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0);
        let iy = (self.cy + self.h / 2.0).min(other.cy + other.h / 2.0)
            - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.w * self.h + other.w * other.h - inter)
    }
}

/// Regression target of `gt` relative to `proposal`.
pub fn encode_box(proposal: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    proposal.check("proposal")?;
    gt.check("ground-truth")?;
    Ok([
        (gt.cx - proposal.cx) / proposal.w,
        (gt.cy - proposal.cy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ])
}

pub fn decode_box(proposal: &BBox, delta: [f64; 4]) -> Result<BBox> {
    proposal.check("proposal")?;
    Ok(BBox {
        cx: proposal.cx + proposal.w * delta[0],
        cy: proposal.cy + proposal.h * delta[1],
        w: proposal.w * delta[2].exp(),
        h: proposal.h * delta[3].exp(),
    })
}

/// `θ − θ̂` wrapped to (−π, π].
pub fn angular_residual_value(theta: f64, theta_hat: f64) -> f64 {
    let d = theta - theta_hat;
    d.sin().atan2(d.cos())
}

/// Differentiable form of [`angular_residual_value`].
pub fn angular_residual<'g>(theta: Var<'g>, theta_hat: f64) -> Result<Var<'g>> {
    let d = theta.add_scalar(-theta_hat);
    atan2(d.sin(), d.cos())
}

/// Maps any angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    theta.sin().atan2(theta.cos())
}

/// Bin whose sector (centre ± half a bin) contains `theta`.
pub fn azimuth_bin(theta: f64, n_views: usize) -> usize {
    let width = std::f64::consts::TAU / n_views as f64;
    ((theta / width).round() as i64).rem_euclid(n_views as i64) as usize
}

pub fn bin_angles(n_views: usize) -> Vec<f64> {
    (0..n_views).map(|v| bin_angle(v, n_views)).collect()
}

/// Shared affine maps `f(·; W_cls)` and `f(·; W_reg)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub n_classes: usize,
    pub n_views: usize,
    /// `[ch, N_c + 1]`
    pub w_cls: Tensor,
    /// `[N_c + 1]`
    pub b_cls: Tensor,
    /// `[ch, N_c · 4]`
    pub w_reg: Tensor,
    /// `[N_c · 4]`
    pub b_reg: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(n_classes: usize, n_views: usize, ch: usize, rng: &mut R) -> Self {
        let std = (2.0 / ch as f64).sqrt();
        Self {
            n_classes,
            n_views,
            w_cls: Tensor::randn(&[ch, n_classes + 1], std, rng),
            b_cls: Tensor::zeros(&[n_classes + 1]),
            w_reg: Tensor::randn(&[ch, n_classes * 4], std * 0.1, rng),
            b_reg: Tensor::zeros(&[n_classes * 4]),
        }
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundHead<'g> {
        BoundHead {
            n_classes: self.n_classes,
            n_views: self.n_views,
            w_cls: graph.param(self.w_cls.clone()),
            b_cls: graph.param(self.b_cls.clone()),
            w_reg: graph.param(self.w_reg.clone()),
            b_reg: graph.param(self.b_reg.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead<'g> {
    pub n_classes: usize,
    pub n_views: usize,
    pub w_cls: Var<'g>,
    pub b_cls: Var<'g>,
    pub w_reg: Var<'g>,
    pub b_reg: Var<'g>,
}

/// All head outputs for one ROI.
#[derive(Clone, Copy, Debug)]
pub struct ViewScores<'g> {
    /// `[N_v, N_c + 1]` logits.
    pub s: Var<'g>,
    /// `[N_v, N_c + 1]`, each column sums to one.
    pub p: Var<'g>,
    /// `[N_c + 1]` category logits.
    pub s_c: Var<'g>,
    /// `[N_c + 1]` resultant components `Σ_v P sin i_v` and `Σ_v P cos i_v`.
    pub resultant_sin: Var<'g>,
    pub resultant_cos: Var<'g>,
    /// `[N_v, N_c, 4]` box deltas.
    pub t: Var<'g>,
}

impl<'g> ViewScores<'g> {
    pub fn n_views(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.s.shape()[1] - 1
    }

    /// Azimuth `θ_c` of one class, in (−π, π].
    ///
    /// Only this class's resultant has to be non-degenerate.
    pub fn theta(&self, class: usize) -> Result<Var<'g>> {
        atan2(self.resultant_sin.select(0, class)?, self.resultant_cos.select(0, class)?)
    }

    /// Azimuths of every class (background included).
    pub fn thetas(&self) -> Result<Var<'g>> {
        atan2(self.resultant_sin, self.resultant_cos)
    }
}

pub fn score_map<'g>(features: &ViewFeatures<'g>, head: &BoundHead<'g>) -> Result<Var<'g>> {
    check_features(features, head, head.w_cls)?;
    tensordot(features.values, head.w_cls, &[(1, 0)])?.add_bias(head.b_cls)
}

pub fn viewpoint_distribution(s: Var<'_>) -> Result<Var<'_>> {
    s.softmax(0)
}

/// `S_c = Σ_v S[v][c] · P[v][c]`.
///
/// Evaluated as `m_c + Σ_v (S[v][c] − m_c) · P[v][c]` with `m_c` the column
/// maximum, which is the same function because each column of `P` sums to
/// one. This form is exact for constant columns and never exceeds the max.
pub fn category_scores<'g>(s: Var<'g>, p: Var<'g>) -> Result<Var<'g>> {
    let sv = s.value();
    let shape = sv.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("score map must be rank 2, got {shape:?}")));
    }
    let (nv, nc) = (shape[0], shape[1]);
    let mut col_max = vec![f64::NEG_INFINITY; nc];
    for row in sv.data().chunks_exact(nc) {
        for (m, &x) in col_max.iter_mut().zip(row) {
            *m = m.max(x);
        }
    }
    let g = s.graph();
    let shift = g.constant(Tensor::new(vec![nv, nc], col_max.repeat(nv))?);
    let base = g.constant(Tensor::from_vec(col_max));
    s.sub(shift)?.mul(p)?.sum_axis(0)?.add(base)
}

/// The `(Σ_v P sin i_v, Σ_v P cos i_v)` resultant, contracting axis 0 of `p`.
pub fn soft_argmax_resultant<'g>(p: Var<'g>, bin_angles: &[f64]) -> Result<(Var<'g>, Var<'g>)> {
    let n = p.shape().first().copied().unwrap_or(0);
    if n != bin_angles.len() {
        return Err(Error::dim(format!(
            "distribution has {n} bins but {} bin angles were given",
            bin_angles.len()
        )));
    }
    let g = p.graph();
    let sin = g.constant(Tensor::from_vec(bin_angles.iter().map(|a| a.sin()).collect()));
    let cos = g.constant(Tensor::from_vec(bin_angles.iter().map(|a| a.cos()).collect()));
    Ok((tensordot(p, sin, &[(0, 0)])?, tensordot(p, cos, &[(0, 0)])?))
}

/// `atan2(Σ_v P_v sin i_v, Σ_v P_v cos i_v)`, contracting axis 0 of `p`
/// (a `[N_v]` column or an `[N_v, C]` map).
pub fn sinusoidal_soft_argmax<'g>(p: Var<'g>, bin_angles: &[f64]) -> Result<Var<'g>> {
    let (y, x) = soft_argmax_resultant(p, bin_angles)?;
    atan2(y, x)
}

pub fn box_deltas<'g>(features: &ViewFeatures<'g>, head: &BoundHead<'g>) -> Result<Var<'g>> {
    check_features(features, head, head.w_reg)?;
    tensordot(features.values, head.w_reg, &[(1, 0)])?
        .add_bias(head.b_reg)?
        .reshape(&[head.n_views, head.n_classes, 4])
}

fn check_features(features: &ViewFeatures<'_>, head: &BoundHead<'_>, w: Var<'_>) -> Result<()> {
    let (nv, ch) = (features.n_views(), features.channels());
    if nv != head.n_views || ch != w.shape()[0] {
        return Err(Error::dim(format!(
            "features [{nv}, {ch}] do not fit a head for {} views and {} channels",
            head.n_views,
            w.shape()[0]
        )));
    }
    Ok(())
}

/// Completes [`ViewScores`] from a score map and box deltas. Used by both
/// the cylindrical head and the view-agnostic baseline.
pub fn scores_from_maps<'g>(s: Var<'g>, t: Var<'g>) -> Result<ViewScores<'g>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::dim(format!("score map must be [N_v, N_c + 1], got {shape:?}")));
    }
    let (n_views, n_classes) = (shape[0], shape[1] - 1);
    if t.shape() != [n_views, n_classes, 4] {
        return Err(Error::dim(format!(
            "box deltas {:?} do not match score map {shape:?}",
            t.shape()
        )));
    }
    let p = viewpoint_distribution(s)?;
    let s_c = category_scores(s, p)?;
    let (resultant_sin, resultant_cos) = soft_argmax_resultant(p, &bin_angles(n_views))?;
    Ok(ViewScores { s, p, s_c, resultant_sin, resultant_cos, t })
}

pub fn ccn_scores<'g>(features: &ViewFeatures<'g>, head: &BoundHead<'g>) -> Result<ViewScores<'g>> {
    scores_from_maps(score_map(features, head)?, box_deltas(features, head)?)
}

/// Supervision for one ROI; class 0 is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class_label: usize,
    pub box_target: Option<BBox>,
    /// Radians; `None` when the azimuth is unannotated.
    pub azimuth: Option<f64>,
}

impl Target {
    pub fn background() -> Self {
        Self { class_label: 0, box_target: None, azimuth: None }
    }

    pub fn object(class_label: usize, gt: BBox, azimuth: Option<f64>) -> Self {
        Self { class_label, box_target: Some(gt), azimuth }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_label == 0 && (self.box_target.is_some() || self.azimuth.is_some()) {
            return Err(Error::TargetConsistency("background target carries a box or azimuth".into()));
        }
        if self.class_label >= 1 && self.box_target.is_none() {
            return Err(Error::TargetConsistency(format!(
                "foreground class {} without a box target",
                self.class_label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_view: f64,
    pub box_beta: f64,
    pub angle_beta: f64,
}

impl LossConfig {
    /// Unit weights, `beta = 1` for boxes and half a bin width for angles.
    pub fn for_views(n_views: usize) -> Self {
        Self { w_cls: 1.0, w_reg: 1.0, w_view: 1.0, box_beta: 1.0, angle_beta: PI / n_views as f64 }
    }
}

/// Weighted total plus the unweighted term values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub cls: f64,
    pub reg: f64,
    pub view: f64,
    /// The angle term was dropped because the ground-truth class's
    /// resultant vanished.
    pub view_skipped: bool,
}

/// Multi-task loss: classification always, box regression and viewpoint
/// regression only for foreground, the latter only when annotated.
pub fn total_loss<'g>(
    scores: &ViewScores<'g>,
    target: &Target,
    proposal: &BBox,
    config: &LossConfig,
) -> Result<LossTerms<'g>> {
    target.validate()?;
    let n_classes = scores.n_classes();
    let n_views = scores.n_views();
    let label = target.class_label;
    if label > n_classes {
        return Err(Error::Index { index: label, extent: n_classes + 1 });
    }
    let l_cls = cross_entropy_logits(scores.s_c, label)?;
    let mut total = l_cls.scale(config.w_cls);
    let mut terms = (l_cls.item(), 0.0, 0.0);
    let mut view_skipped = false;

    if let Some(gt) = target.box_target {
        let view = match target.azimuth {
            Some(theta) => azimuth_bin(theta, n_views),
            None => argmax_view(scores, label),
        };
        let delta = scores.t.select(0, view)?.select(0, label - 1)?;
        let goal = delta.graph().constant(Tensor::from_vec(encode_box(proposal, &gt)?.to_vec()));
        let l_reg = smooth_l1(delta, goal, config.box_beta)?;
        terms.1 = l_reg.item();
        total = total.add(l_reg.scale(config.w_reg))?;

        if let Some(theta_hat) = target.azimuth {
            // a vanished resultant has no direction to regress; that sample
            // then trains like an unannotated one
            match scores.theta(label) {
                Ok(theta) => {
                    let residual = angular_residual(theta, theta_hat)?;
                    let zero = residual.graph().constant(Tensor::scalar(0.0));
                    let l_view = smooth_l1(residual, zero, config.angle_beta)?;
                    terms.2 = l_view.item();
                    total = total.add(l_view.scale(config.w_view))?;
                }
                Err(Error::DegenerateDirection { .. }) => view_skipped = true,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(LossTerms { total, cls: terms.0, reg: terms.1, view: terms.2, view_skipped })
}

fn argmax_view(scores: &ViewScores<'_>, class: usize) -> usize {
    let p = scores.p.value();
    let nc = p.shape()[1];
    (0..p.shape()[0])
        .max_by(|&a, &b| p.data()[a * nc + class].total_cmp(&p.data()[b * nc + class]))
        .unwrap_or(0)
}

/// Inference result for one ROI under the ground-truth-box protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Foreground class in `1..=N_c`.
    pub class: usize,
    /// Foreground classes ordered by decreasing `S_c`.
    pub ranking: Vec<usize>,
    pub angle: f64,
    /// The resultant of `class` vanished; `angle` is then the centre of
    /// `view_bin` instead.
    pub angle_degenerate: bool,
    pub view_bin: usize,
    pub bbox: BBox,
}

/// Argmax over foreground `S_c`, that class's angle, and the box decoded
/// from the deltas of its most probable view.
pub fn predict(scores: &ViewScores<'_>, proposal: &BBox) -> Result<Prediction> {
    let s_c = scores.s_c.value();
    let mut ranking: Vec<usize> = (1..s_c.len()).collect();
    ranking.sort_by(|&a, &b| s_c.data()[b].total_cmp(&s_c.data()[a]));
    let class = ranking[0];
    let view_bin = argmax_view(scores, class);
    let t = scores.t.value();
    let off = (view_bin * scores.n_classes() + class - 1) * 4;
    let d = &t.data()[off..off + 4];
    let (angle, angle_degenerate) = match scores.theta(class) {
        Ok(theta) => (theta.item(), false),
        Err(Error::DegenerateDirection { .. }) => (wrap_angle(bin_angle(view_bin, scores.n_views())), true),
        Err(e) => return Err(e),
    };
    Ok(Prediction {
        class,
        ranking,
        angle,
        angle_degenerate,
        view_bin,
        bbox: decode_box(proposal, [d[0], d[1], d[2], d[3]])?,
    })
}

/// The view-agnostic comparison head: one `k × k` kernel produces a single
/// feature vector, and dense maps emit all `N_v × (N_c + 1)` logits and
/// `N_v × N_c × 4` deltas at once.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams {
    pub n_classes: usize,
    pub n_views: usize,
    /// `[k, k, ch_in, ch_out]`
    pub w_feat: Tensor,
    /// `[ch_out, N_v · (N_c + 1)]`
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    /// `[ch_out, N_v · N_c · 4]`
    pub w_reg: Tensor,
    pub b_reg: Tensor,
}

impl BaselineParams {
    pub fn init<R: Rng + ?Sized>(
        k: usize,
        n_views: usize,
        n_classes: usize,
        ch_in: usize,
        ch_out: usize,
        rng: &mut R,
    ) -> Self {
        let std_feat = (2.0 / (k * k * ch_in) as f64).sqrt();
        let std = (2.0 / ch_out as f64).sqrt();
        Self {
            n_classes,
            n_views,
            w_feat: Tensor::randn(&[k, k, ch_in, ch_out], std_feat, rng),
            w_cls: Tensor::randn(&[ch_out, n_views * (n_classes + 1)], std, rng),
            b_cls: Tensor::zeros(&[n_views * (n_classes + 1)]),
            w_reg: Tensor::randn(&[ch_out, n_views * n_classes * 4], std * 0.1, rng),
            b_reg: Tensor::zeros(&[n_views * n_classes * 4]),
        }
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundBaseline<'g> {
        BoundBaseline {
            n_classes: self.n_classes,
            n_views: self.n_views,
            w_feat: graph.param(self.w_feat.clone()),
            w_cls: graph.param(self.w_cls.clone()),
            b_cls: graph.param(self.b_cls.clone()),
            w_reg: graph.param(self.w_reg.clone()),
            b_reg: graph.param(self.b_reg.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBaseline<'g> {
    pub n_classes: usize,
    pub n_views: usize,
    pub w_feat: Var<'g>,
    pub w_cls: Var<'g>,
    pub b_cls: Var<'g>,
    pub w_reg: Var<'g>,
    pub b_reg: Var<'g>,
}

/// View-agnostic feature for a batch `x: [B, k, k, ch_in]`, giving `[B, ch_out]`.
pub fn baseline_features<'g>(x: Var<'g>, params: &BoundBaseline<'g>) -> Result<Var<'g>> {
    let ws = params.w_feat.shape();
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != ws[..3] {
        return Err(Error::dim(format!("ROI batch {xs:?} does not fit kernel {ws:?}")));
    }
    tensordot(x, params.w_feat, &[(1, 0), (2, 1), (3, 2)])
}

/// Score map and deltas from one view-agnostic feature vector `[ch_out]`.
pub fn baseline_maps<'g>(feature: Var<'g>, params: &BoundBaseline<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (nv, nc) = (params.n_views, params.n_classes);
    let s = tensordot(feature, params.w_cls, &[(0, 0)])?.add_bias(params.b_cls)?.reshape(&[nv, nc + 1])?;
    let t = tensordot(feature, params.w_reg, &[(0, 0)])?.add_bias(params.b_reg)?.reshape(&[nv, nc, 4])?;
    Ok((s, t))
}

/// Single-ROI baseline: `x: [k, k, ch_in]` to `(S [N_v, N_c+1], t [N_v, N_c, 4])`.
pub fn baseline_scores<'g>(x: Var<'g>, params: &BoundBaseline<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::dim(format!("ROI feature must be [k, k, ch], got {xs:?}")));
    }
    let f = baseline_features(x.reshape(&[1, xs[0], xs[1], xs[2]])?, params)?.select(0, 0)?;
    baseline_maps(f, params)
}
