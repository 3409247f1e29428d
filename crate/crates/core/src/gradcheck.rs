//! Central-difference verification of [`Graph::backward`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{atan2, concat, cross_entropy_logits, smooth_l1, Graph, Var};
use crate::cylinder::{view_specific_features, CylinderGeometry, CylindricalKernel, PadMode};
use crate::error::{Error, Result};
use crate::head::{
    angular_residual, baseline_scores, bin_angles, category_scores, ccn_scores, scores_from_maps,
    sinusoidal_soft_argmax, total_loss, BBox, BaselineParams, HeadParams, LossConfig, Target,
};
use crate::tensor::Tensor;
use crate::trainer::{image_batch, Architecture, BoundModel, HeadMode, Model};
use crate::synthcam::Sample;

/// Step used by [`run_suite`].
pub const SUITE_STEP: f64 = 1e-5;
/// Relative-error bound used by [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Flat index within `worst_param`.
    pub worst_index: usize,
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    /// Keeps the worse of two reports for the same operation.
    pub fn merge(self, other: GradReport) -> GradReport {
        let tolerance = self.tolerance.min(other.tolerance);
        let mut worst = if other.max_rel_error > self.max_rel_error { other } else { self };
        worst.tolerance = tolerance;
        worst.passed = worst.max_rel_error < tolerance;
        worst
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<28} max_rel_err={:.3e} worst={}[{}] tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_error,
            self.worst_param,
            self.worst_index,
            self.tolerance
        )
    }
}

/// Compares `backward` against central differences `(f(p+h) − f(p−h)) / 2h`
/// for every coordinate of every parameter.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
/// `f` must build a scalar from the parameter vars it is given, in the order
/// of `params`, and must be deterministic.
pub fn finite_diff_check<F>(
    op_name: &str,
    f: F,
    params: &[(&str, Tensor)],
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = f(&graph, &vars)?;
    if !out.value().is_scalar() {
        return Err(Error::Contract(format!("checked function returned shape {:?}", out.shape())));
    }
    let grads = graph.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.constant(t.clone())).collect();
        let v = f(&g, &vars)?.item();
        if !v.is_finite() {
            return Err(Error::NumericalDomain(format!("{op_name}: non-finite value at probe")));
        }
        Ok(v)
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_param: params.first().map(|p| p.0.to_string()).unwrap_or_default(),
        tolerance: tol,
        passed: true,
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(vars[p]).cloned();
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + h;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - h;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_index = i;
                report.worst_param = name.to_string();
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// A differentiable function of named parameter tensors.
type Checked = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;
type Params = Vec<(String, Tensor)>;

fn params<const N: usize>(list: [(&str, Tensor); N]) -> Params {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

struct Case {
    name: &'static str,
    build: fn(&mut ChaCha8Rng) -> (Checked, Params),
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Gaussian entries pushed at least 0.1 away from zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

/// `Σ w ⊙ y` for a fixed random `w`, so every output entry matters.
fn weighted<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.graph().constant(randn(&y.shape(), &mut rng));
    Ok(y.mul(w)?.sum())
}

fn unary(f: for<'g> fn(Var<'g>) -> Result<Var<'g>>, input: Tensor) -> (Checked, Params) {
    (Box::new(move |_, v| weighted(f(v[0])?, 7)), params([("x", input)]))
}

fn binary(
    f: for<'g> fn(Var<'g>, Var<'g>) -> Result<Var<'g>>,
    a: Tensor,
    b: Tensor,
) -> (Checked, Params) {
    (Box::new(move |_, v| weighted(f(v[0], v[1])?, 7)), params([("a", a), ("b", b)]))
}

fn geometry(rng: &mut ChaCha8Rng, mode: PadMode) -> CylinderGeometry {
    let k = [1, 3][rng.gen_range(0..2)];
    let n_views = [4, 6, 8][rng.gen_range(0..3)];
    CylinderGeometry { k, n_views, ch_in: 2, ch_out: 2, pad_mode: mode }
}

fn cylinder_case(rng: &mut ChaCha8Rng, mode: PadMode) -> (Checked, Params) {
    let geo = geometry(rng, mode);
    let p = geo.init(rng);
    let x = randn(&[geo.k, geo.k, geo.ch_in], rng);
    let f: Checked = Box::new(move |_, v| {
        let kernel = CylindricalKernel::new(geo, v[1], v[2], v[3])?;
        weighted(view_specific_features(v[0], &kernel)?.values, 7)
    });
    (f, params([("x", x), ("side", p.side), ("front", p.front), ("rear", p.rear)]))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(6.0..10.0), rng.gen_range(6.0..10.0), rng.gen_range(8.0..14.0), rng.gen_range(8.0..14.0))
}

fn random_target(rng: &mut ChaCha8Rng, n_classes: usize, kind: usize) -> Target {
    let c = rng.gen_range(1..=n_classes);
    match kind {
        0 => Target::object(c, random_box(rng), Some(rng.gen_range(-3.0..3.0))),
        1 => Target::object(c, random_box(rng), None),
        _ => Target::background(),
    }
}

fn ccn_loss_case(rng: &mut ChaCha8Rng) -> (Checked, Params) {
    let mode = [PadMode::Wrap, PadMode::Flip][rng.gen_range(0..2)];
    let geo = geometry(rng, mode);
    let n_classes = 2;
    let cyl = geo.init(rng);
    let head = HeadParams::init(n_classes, geo.n_views, geo.ch_out, rng);
    let x = randn(&[geo.k, geo.k, geo.ch_in], rng);
    let kind = rng.gen_range(0..3);
    let target = random_target(rng, n_classes, kind);
    let proposal = random_box(rng);
    let cfg = LossConfig::for_views(geo.n_views);
    let f: Checked = Box::new(move |_, v| {
        let kernel = CylindricalKernel::new(geo, v[1], v[2], v[3])?;
        let bound = crate::head::BoundHead {
            n_classes,
            n_views: geo.n_views,
            w_cls: v[4],
            b_cls: v[5],
            w_reg: v[6],
            b_reg: v[7],
        };
        let scores = ccn_scores(&view_specific_features(v[0], &kernel)?, &bound)?;
        Ok(total_loss(&scores, &target, &proposal, &cfg)?.total)
    });
    let list = params([
        ("x", x),
        ("side", cyl.side),
        ("front", cyl.front),
        ("rear", cyl.rear),
        ("w_cls", head.w_cls),
        ("b_cls", randn(&[n_classes + 1], rng)),
        ("w_reg", head.w_reg),
        ("b_reg", randn(&[n_classes * 4], rng)),
    ]);
    (f, list)
}

fn baseline_loss_case(rng: &mut ChaCha8Rng) -> (Checked, Params) {
    let (k, n_views, n_classes, ci, co) = (3, [4, 6][rng.gen_range(0..2)], 2, 2, 3);
    let p = BaselineParams::init(k, n_views, n_classes, ci, co, rng);
    let x = randn(&[k, k, ci], rng);
    let kind = rng.gen_range(0..3);
    let target = random_target(rng, n_classes, kind);
    let proposal = random_box(rng);
    let cfg = LossConfig::for_views(n_views);
    let f: Checked = Box::new(move |_, v| {
        let bound = crate::head::BoundBaseline {
            n_classes,
            n_views,
            w_feat: v[1],
            w_cls: v[2],
            b_cls: v[3],
            w_reg: v[4],
            b_reg: v[5],
        };
        let (s, t) = baseline_scores(v[0], &bound)?;
        Ok(total_loss(&scores_from_maps(s, t)?, &target, &proposal, &cfg)?.total)
    });
    let list = params([
        ("x", x),
        ("w_feat", p.w_feat),
        ("w_cls", p.w_cls),
        ("b_cls", p.b_cls),
        ("w_reg", p.w_reg),
        ("b_reg", p.b_reg),
    ]);
    (f, list)
}

/// Backbone plus head on a 16×16 two-image batch with narrow layers.
fn full_model_case(rng: &mut ChaCha8Rng) -> (Checked, Params) {
    let head_mode = [HeadMode::Ccn, HeadMode::Baseline][rng.gen_range(0..2)];
    let arch = Architecture { k: 3, n_views: 4, n_classes: 2, ch_in: 2, ch_out: 2, head_mode, pad_mode: PadMode::Wrap };
    let model = Model::init(arch, [2, 2, 2], rng.gen()).expect("valid architecture");
    let samples: Vec<Sample> = (0..2)
        .map(|i| Sample {
            image: (0..256).map(|_| rng.gen::<f32>()).collect(),
            label: i as u16 + 1,
            azimuth: Some(rng.gen_range(-3.0..3.0)),
            bbox: [8.0, 8.0, rng.gen_range(8.0..14.0), rng.gen_range(8.0..14.0)],
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let images = image_batch(&refs, 16).expect("16x16 images");
    let targets: Vec<Target> = samples.iter().map(Sample::target).collect();
    let cfg = LossConfig::for_views(arch.n_views);
    // positive conv biases keep the narrow ReLU layers alive; random head
    // biases keep the view distributions away from uniform
    let list: Params = model
        .params
        .iter()
        .map(|p| {
            let t = if p.name.ends_with("bias") {
                randn(p.tensor.shape(), rng).map(|v| 0.05 + 0.1 * v.abs())
            } else if p.name.ends_with("b_cls") || p.name.ends_with("b_reg") {
                randn(p.tensor.shape(), rng)
            } else {
                p.tensor.clone()
            };
            (p.name.clone(), t)
        })
        .collect();
    let f: Checked = Box::new(move |g, v| {
        let bound = BoundModel::from_vars(arch, v.to_vec())?;
        let scores = bound.forward(g.constant(images.clone()))?;
        let proposal = BBox::new(8.0, 8.0, 16.0, 16.0);
        let mut total: Option<Var<'_>> = None;
        for (s, t) in scores.iter().zip(&targets) {
            let l = total_loss(s, t, &proposal, &cfg)?.total;
            total = Some(match total {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        Ok(total.expect("two samples"))
    });
    (f, list)
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", build: |r| binary(|a, b| a.add(b), randn(&[2, 3], r), randn(&[2, 3], r)) },
        Case { name: "sub", build: |r| binary(|a, b| a.sub(b), randn(&[2, 3], r), randn(&[2, 3], r)) },
        Case { name: "mul", build: |r| binary(|a, b| a.mul(b), randn(&[2, 3], r), randn(&[2, 3], r)) },
        Case { name: "add_bias", build: |r| binary(|a, b| a.add_bias(b), randn(&[2, 3, 4], r), randn(&[4], r)) },
        Case { name: "scale", build: |r| unary(|x| Ok(x.scale(-1.7)), randn(&[5], r)) },
        Case { name: "add_scalar", build: |r| unary(|x| Ok(x.add_scalar(0.3)), randn(&[5], r)) },
        Case { name: "sin", build: |r| unary(|x| Ok(x.sin()), randn(&[5], r)) },
        Case { name: "cos", build: |r| unary(|x| Ok(x.cos()), randn(&[5], r)) },
        Case { name: "relu", build: |r| unary(|x| Ok(x.relu()), away_from_zero(&[6], r)) },
        Case { name: "sum", build: |r| unary(|x| Ok(x.sum().scale(1.3)), randn(&[2, 3], r)) },
        Case { name: "sum_axis", build: |r| unary(|x| x.sum_axis(1), randn(&[2, 3, 4], r)) },
        Case { name: "reshape", build: |r| unary(|x| x.reshape(&[4, 3, 2]), randn(&[2, 3, 4], r)) },
        Case {
            name: "tensordot",
            build: |r| binary(|a, b| a.tensordot(b, &[(1, 0), (2, 2)]), randn(&[2, 3, 4], r), randn(&[3, 2, 4], r)),
        },
        Case { name: "softmax", build: |r| unary(|x| x.softmax(0), randn(&[4, 3], r)) },
        Case {
            name: "cross_entropy",
            build: |r| {
                let label = r.gen_range(0..5);
                (Box::new(move |_, v| cross_entropy_logits(v[0], label)), params([("logits", randn(&[5], r).scale(2.0))]))
            },
        },
        Case { name: "atan2", build: |r| binary(|y, x| atan2(y, x), away_from_zero(&[5], r), away_from_zero(&[5], r)) },
        Case {
            name: "smooth_l1",
            build: |r| {
                let beta = r.gen_range(0.2..1.5);
                let target = randn(&[6], r);
                (
                    Box::new(move |g, v| smooth_l1(v[0], g.constant(target.clone()), beta)),
                    params([("pred", randn(&[6], r))]),
                )
            },
        },
        Case { name: "flip", build: |r| unary(|x| x.flip(1), randn(&[2, 5, 2], r)) },
        Case {
            name: "concat",
            build: |r| binary(|a, b| concat(&[a, b, a], 1), randn(&[2, 2, 3], r), randn(&[2, 1, 3], r)),
        },
        Case { name: "slice_wrap", build: |r| unary(|x| x.slice_wrap(1, -2, 4), randn(&[2, 5, 2], r)) },
        Case { name: "select", build: |r| unary(|x| x.select(1, 2), randn(&[2, 4, 3], r)) },
        Case {
            name: "conv2d",
            build: |r| {
                let (stride, pad) = [(1, 1), (2, 1), (2, 0)][r.gen_range(0..3)];
                (
                    Box::new(move |_, v| weighted(v[0].conv2d(v[1], stride, pad)?, 7)),
                    params([("x", randn(&[2, 5, 5, 2], r)), ("w", randn(&[3, 3, 2, 3], r))]),
                )
            },
        },
        Case { name: "cylinder_wrap", build: |r| cylinder_case(r, PadMode::Wrap) },
        Case { name: "cylinder_flip", build: |r| cylinder_case(r, PadMode::Flip) },
        Case {
            name: "category_scores",
            build: |r| unary(|s| category_scores(s, s.softmax(0)?), randn(&[6, 3], r)),
        },
        Case {
            name: "soft_argmax",
            build: |r| {
                let n = 6;
                (
                    Box::new(move |_, v| weighted(sinusoidal_soft_argmax(v[0].softmax(0)?, &bin_angles(n))?, 7)),
                    params([("s", randn(&[n, 3], r).scale(2.0))]),
                )
            },
        },
        Case {
            name: "angular_residual",
            build: |r| {
                let hat = r.gen_range(-3.0..3.0);
                (Box::new(move |_, v| weighted(angular_residual(v[0], hat)?, 7)), params([("theta", randn(&[4], r))]))
            },
        },
        Case { name: "ccn_loss", build: ccn_loss_case },
        Case { name: "baseline_loss", build: baseline_loss_case },
        Case { name: "full_model_loss", build: full_model_case },
    ]
}

/// Finite-difference check of every differentiable operation and of the
/// complete loss, each on `n_seeds` random instances. One merged report
/// per operation.
pub fn run_suite(n_seeds: u64) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for case in cases() {
        let mut merged: Option<GradReport> = None;
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, list) = (case.build)(&mut rng);
            let named: Vec<(&str, Tensor)> = list.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
            let r = finite_diff_check(case.name, |g, v| f(g, v), &named, SUITE_STEP, SUITE_TOLERANCE)
                .map_err(|e| Error::Contract(format!("{} (seed {seed}): {e}", case.name)))?;
            merged = Some(match merged {
                Some(m) => m.merge(r),
                None => r,
            });
        }
        reports.extend(merged);
    }
    Ok(reports)
}
