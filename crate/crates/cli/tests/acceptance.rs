//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ccn_cli::format::{checkpoint_bytes, dataset_bytes, read_checkpoint_from, read_dataset_from};
use ccn_cli::run;
use ccn_core::autograd::Graph;
use ccn_core::cylinder::*;
use ccn_core::gradcheck::{finite_diff_check, run_suite};
use ccn_core::head::{angular_residual_value, bin_angles, category_scores, sinusoidal_soft_argmax, viewpoint_distribution};
use ccn_core::synthcam::{generate_dataset, GenConfig};
use ccn_core::trainer::{compare_heads, predict_dataset, train, HeadMode, TrainConfig};
use ccn_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SUITE_SEEDS: u64 = 10;
const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_CASES: u64 = 20;
const ANGLE_TOL: f64 = 1e-12;
const SCORE_MAPS: usize = 1000;
const DESK_TOP1: f64 = 0.90;
const DESK_MEDERR_DEG: f64 = 10.0;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const COMPARE_SEEDS: usize = 3;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {id} {name}: {detail} ({secs:.1}s)");
            true
        }
        Err(detail) => {
            println!("FAIL {id} {name}: {detail} ({secs:.1}s)");
            false
        }
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = run_suite(GRAD_SUITE_SEEDS).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &reports {
        ensure(r.passed, || format!("{r}"))?;
    }
    ensure(elapsed < GRAD_SUITE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{} ops x {GRAD_SUITE_SEEDS} seeds, worst rel err {worst:.2e}", reports.len()))
}

/// Column `col` of the cylinder, `[k][ch_in][ch_out]`, read from the blocks.
fn column(p: &CylinderParams, g: &CylinderGeometry, col: usize) -> Vec<f64> {
    let (m, n) = (g.side_columns(), g.n_views);
    let (block, width, idx) = if col < m {
        (&p.side, m, col)
    } else if col == m {
        (&p.front, 1, 0)
    } else if col < n - 1 {
        (&p.side, m, 2 * m - col)
    } else {
        (&p.rear, 1, 0)
    };
    let mut out = Vec::new();
    for i in 0..g.k {
        for c in 0..g.ch_in {
            for o in 0..g.ch_out {
                out.push(block.data()[((i * width + idx) * g.ch_in + c) * g.ch_out + o]);
            }
        }
    }
    out
}

fn window(g: &CylinderGeometry, p: &CylinderParams, v: usize) -> Vec<Vec<f64>> {
    let graph = Graph::new();
    let kernel = p.bind(&graph, *g).unwrap();
    let padded = pad_cylinder(build_cylinder(&kernel).unwrap(), g.k, g.pad_mode).unwrap();
    let w = extract_view_kernel(padded, g.k, v).unwrap().value();
    (0..g.k)
        .map(|j| {
            let mut col = Vec::new();
            for i in 0..g.k {
                for c in 0..g.ch_in {
                    for o in 0..g.ch_out {
                        col.push(w.at(&[i, j, c, o]));
                    }
                }
            }
            col
        })
        .collect()
}

fn cylinder_invariants() -> Outcome {
    let mut checked = 0;
    for k in [1, 3, 5, 7] {
        for n in [4, 6, 8, 12, 24, 36] {
            let Ok(g) = CylinderGeometry::new(k, n, 3, 5, PadMode::Wrap) else { continue };
            ensure(g.parameter_count() == k * ((n + 2) / 2) * 3 * 5, || format!("count k={k} n={n}"))?;
            let p = g.init(&mut ChaCha8Rng::seed_from_u64((k * 100 + n) as u64));
            ensure(p.side.len() + p.front.len() + p.rear.len() == g.parameter_count(), || "stored size".into())?;
            let r = k / 2;
            for v in 0..n {
                let win = window(&g, &p, v);
                let mut rev = win.clone();
                rev.reverse();
                ensure(rev == window(&g, &p, mirror_view(v, n)), || format!("mirror k={k} n={n} v={v}"))?;
                for (j, col) in win.iter().enumerate() {
                    let c = (v + n + j - r) % n;
                    ensure(col == &column(&p, &g, c), || format!("periodicity k={k} n={n} v={v} j={j}"))?;
                }
            }
            checked += 1;
        }
    }
    let paper = CylinderGeometry::new(7, 24, 32, 64, PadMode::Wrap).map_err(|e| e.to_string())?;
    ensure(paper.parameter_count() == 7 * 13 * 32 * 64, || "7x13 count".into())?;

    // tied gradients by finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = CylinderGeometry::new(3, 8, 2, 3, PadMode::Wrap).map_err(|e| e.to_string())?;
    let p = g.init(&mut rng);
    let x = Tensor::randn(&[3, 3, 2], 1.0, &mut rng);
    let wts = Tensor::randn(&[8, 3], 1.0, &mut rng);
    let named = [("side", p.side), ("front", p.front), ("rear", p.rear)];
    let fd = finite_diff_check(
        "tied",
        |gr, v| {
            let kern = CylindricalKernel::new(g, v[0], v[1], v[2])?;
            let f = view_specific_features(gr.constant(x.clone()), &kern)?;
            Ok(f.values.mul(gr.constant(wts.clone()))?.sum())
        },
        &named,
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    ensure(fd.passed, || format!("{fd}"))?;
    Ok(format!("{checked} geometries exact, 7x13 count, tied FD rel err {:.1e}", fd.max_rel_error))
}

fn padded_column(g: &CylinderGeometry, q: usize) -> usize {
    let (n, r, q) = (g.n_views as isize, (g.k / 2) as isize, q as isize);
    match g.pad_mode {
        PadMode::Wrap => (q - r).rem_euclid(n) as usize,
        PadMode::Flip if q < r => (n - 1 - q) as usize,
        PadMode::Flip if q >= n + r => (r - 1 - (q - n - r)) as usize,
        PadMode::Flip => (q - r) as usize,
    }
}

fn triple_loop_oracle() -> Outcome {
    for seed in 0..ORACLE_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = [4, 6, 8, 12, 24][seed as usize % 5];
        let k = [1, 3, 5, 7][seed as usize % 4].min(n - 1);
        let mode = if seed % 3 == 0 { PadMode::Flip } else { PadMode::Wrap };
        let g = CylinderGeometry::new(k, n, 1 + seed as usize % 3, 1 + seed as usize % 4, mode).map_err(|e| e.to_string())?;
        let p = g.init(&mut rng);
        let x = Tensor::randn(&[k, k, g.ch_in], 1.0, &mut rng);

        let mut want = vec![0.0; n * g.ch_out];
        for v in 0..n {
            let cols: Vec<Vec<f64>> = (0..k).map(|j| column(&p, &g, padded_column(&g, v + j))).collect();
            for o in 0..g.ch_out {
                let mut acc = 0.0;
                for i in 0..k {
                    for (j, col) in cols.iter().enumerate() {
                        for c in 0..g.ch_in {
                            acc += x.data()[(i * k + j) * g.ch_in + c] * col[(i * g.ch_in + c) * g.ch_out + o];
                        }
                    }
                }
                want[v * g.ch_out + o] = acc;
            }
        }
        let graph = Graph::new();
        let kernel = p.bind(&graph, g).map_err(|e| e.to_string())?;
        let got = view_specific_features(graph.constant(x), &kernel).map_err(|e| e.to_string())?.values.value();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(got.data()) == bits(&want), || format!("seed {seed} differs"))?;
    }
    Ok(format!("{ORACLE_CASES} cases bitwise equal"))
}

fn angle(p: &[f64], bins: &[f64]) -> ccn_core::Result<f64> {
    let g = Graph::new();
    sinusoidal_soft_argmax(g.constant(Tensor::from_vec(p.to_vec())), bins).map(|t| t.item())
}

fn soft_argmax_properties() -> Outcome {
    let mut worst: f64 = 0.0;
    for nv in [4, 8, 12, 24, 36] {
        let bins = bin_angles(nv);
        for v in 0..nv {
            let mut p = vec![0.0; nv];
            p[v] = 1.0;
            let a = angle(&p, &bins).map_err(|e| e.to_string())?;
            worst = worst.max(angular_residual_value(a, bins[v]).abs());
        }
    }
    ensure(worst <= ANGLE_TOL, || format!("one-hot error {worst:e}"))?;

    let bins = bin_angles(24);
    let mut p = vec![0.0; 24];
    p[23] = 0.5;
    p[1] = 0.5;
    let seam = angle(&p, &bins).map_err(|e| e.to_string())?;
    ensure(seam.abs() <= ANGLE_TOL, || format!("seam case gave {seam:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut eq_worst: f64 = 0.0;
    for _ in 0..500 {
        let nv = [4, 8, 24][rng.gen_range(0..3)];
        let delta = rng.gen_range(-4.0..4.0);
        let logits: Vec<f64> = (0..nv).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let bins = bin_angles(nv);
        let Ok(a) = angle(&p, &bins) else { continue };
        let shifted: Vec<f64> = bins.iter().map(|b| b + delta).collect();
        let b = angle(&p, &shifted).map_err(|e| e.to_string())?;
        eq_worst = eq_worst.max(angular_residual_value(b, a + delta).abs());
    }
    ensure(eq_worst <= ANGLE_TOL, || format!("equivariance error {eq_worst:e}"))?;

    for nv in [4, 6, 24] {
        let p = vec![1.0 / nv as f64; nv];
        let r = angle(&p, &bin_angles(nv));
        ensure(matches!(r, Err(Error::DegenerateDirection { .. })), || format!("uniform nv={nv} gave {r:?}"))?;
    }
    Ok(format!("one-hot {worst:.1e}, seam {:.1e}, equivariance {eq_worst:.1e} rad, uniform rejected", seam.abs()))
}

fn category_score_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..SCORE_MAPS {
        let (nv, nc) = (rng.gen_range(1..30), rng.gen_range(1..6));
        let scale = [1e-3, 1.0, 30.0, 1e3][case % 4];
        let s = Tensor::randn(&[nv, nc], scale, &mut rng);
        let g = Graph::new();
        let sv = g.constant(s.clone());
        let got = category_scores(sv, viewpoint_distribution(sv).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.value();
        for c in 0..nc {
            let col: Vec<f64> = (0..nv).map(|v| s.at(&[v, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = got.data()[c];
            ensure(x <= hi && x >= lo - 1e-12 * scale.max(1.0), || format!("case {case}: {x} outside [{lo}, {hi}]"))?;
        }
    }
    for s in [0.0, 1.0, -3.75, 0.1, 1.0 / 3.0, PI, -7.123456789e12] {
        for nv in [1, 2, 7, 24] {
            let g = Graph::new();
            let sv = g.constant(Tensor::full(&[nv, 2], s));
            let got = category_scores(sv, viewpoint_distribution(sv).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.value();
            ensure(got.data().iter().all(|x| x.to_bits() == s.to_bits()), || format!("constant {s} nv={nv}"))?;
        }
    }
    Ok(format!("{SCORE_MAPS} maps within bounds, constant columns exact"))
}

/// Criteria 6 and 7 share the seed-0 CCN run.
fn desk_and_comparison() -> (Outcome, Outcome) {
    let data = match generate_dataset(&GenConfig::default()) {
        Ok(d) => d,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let mut first_done = None;
    let result = compare_heads(&cfg, &data.train, &data.val, COMPARE_SEEDS, &mut |seed, mode, rec| {
        eprintln!("seed={seed} head={mode} {rec}");
        if seed == cfg.seed && mode == HeadMode::Ccn && rec.epoch + 1 == cfg.epochs {
            first_done = Some(start.elapsed());
        }
    });
    let cmp = match result {
        Ok(c) => c,
        Err(f) => return (Err(f.to_string()), Err(f.to_string())),
    };
    eprint!("{cmp}");

    let m = &cmp.runs[0].ccn.report;
    let took = first_done.unwrap_or_default();
    let desk = format!("top-1 {:.4} (>= {DESK_TOP1}), MedErr {:.2} deg (<= {DESK_MEDERR_DEG}), trained in {:.0}s", m.top1, m.mederr_deg, took.as_secs_f64());
    let six = if m.top1 >= DESK_TOP1 && m.mederr_deg <= DESK_MEDERR_DEG && took <= DESK_BUDGET { Ok(desk) } else { Err(desk) };

    let (c, b) = (&cmp.median_ccn, &cmp.median_baseline);
    let cmp_line = format!(
        "median MedErr ccn {:.2} vs baseline {:.2} deg, median top-1 ccn {:.4} vs baseline {:.4}",
        c.mederr_deg, b.mederr_deg, c.top1, b.top1
    );
    let seven = if c.mederr_deg < b.mederr_deg && c.top1 >= b.top1 { Ok(cmp_line) } else { Err(cmp_line) };
    (six, seven)
}

fn stripped_training() -> Outcome {
    let data = generate_dataset(&GenConfig { strip_fraction: 1.0, ..GenConfig::default() }).map_err(|e| e.to_string())?;
    ensure(data.train.samples.iter().all(|s| s.azimuth.is_none()), || "annotations remain".into())?;
    let cfg = TrainConfig { epochs: 3, lr_decay_epochs: vec![], ..TrainConfig::default() };
    let out = train(&cfg, &data.train, &data.val, &mut |_| {}).map_err(|f| f.to_string())?;
    ensure(out.log.iter().all(|r| r.loss.is_finite() && r.l_view == 0.0), || "non-finite loss or angle term".into())?;
    let recs = predict_dataset(&out.model, &data.val).map_err(|e| e.to_string())?;
    ensure(recs.iter().all(|r| r.angle.is_finite() && r.angle > -PI && r.angle <= PI), || "ill-defined angle".into())?;
    Ok(format!("{} epochs finite, {} val angles in (-pi, pi]", out.log.len(), recs.len()))
}

const SMALL: &str = "\
n_classes = 2
n_views = 8
image_size = 16
samples_per_cell = 3
k = 3
ch_in = 4
ch_out = 4
backbone_widths = 4, 4, 4
epochs = 2
batch_size = 4
lr_decay_epochs = 1
train_data = data/train.ccns
val_data = data/val.ccns
checkpoint = model.ccnw
";

fn cli(args: &[&str]) -> Result<(), String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    match run(std::iter::once("ccn").chain(args.iter().copied()), &mut out, &mut err) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err))),
    }
}

fn produce(dir: &Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    cli(&["gen-data", "--config", cfg, "--out", dir.join("data").to_str().unwrap()])?;
    cli(&["train", "--config", cfg])?;
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&dir.join("data/train.ccns"))?, read(&dir.join("data/val.ccns"))?, read(&dir.join("model.ccnw"))?))
}

fn determinism_and_formats() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = produce(a.path())?;
    let second = produce(b.path())?;
    ensure(first.0 == second.0 && first.1 == second.1, || "dataset files differ".into())?;
    ensure(first.2 == second.2, || "checkpoints differ".into())?;

    for bytes in [&first.0, &first.1] {
        let set = read_dataset_from(bytes.as_slice()).map_err(|e| e.to_string())?;
        ensure(&dataset_bytes(&set).map_err(|e| e.to_string())? == bytes, || "dataset rewrite differs".into())?;
    }
    let model = read_checkpoint_from(first.2.as_slice()).map_err(|e| e.to_string())?;
    ensure(checkpoint_bytes(&model).map_err(|e| e.to_string())? == first.2, || "checkpoint rewrite differs".into())?;

    let full = generate_dataset(&GenConfig::default()).map_err(|e| e.to_string())?;
    for set in [&full.train, &full.val] {
        let back = read_dataset_from(dataset_bytes(set).map_err(|e| e.to_string())?.as_slice()).map_err(|e| e.to_string())?;
        ensure(&back == set, || "default split round trip differs".into())?;
    }
    Ok(format!("datasets {}+{} bytes and checkpoint {} bytes identical across runs; round trips exact", first.0.len(), first.1.len(), first.2.len()))
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient suite", gradient_suite);
    ok &= report(2, "cylinder invariants", cylinder_invariants);
    ok &= report(3, "view feature oracle", triple_loop_oracle);
    ok &= report(4, "sinusoidal soft-argmax", soft_argmax_properties);
    ok &= report(5, "category scores", category_score_properties);
    let (six, seven) = desk_and_comparison();
    ok &= report(6, "desk-scale learning", || six);
    ok &= report(7, "ccn vs baseline over 3 seeds", || seven);
    ok &= report(8, "fully stripped azimuths", stripped_training);
    ok &= report(9, "determinism and formats", determinism_and_formats);
    if !ok {
        std::process::exit(1);
    }
}
