//! Procedural wireframe objects rendered at known azimuths.
//!
//! Every category has its own prism skeleton with a nose and a fin that
//! break the left/right and front/back symmetries, so the azimuth of a
//! render is recoverable from the image. Images are orthographic line
//! drawings with depth-cued intensity and additive Gaussian noise.
//!
//! Everything here is a pure function of its arguments; nothing touches the
//! file system.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cylinder::bin_angle;
use crate::error::{Error, Result};
use crate::head::{azimuth_bin, BBox, Target};

/// Camera elevation above the ground plane before jitter.
pub const BASE_ELEVATION_DEG: f64 = 20.0;
/// Largest elevation jitter accepted by [`GenConfig::validate`].
pub const MAX_ELEVATION_JITTER_DEG: f64 = 5.0;
/// Fraction of the crop covered by the longer side of an unjittered box.
pub const NOMINAL_BOX_FILL: f64 = 0.7;
/// Two renders count as different at a pixel when they differ by more.
pub const PIXEL_DIFF_THRESHOLD: f64 = 0.1;
/// Minimum fraction of differing pixels between renders of distinct bins.
pub const MIN_DIFF_FRACTION: f64 = 0.01;
pub const MAX_SHAPE_ATTEMPTS: u64 = 100;

const LINE_RADIUS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WireShape {
    pub category: usize,
    /// Centred, with the largest axis extent equal to one.
    pub vertices: Vec<[f64; 3]>,
    pub edges: Vec<(usize, usize)>,
    /// Seed that produced the accepted vertex jitter.
    pub seed: u64,
}

impl WireShape {
    /// The shape reflected through the `x = 0` plane.
    pub fn mirrored(&self) -> WireShape {
        WireShape {
            vertices: self.vertices.iter().map(|&[x, y, z]| [-x, y, z]).collect(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.edges.len() < 6 {
            return Err(Error::Generation(format!("only {} edges", self.edges.len())));
        }
        let n = self.vertices.len();
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Generation(format!("edge ({a}, {b}) with {n} vertices")));
        }
        Ok(())
    }
}

/// Where the projected object lands, in pixel units relative to the crop
/// centre with `y` pointing up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub offset_x: f64,
    pub offset_y: f64,
    pub scale: f64,
}

/// Everything that determines a noise-free render besides the shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub azimuth: f64,
    /// Added to [`BASE_ELEVATION_DEG`]; radians.
    pub elevation_jitter: f64,
    pub placement: Placement,
}

/// Camera-space vertices `(u, v, depth)` with depth growing toward the camera.
///
/// Increasing the azimuth moves surfaces facing the camera toward smaller `u`.
pub fn project(shape: &WireShape, azimuth: f64, elevation_jitter: f64) -> Vec<[f64; 3]> {
    let az = reduce_azimuth(azimuth);
    let (sa, ca) = az.sin_cos();
    let (se, ce) = (BASE_ELEVATION_DEG.to_radians() + elevation_jitter).sin_cos();
    shape
        .vertices
        .iter()
        .map(|&[x, y, z]| {
            let xr = x * ca - z * sa;
            let zr = z * ca + x * sa;
            [xr, y * ce - zr * se, y * se + zr * ce]
        })
        .collect()
}

/// Azimuth mapped to its representative in [−π, π], then to single
/// precision, which is the precision the dataset stores.
///
/// The reduction is odd-symmetric and 2π-periodic up to the final rounding.
fn reduce_azimuth(theta: f64) -> f64 {
    let r = theta - (theta / TAU).round() * TAU;
    r as f32 as f64
}

/// Projected extents `(u_min, u_max, v_min, v_max)`.
fn extents(points: &[[f64; 3]]) -> (f64, f64, f64, f64) {
    points.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
    )
}

/// Renders a `size × size` image with values in `[0, 1]`.
///
/// Edges are drawn with a one-pixel tent profile and brightened toward the
/// camera; overlapping edges combine by maximum. The noise is seeded by
/// `seed` and skipped entirely when `noise_sigma` is zero.
pub fn render(shape: &WireShape, pose: &Pose, noise_sigma: f64, seed: u64, size: usize) -> Vec<f32> {
    let pts = project(shape, pose.azimuth, pose.elevation_jitter);
    let (u0, u1, v0, v1) = extents(&pts);
    let (um, vm) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
    let pl = pose.placement;
    let px: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| [pl.offset_x + (p[0] - um) * pl.scale, pl.offset_y + (p[1] - vm) * pl.scale, p[2]])
        .collect();

    let img = draw_segments(&px, &shape.edges, size);
    finish(img, noise_sigma, seed)
}

/// Rasterises segments given in centred pixel coordinates `(x, y↑, depth)`.
fn draw_segments(px: &[[f64; 3]], edges: &[(usize, usize)], size: usize) -> Vec<f64> {
    let half = size as f64 / 2.0;
    let mut img = vec![0.0f64; size * size];
    for (row, line) in img.chunks_exact_mut(size).enumerate() {
        let y = half - (row as f64 + 0.5);
        for (col, out) in line.iter_mut().enumerate() {
            let x = col as f64 + 0.5 - half;
            for &(a, b) in edges {
                let (pa, pb) = (px[a], px[b]);
                let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - pa[0]) * dx + (y - pa[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (x - (pa[0] + t * dx), y - (pa[1] + t * dy));
                let d = (ex * ex + ey * ey).sqrt();
                if d >= LINE_RADIUS {
                    continue;
                }
                let depth = pa[2] + t * (pb[2] - pa[2]);
                let v = (1.0 - d / LINE_RADIUS) * depth_weight(depth);
                *out = out.max(v);
            }
        }
    }
    img
}

fn depth_weight(depth: f64) -> f64 {
    (0.65 + 0.5 * depth).clamp(0.3, 1.0)
}

fn finish(mut img: Vec<f64>, noise_sigma: f64, seed: u64) -> Vec<f32> {
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for p in &mut img {
            *p += normal.sample(&mut rng);
        }
    }
    img.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect()
}

/// Builds the skeleton of `category`: a prism over a polygon with
/// `category + 2` sides, stretched along its length, with a nose vertex in
/// front and a fin vertex above the rear. Vertices are jittered by `seed`.
///
/// The shape is turned so that its nose faces the camera at the centre of
/// bin `n_views / 2 − 1`, the bin the cylinder treats as the front view.
fn skeleton(category: usize, seed: u64, n_views: usize) -> WireShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sides = category + 2;
    let mut jitter = |r: f64| rng.gen_range(-r..r);
    let phase = PI / sides as f64 * 0.5;
    let mut vertices = Vec::new();
    for level in [-0.35, 0.35] {
        for i in 0..sides {
            let a = phase + TAU * i as f64 / sides as f64;
            vertices.push([1.5 * a.cos() + jitter(0.12), level + jitter(0.06), a.sin() + jitter(0.12)]);
        }
    }
    let mut edges = Vec::new();
    for i in 0..sides {
        let j = (i + 1) % sides;
        edges.push((i, j));
        edges.push((sides + i, sides + j));
        edges.push((i, sides + i));
    }
    // nose: ahead of the +x face, low and off to one side
    let front = (0..sides)
        .max_by(|&a, &b| vertices[a][0].total_cmp(&vertices[b][0]))
        .unwrap_or(0);
    let nose = vertices.len();
    vertices.push([2.3 + jitter(0.1), -0.2 + jitter(0.05), 0.45 + jitter(0.1)]);
    edges.push((front, nose));
    edges.push((sides + front, nose));
    // fin: above the rear half, leaning toward −z
    let rear = (0..sides)
        .min_by(|&a, &b| vertices[a][0].total_cmp(&vertices[b][0]))
        .unwrap_or(0);
    let fin = vertices.len();
    vertices.push([-1.2 + jitter(0.1), 1.1 + jitter(0.1), -0.5 + jitter(0.1)]);
    edges.push((sides + rear, fin));
    edges.push((sides + (rear + 1) % sides, fin));

    // unturned, the nose faces the camera at 90°
    let turn = bin_angle((n_views / 2).saturating_sub(1), n_views) - PI / 2.0;
    let (st, ct) = turn.sin_cos();
    for v in &mut vertices {
        let [x, y, z] = *v;
        *v = [x * ct + z * st, y, z * ct - x * st];
    }
    normalise(&mut vertices);
    WireShape { category, vertices, edges, seed }
}

fn normalise(vertices: &mut [[f64; 3]]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    for v in vertices.iter_mut() {
        for a in 0..3 {
            v[a] = (v[a] - (lo[a] + hi[a]) / 2.0) / extent;
        }
    }
}

/// Placement that centres the projection in the crop at the nominal size.
fn nominal_placement(points: &[[f64; 3]], size: usize) -> Placement {
    let (u0, u1, v0, v1) = extents(points);
    let long = (u1 - u0).max(v1 - v0);
    Placement { offset_x: 0.0, offset_y: 0.0, scale: NOMINAL_BOX_FILL * size as f64 / long }
}

/// Smallest fraction of differing pixels over all pairs of bin-centre renders.
pub fn min_bin_difference(shape: &WireShape, n_views: usize, size: usize) -> f64 {
    let renders: Vec<Vec<f32>> = (0..n_views)
        .map(|v| {
            let az = bin_angle(v, n_views);
            let placement = nominal_placement(&project(shape, az, 0.0), size);
            render(shape, &Pose { azimuth: az, elevation_jitter: 0.0, placement }, 0.0, 0, size)
        })
        .collect();
    let mut worst = 1.0f64;
    for a in 0..n_views {
        for b in a + 1..n_views {
            let diff = renders[a]
                .iter()
                .zip(&renders[b])
                .filter(|(p, q)| f64::from((*p - *q).abs()) > PIXEL_DIFF_THRESHOLD)
                .count();
            worst = worst.min(diff as f64 / (size * size) as f64);
        }
    }
    worst
}

/// Deterministic shape for `(category, seed)` whose renders at the centres
/// of `n_views` bins are pairwise distinguishable at `size × size`.
///
/// Rejected jitters are redrawn from derived seeds, at most
/// [`MAX_SHAPE_ATTEMPTS`] times.
pub fn make_shape(category: usize, seed: u64, n_views: usize, size: usize) -> Result<WireShape> {
    if category == 0 {
        return Err(Error::Generation("category 0 is reserved for background".into()));
    }
    if n_views == 0 || size == 0 {
        return Err(Error::Generation("need at least one view and one pixel".into()));
    }
    for attempt in 0..MAX_SHAPE_ATTEMPTS {
        let shape = skeleton(category, mix(&[seed, category as u64, attempt]), n_views);
        shape.validate()?;
        if min_bin_difference(&shape, n_views, size) >= MIN_DIFF_FRACTION {
            return Ok(shape);
        }
    }
    Err(Error::Generation(format!(
        "category {category}: no identifiable shape after {MAX_SHAPE_ATTEMPTS} attempts"
    )))
}

/// One ROI crop. Stored in single precision, as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `G × G`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// 0 is background.
    pub label: u16,
    /// Radians in (−π, π]; `None` when unannotated.
    pub azimuth: Option<f32>,
    /// `(cx, cy, w, h)` in pixels, `y` pointing down.
    pub bbox: [f32; 4],
}

impl Sample {
    pub fn bbox(&self) -> BBox {
        let [cx, cy, w, h] = self.bbox.map(f64::from);
        BBox::new(cx, cy, w, h)
    }

    pub fn azimuth_rad(&self) -> Option<f64> {
        self.azimuth.map(f64::from)
    }

    pub fn target(&self) -> Target {
        if self.label == 0 {
            Target::background()
        } else {
            Target::object(usize::from(self.label), self.bbox(), self.azimuth_rad())
        }
    }
}

/// The proposal of every crop: the crop frame itself.
pub fn crop_frame(size: usize) -> BBox {
    let g = size as f64;
    BBox::new(g / 2.0, g / 2.0, g, g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub n_classes: usize,
    pub n_views: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let px = self.image_size * self.image_size;
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != px {
                return Err(Error::dim(format!("sample {i}: {} pixels, expected {px}", s.image.len())));
            }
            if usize::from(s.label) > self.n_classes {
                return Err(Error::Index { index: usize::from(s.label), extent: self.n_classes + 1 });
            }
            if s.image.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Contract(format!("sample {i}: pixel outside [0, 1]")));
            }
            if s.label == 0 && s.azimuth.is_some() {
                return Err(Error::Contract(format!("sample {i}: background with an azimuth")));
            }
            if let Some(a) = s.azimuth {
                if !(a.is_finite() && f64::from(a) > -PI && f64::from(a) <= PI) {
                    return Err(Error::Contract(format!("sample {i}: azimuth {a} outside (-pi, pi]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_classes: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub samples_per_cell: usize,
    /// Fraction of each cell that goes to the training split.
    pub train_split: f64,
    /// Probability that a training sample loses its azimuth annotation.
    pub strip_fraction: f64,
    /// Share of background crops in each split.
    pub background_fraction: f64,
    pub noise_sigma: f64,
    /// Half-width of the uniform elevation jitter, degrees.
    pub elevation_jitter_deg: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_views: 24,
            image_size: 32,
            samples_per_cell: 10,
            train_split: 0.8,
            strip_fraction: 0.0,
            background_fraction: 0.1,
            noise_sigma: 0.03,
            elevation_jitter_deg: 5.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.n_classes >= usize::from(u16::MAX) {
            return fail(format!("n_classes must be in 1..65535, got {}", self.n_classes));
        }
        if self.n_views < 2 || self.n_views % 2 != 0 {
            return fail(format!("n_views must be even and at least 2, got {}", self.n_views));
        }
        if self.image_size < 4 || self.image_size > usize::from(u16::MAX) {
            return fail(format!("image_size {} out of range", self.image_size));
        }
        if self.samples_per_cell == 0 {
            return fail("samples_per_cell must be positive".into());
        }
        for (name, v) in [
            ("train_split", self.train_split),
            ("strip_fraction", self.strip_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return fail(format!("background_fraction must lie in [0, 1), got {}", self.background_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=MAX_ELEVATION_JITTER_DEG).contains(&self.elevation_jitter_deg) {
            return fail(format!(
                "elevation_jitter_deg must lie in [0, {MAX_ELEVATION_JITTER_DEG}], got {}",
                self.elevation_jitter_deg
            ));
        }
        Ok(())
    }

    /// Training samples per cell; the rest of the cell is validation.
    pub fn train_per_cell(&self) -> usize {
        (self.train_split * self.samples_per_cell as f64).round() as usize
    }

    /// Background crops added to a split holding `foreground` objects.
    pub fn background_count(&self, foreground: usize) -> usize {
        let f = self.background_fraction;
        (f * foreground as f64 / (1.0 - f)).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub shapes: Vec<WireShape>,
    pub train: Dataset,
    pub val: Dataset,
}

/// The per-category shapes used by a configuration.
pub fn dataset_shapes(config: &GenConfig) -> Result<Vec<WireShape>> {
    (1..=config.n_classes)
        .map(|c| make_shape(c, mix(&[config.seed, 0x5a9e]), config.n_views, config.image_size))
        .collect()
}

/// Generates both splits. Each `(category, bin)` cell contributes
/// `samples_per_cell` objects with azimuths uniform inside the bin; the
/// first `train_per_cell` of them are training samples.
pub fn generate_dataset(config: &GenConfig) -> Result<GeneratedData> {
    config.validate()?;
    let shapes = dataset_shapes(config)?;
    let n_train = config.train_per_cell();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (ci, shape) in shapes.iter().enumerate() {
        for bin in 0..config.n_views {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 1, ci as u64, bin as u64]));
            for i in 0..config.samples_per_cell {
                let mut sample = object_sample(config, shape, bin, &mut rng)?;
                let strip = rng.gen::<f64>() < config.strip_fraction;
                if i < n_train {
                    if strip {
                        sample.azimuth = None;
                    }
                    train.push(sample);
                } else {
                    val.push(sample);
                }
            }
        }
    }
    let n_bg_train = config.background_count(train.len());
    let n_bg_val = config.background_count(val.len());
    for i in 0..n_bg_train {
        train.push(background_sample(config, mix(&[config.seed, 2, 0, i as u64])));
    }
    for i in 0..n_bg_val {
        val.push(background_sample(config, mix(&[config.seed, 2, 1, i as u64])));
    }
    let wrap = |samples| Dataset {
        image_size: config.image_size,
        n_classes: config.n_classes,
        n_views: config.n_views,
        samples,
    };
    Ok(GeneratedData { shapes, train: wrap(train), val: wrap(val) })
}

fn object_sample(config: &GenConfig, shape: &WireShape, bin: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = config.n_views;
    let width = TAU / n as f64;
    let azimuth = loop {
        let theta = bin_angle(bin, n) + (rng.gen::<f64>() - 0.5) * width;
        let a = to_f32_azimuth(theta);
        if azimuth_bin(f64::from(a), n) == bin {
            break a;
        }
    };
    let label = u16::try_from(shape.category).map_err(|_| Error::Generation("category overflows u16".into()))?;
    let g = config.image_size as f64;
    let pts = project(shape, f64::from(azimuth), elevation_for(config, label, azimuth));
    let (u0, u1, v0, v1) = extents(&pts);
    let (du, dv) = (u1 - u0, v1 - v0);
    let scale = NOMINAL_BOX_FILL * g * rng.gen_range(0.9..1.1) / du.max(dv);
    let (w, h) = (du * scale, dv * scale);
    let cx = g / 2.0 + rng.gen_range(-0.1..0.1) * w;
    let cy = g / 2.0 + rng.gen_range(-0.1..0.1) * h;
    let mut sample = Sample {
        image: Vec::new(),
        label,
        azimuth: Some(azimuth),
        bbox: [cx as f32, cy as f32, w as f32, h as f32],
    };
    sample.image = render_stored(config, shape, &sample, azimuth);
    Ok(sample)
}

/// Renders a foreground sample from its stored label, azimuth and box.
///
/// Elevation jitter and noise seed are functions of that metadata, so this
/// reproduces the generated image bit for bit.
pub fn rerender(config: &GenConfig, shapes: &[WireShape], sample: &Sample) -> Result<Vec<f32>> {
    let label = usize::from(sample.label);
    let shape = label
        .checked_sub(1)
        .and_then(|i| shapes.get(i))
        .ok_or(Error::Index { index: label, extent: shapes.len() + 1 })?;
    let azimuth = sample
        .azimuth
        .ok_or_else(|| Error::Contract("cannot re-render an unannotated sample".into()))?;
    Ok(render_stored(config, shape, sample, azimuth))
}

fn elevation_for(config: &GenConfig, label: u16, azimuth: f32) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 3, u64::from(label), u64::from(azimuth.to_bits())]));
    (rng.gen_range(-1.0..=1.0) * config.elevation_jitter_deg).to_radians()
}

fn render_stored(config: &GenConfig, shape: &WireShape, sample: &Sample, azimuth: f32) -> Vec<f32> {
    let elevation_jitter = elevation_for(config, sample.label, azimuth);
    let azimuth = f64::from(azimuth);
    let (u0, u1, v0, v1) = extents(&project(shape, azimuth, elevation_jitter));
    let [cx, cy, w, h] = sample.bbox.map(f64::from);
    let half = config.image_size as f64 / 2.0;
    let (du, dv) = (u1 - u0, v1 - v0);
    let scale = if du >= dv { w / du } else { h / dv };
    let pose = Pose {
        azimuth,
        elevation_jitter,
        placement: Placement { offset_x: cx - half, offset_y: half - cy, scale },
    };
    let mut words = vec![config.seed, 4, u64::from(sample.label), u64::from(azimuth.to_bits())];
    words.extend(sample.bbox.iter().map(|b| u64::from(b.to_bits())));
    render(shape, &pose, config.noise_sigma, mix(&words), config.image_size)
}

/// A crop with a few random strokes and noise, labelled background.
fn background_sample(config: &GenConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let half = size as f64 / 2.0;
    let n_strokes = rng.gen_range(2..=4);
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n_strokes {
        let a = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        let len = rng.gen_range(0.15..0.45) * size as f64;
        let dir = rng.gen_range(0.0..TAU);
        vertices.push([a[0], a[1], rng.gen_range(-0.5..0.5)]);
        vertices.push([a[0] + len * dir.cos(), a[1] + len * dir.sin(), rng.gen_range(-0.5..0.5)]);
        edges.push((2 * i, 2 * i + 1));
    }
    let img = draw_segments(&vertices, &edges, size);
    let frame = crop_frame(size);
    Sample {
        image: finish(img, config.noise_sigma, rng.gen()),
        label: 0,
        azimuth: None,
        bbox: [frame.cx as f32, frame.cy as f32, frame.w as f32, frame.h as f32],
    }
}

/// Rounds an azimuth to single precision while staying inside (−π, π].
pub fn to_f32_azimuth(theta: f64) -> f32 {
    let mut a = crate::head::wrap_angle(theta) as f32;
    if f64::from(a) > PI {
        a = f32::from_bits(a.to_bits() - 1);
    }
    if f64::from(a) <= -PI {
        a = -f32::from_bits((-a).to_bits() - 1);
    }
    a
}

/// SplitMix64 fold of several words into one seed.
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
