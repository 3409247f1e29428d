//! Cylindrical convolution kernel with reflection-tied parameters.
//!
//! The kernel is a `k × N_v × ch_in × ch_out` array whose `N_v` columns are
//! azimuth bins. Only `(N_v + 2) / 2` columns are stored:
//!
//! ```text
//! column:  0 .. m-1    m       m+1 .. 2m          2m+1
//!          side        front   side (reversed)    rear        m = (N_v - 2) / 2
//! ```
//!
//! The reversed side block reuses the same leaf, so gradients from both
//! halves accumulate. Each view `v` reads a `k × k` window centred on column
//! `v` of the padded cylinder.

use rand::Rng;

use crate::autograd::{concat, tensordot, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PadMode {
    /// Circular continuation: the left pad is the last `⌊k/2⌋` columns.
    #[default]
    Wrap,
    /// Each pad is the horizontally flipped block from the opposite end.
    Flip,
}

impl PadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PadMode::Wrap => "wrap",
            PadMode::Flip => "flip",
        }
    }
}

impl std::str::FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(PadMode::Wrap),
            "flip" => Ok(PadMode::Flip),
            other => Err(Error::Config(format!("unknown pad mode {other:?} (expected wrap or flip)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CylinderGeometry {
    pub k: usize,
    pub n_views: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub pad_mode: PadMode,
}

impl CylinderGeometry {
    pub fn new(k: usize, n_views: usize, ch_in: usize, ch_out: usize, pad_mode: PadMode) -> Result<Self> {
        let g = Self { k, n_views, ch_in, ch_out, pad_mode };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::Config(format!("kernel size k must be odd, got {}", self.k)));
        }
        if self.n_views % 2 != 0 {
            return Err(Error::Config(format!("n_views must be even, got {}", self.n_views)));
        }
        if self.n_views < 4 {
            return Err(Error::Config(format!("n_views must be at least 4, got {}", self.n_views)));
        }
        if self.n_views < self.k {
            return Err(Error::Config(format!(
                "n_views ({}) must be at least the kernel size ({})",
                self.n_views, self.k
            )));
        }
        if self.ch_in == 0 || self.ch_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Width `m` of the side block.
    pub fn side_columns(&self) -> usize {
        (self.n_views - 2) / 2
    }

    pub fn distinct_columns(&self) -> usize {
        self.side_columns() + 2
    }

    pub fn parameter_count(&self) -> usize {
        self.k * self.distinct_columns() * self.ch_in * self.ch_out
    }

    pub fn half_width(&self) -> usize {
        self.k / 2
    }

    pub fn side_shape(&self) -> [usize; 4] {
        [self.k, self.side_columns(), self.ch_in, self.ch_out]
    }

    pub fn end_shape(&self) -> [usize; 4] {
        [self.k, 1, self.ch_in, self.ch_out]
    }

    /// He-initialised `(side, front, rear)` blocks.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> CylinderParams {
        let std = (2.0 / (self.k * self.k * self.ch_in) as f64).sqrt();
        CylinderParams {
            side: Tensor::randn(&self.side_shape(), std, rng),
            front: Tensor::randn(&self.end_shape(), std, rng),
            rear: Tensor::randn(&self.end_shape(), std, rng),
        }
    }
}

/// Stored (untied) parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CylinderParams {
    pub side: Tensor,
    pub front: Tensor,
    pub rear: Tensor,
}

impl CylinderParams {
    pub fn bind<'g>(&self, graph: &'g Graph, geometry: CylinderGeometry) -> Result<CylindricalKernel<'g>> {
        CylindricalKernel::new(
            geometry,
            graph.param(self.side.clone()),
            graph.param(self.front.clone()),
            graph.param(self.rear.clone()),
        )
    }
}

/// Cylinder parameter blocks living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct CylindricalKernel<'g> {
    pub geometry: CylinderGeometry,
    pub side: Var<'g>,
    pub front: Var<'g>,
    pub rear: Var<'g>,
}

impl<'g> CylindricalKernel<'g> {
    pub fn new(geometry: CylinderGeometry, side: Var<'g>, front: Var<'g>, rear: Var<'g>) -> Result<Self> {
        geometry.validate()?;
        let check = |v: Var<'g>, want: [usize; 4], what: &str| {
            if v.shape() != want {
                Err(Error::dim(format!("{what} block has shape {:?}, expected {want:?}", v.shape())))
            } else {
                Ok(())
            }
        };
        check(side, geometry.side_shape(), "side")?;
        check(front, geometry.end_shape(), "front")?;
        check(rear, geometry.end_shape(), "rear")?;
        Ok(Self { geometry, side, front, rear })
    }
}

/// One `F_v` row per viewpoint bin: `[N_v, ch_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewFeatures<'g> {
    pub values: Var<'g>,
}

impl<'g> ViewFeatures<'g> {
    pub fn new(values: Var<'g>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::dim(format!("view features must be [N_v, ch], got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn n_views(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Assembles `[side, front, h(side), rear]` into `[k, N_v, ch_in, ch_out]`.
pub fn build_cylinder<'g>(kernel: &CylindricalKernel<'g>) -> Result<Var<'g>> {
    let mirrored = kernel.side.flip(1)?;
    concat(&[kernel.side, kernel.front, mirrored, kernel.rear], 1)
}

/// Pads the column axis by `⌊k/2⌋` on each side.
pub fn pad_cylinder<'g>(full: Var<'g>, k: usize, mode: PadMode) -> Result<Var<'g>> {
    let shape = full.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("cylinder must be rank 4, got {shape:?}")));
    }
    let n = shape[1];
    let r = k / 2;
    if r == 0 {
        return Ok(full);
    }
    if r > n {
        return Err(Error::dim(format!("pad width {r} exceeds {n} columns")));
    }
    let (left, right) = match mode {
        PadMode::Wrap => (full.slice_wrap(1, -(r as isize), r)?, full.slice_wrap(1, 0, r)?),
        PadMode::Flip => (
            full.slice_wrap(1, (n - r) as isize, r)?.flip(1)?,
            full.slice_wrap(1, 0, r)?.flip(1)?,
        ),
    };
    concat(&[left, full, right], 1)
}

/// The `k × k` kernel of view `v`: padded columns `v .. v + k`.
pub fn extract_view_kernel<'g>(padded: Var<'g>, k: usize, v: usize) -> Result<Var<'g>> {
    let shape = padded.shape();
    if shape.len() != 4 || shape[1] < 2 * (k / 2) + 1 {
        return Err(Error::dim(format!("padded cylinder has shape {shape:?} for k = {k}")));
    }
    let n_views = shape[1] - 2 * (k / 2);
    if v >= n_views {
        return Err(Error::Index { index: v, extent: n_views });
    }
    padded.slice_wrap(1, v as isize, k)
}

/// Per-view responses for a single ROI feature `x: [k, k, ch_in]`.
pub fn view_specific_features<'g>(x: Var<'g>, kernel: &CylindricalKernel<'g>) -> Result<ViewFeatures<'g>> {
    let g = kernel.geometry;
    if x.shape() != [g.k, g.k, g.ch_in] {
        return Err(Error::dim(format!(
            "ROI feature has shape {:?}, expected [{}, {}, {}]",
            x.shape(),
            g.k,
            g.k,
            g.ch_in
        )));
    }
    let batched = view_specific_features_batch(x.reshape(&[1, g.k, g.k, g.ch_in])?, kernel)?;
    ViewFeatures::new(batched.reshape(&[g.n_views, g.ch_out])?)
}

/// Batched form: `x: [B, k, k, ch_in]` to `[N_v, B, ch_out]`.
pub fn view_specific_features_batch<'g>(x: Var<'g>, kernel: &CylindricalKernel<'g>) -> Result<Var<'g>> {
    let g = kernel.geometry;
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != [g.k, g.k, g.ch_in] {
        return Err(Error::dim(format!(
            "ROI batch has shape {xs:?}, expected [B, {}, {}, {}]",
            g.k, g.k, g.ch_in
        )));
    }
    let batch = xs[0];
    let padded = pad_cylinder(build_cylinder(kernel)?, g.k, g.pad_mode)?;
    let rows = (0..g.n_views)
        .map(|v| {
            let w = extract_view_kernel(padded, g.k, v)?;
            tensordot(x, w, &[(1, 0), (2, 1), (3, 2)])?.reshape(&[1, batch, g.ch_out])
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&rows, 0)
}

/// Bin whose kernel is the horizontal mirror of bin `v`'s kernel.
pub fn mirror_view(v: usize, n_views: usize) -> usize {
    let m = (n_views - 2) / 2;
    (2 * m + n_views - v % n_views) % n_views
}

/// Bin centre angle in radians.
pub fn bin_angle(v: usize, n_views: usize) -> f64 {
    v as f64 * std::f64::consts::TAU / n_views as f64
}
