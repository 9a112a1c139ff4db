//! Two-view geometry and the ground-truth signals derived from it.
//!
//! Pixel centers sit at integer coordinates `(x, y)`. Coarse cell `(r, c)`
//! covers pixels `[8c, 8c+8) × [8r, 8r+8)` and is anchored at its center
//! pixel `(8c+4, 8r+4)`. A point belongs to cell `(⌊y/8⌋, ⌊x/8⌋)`, which is
//! also the cell whose anchor is nearest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::pruning::Side;
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

pub const COARSE_STRIDE: usize = 8;

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    core::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    core::array::from_fn(|i| core::array::from_fn(|j| a[j][i]))
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn mat3_inverse(a: &Mat3) -> Result<Mat3> {
    let det = mat3_det(a);
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-14 * scale * scale * scale {
        return Err(Error::Geometry(format!("singular 3x3 matrix (det {det:e})")));
    }
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    Ok(core::array::from_fn(|i| core::array::from_fn(|j| adj[i][j] / det)))
}

/// Applies a homography to a pixel. `None` when the point maps to infinity.
pub fn apply_homography(h: &Mat3, p: [f64; 2]) -> Option<[f64; 2]> {
    let q = mat3_vec(h, [p[0], p[1], 1.0]);
    if q[2].abs() < 1e-12 {
        return None;
    }
    Some([q[0] / q[2], q[1] / q[2]])
}

/// Rotation matrix from an axis-angle vector (radians).
pub fn rotation_from_axis_angle(w: [f64; 3]) -> Mat3 {
    let theta = math::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    if theta < 1e-15 {
        return IDENTITY3;
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (s, c) = (math::sin(theta), math::cos(theta));
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let kx2 = mat3_mul(&kx, &kx);
    core::array::from_fn(|i| core::array::from_fn(|j| IDENTITY3[i][j] + s * kx[i][j] + (1.0 - c) * kx2[i][j]))
}

/// Rigid transform taking camera-A coordinates to camera-B coordinates:
/// `X_B = R·X_A + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let r = mat3_vec(&self.rotation, x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.rotation);
        let t = mat3_vec(&rt, self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Row-major `[R | t]`, 12 values.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[4 * i..4 * i + 3].copy_from_slice(&self.rotation[i]);
            out[4 * i + 3] = self.translation[i];
        }
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Self {
        Self {
            rotation: core::array::from_fn(|i| [v[4 * i], v[4 * i + 1], v[4 * i + 2]]),
            translation: [v[3], v[7], v[11]],
        }
    }
}

/// Homography induced by the plane `n·X = dist` (camera-A frame).
pub fn plane_homography(pose: &Pose, k_a: &Mat3, k_b: &Mat3, normal: [f64; 3], dist: f64) -> Result<Mat3> {
    let mut m = pose.rotation;
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pose.translation[i] * normal[j] / dist;
        }
    }
    let k_a_inv = mat3_inverse(k_a)?;
    Ok(mat3_mul(&mat3_mul(k_b, &m), &k_a_inv))
}

/// One image pair with dense ground truth. Images and depth maps are
/// `[H×W]`; depth 0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub depth_a: Tensor,
    pub depth_b: Tensor,
    pub pose_ab: Pose,
    pub intrinsics_a: Mat3,
    pub intrinsics_b: Mat3,
    pub homography: Option<Mat3>,
}

/// The quantities needed to warp from one side to the other.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub depth_src: &'a Tensor,
    pub depth_dst: &'a Tensor,
    pub pose: Pose,
    pub k_src: &'a Mat3,
    pub k_dst: &'a Mat3,
}

impl PairSample {
    pub fn height(&self) -> usize {
        self.image_a.shape[0]
    }

    pub fn width(&self) -> usize {
        self.image_a.shape[1]
    }

    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.height() / COARSE_STRIDE, self.width() / COARSE_STRIDE)
    }

    /// Warping context from `side` to the opposite image.
    pub fn view(&self, side: Side) -> View<'_> {
        match side {
            Side::A => View {
                depth_src: &self.depth_a,
                depth_dst: &self.depth_b,
                pose: self.pose_ab,
                k_src: &self.intrinsics_a,
                k_dst: &self.intrinsics_b,
            },
            Side::B => View {
                depth_src: &self.depth_b,
                depth_dst: &self.depth_a,
                pose: self.pose_ab.inverse(),
                k_src: &self.intrinsics_b,
                k_dst: &self.intrinsics_a,
            },
        }
    }

    /// Checks shapes, depth sign, intrinsics form and divisibility by 8.
    pub fn validate(&self) -> Result<()> {
        let shape = &self.image_a.shape;
        if shape.len() != 2 {
            return Err(Error::InputShape(format!("image must be [H, W], got {shape:?}")));
        }
        for t in [&self.image_b, &self.depth_a, &self.depth_b] {
            if &t.shape != shape {
                return Err(Error::InputShape(format!("mismatched map shape {:?} vs {shape:?}", t.shape)));
            }
        }
        let (h, w) = (shape[0], shape[1]);
        if h == 0 || w == 0 || h % COARSE_STRIDE != 0 || w % COARSE_STRIDE != 0 {
            return Err(Error::InputShape(format!("{h}x{w} is not a positive multiple of 8")));
        }
        if self.depth_a.data.iter().chain(&self.depth_b.data).any(|d| !(*d >= 0.0)) {
            return Err(Error::Geometry("negative or NaN depth".into()));
        }
        for k in [&self.intrinsics_a, &self.intrinsics_b] {
            if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
                return Err(Error::Geometry("intrinsics must be upper triangular with K[2][2]=1".into()));
            }
            if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
                return Err(Error::Geometry("focal lengths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Pixel coordinates of a coarse cell's anchor.
pub fn coarse_center(cell: usize, coarse_width: usize) -> [f64; 2] {
    let (r, c) = (cell / coarse_width, cell % coarse_width);
    [
        (COARSE_STRIDE * c + COARSE_STRIDE / 2) as f64,
        (COARSE_STRIDE * r + COARSE_STRIDE / 2) as f64,
    ]
}

/// Coarse cell containing a pixel, if inside the grid.
pub fn cell_of(p: [f64; 2], coarse_height: usize, coarse_width: usize) -> Option<usize> {
    let s = COARSE_STRIDE as f64;
    let (cx, cy) = (math::floor(p[0] / s), math::floor(p[1] / s));
    if cx < 0.0 || cy < 0.0 || cx >= coarse_width as f64 || cy >= coarse_height as f64 {
        return None;
    }
    Some(cy as usize * coarse_width + cx as usize)
}

/// Depth at the nearest pixel; 0 outside the image.
pub fn depth_at(depth: &Tensor, p: [f64; 2]) -> f64 {
    let (h, w) = (depth.shape[0], depth.shape[1]);
    let (x, y) = (math::round(p[0]), math::round(p[1]));
    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    depth.data[y as usize * w + x as usize]
}

/// Coarse validity labels: a cell is valid iff the depth at its anchor
/// pixel is positive.
pub fn depth_validity(depth: &Tensor) -> Result<Vec<bool>> {
    if depth.shape.len() != 2 || depth.shape[0] % COARSE_STRIDE != 0 || depth.shape[1] % COARSE_STRIDE != 0 {
        return Err(Error::InputShape(format!("depth {:?} is not [H, W] with H, W divisible by 8", depth.shape)));
    }
    let (hc, wc) = (depth.shape[0] / COARSE_STRIDE, depth.shape[1] / COARSE_STRIDE);
    Ok((0..hc * wc).map(|cell| depth_at(depth, coarse_center(cell, wc)) > 0.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warped {
    pub point: [f64; 2],
    pub visible: bool,
}

/// Back-projects with the source depth (nearest pixel), moves by `pose`
/// and projects with `k_dst`. Visible iff the depth is positive, the point
/// lands in front of the camera and inside `[0,W)×[0,H)`.
pub fn warp_points(points: &[[f64; 2]], depth: &Tensor, pose: &Pose, k_src: &Mat3, k_dst: &Mat3) -> Result<Vec<Warped>> {
    let k_inv = mat3_inverse(k_src)?;
    let (h, w) = (depth.shape[0] as f64, depth.shape[1] as f64);
    Ok(points
        .iter()
        .map(|&p| {
            let z = depth_at(depth, p);
            if !(z > 0.0) {
                return Warped { point: [f64::NAN; 2], visible: false };
            }
            let ray = mat3_vec(&k_inv, [p[0], p[1], 1.0]);
            let x = pose.apply([ray[0] * z, ray[1] * z, ray[2] * z]);
            if !(x[2] > 0.0) {
                return Warped { point: [f64::NAN; 2], visible: false };
            }
            let q = mat3_vec(k_dst, x);
            let pt = [q[0] / q[2], q[1] / q[2]];
            let inside = pt[0] >= 0.0 && pt[1] >= 0.0 && pt[0] < w && pt[1] < h;
            Warped { point: pt, visible: inside }
        })
        .collect())
}

impl View<'_> {
    pub fn warp(&self, points: &[[f64; 2]]) -> Result<Vec<Warped>> {
        warp_points(points, self.depth_src, &self.pose, self.k_src, self.k_dst)
    }

    /// Visible and landing on valid depth in the destination.
    fn covisible(&self, w: &Warped) -> bool {
        w.visible && depth_at(self.depth_dst, w.point) > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CovisMode {
    Pointwise,
    Bbox,
}

/// Co-visibility of every coarse cell on `side`.
///
/// Pointwise: the anchor warps into the other image onto valid depth.
/// Bbox: the anchor has valid depth and lies inside the axis-aligned box
/// enclosing every co-visible pixel.
pub fn covisible_cells(sample: &PairSample, side: Side, mode: CovisMode) -> Result<Vec<bool>> {
    let view = sample.view(side);
    let (hc, wc) = sample.coarse_dims();
    let anchors: Vec<[f64; 2]> = (0..hc * wc).map(|c| coarse_center(c, wc)).collect();
    let warped = view.warp(&anchors)?;
    let pointwise: Vec<bool> = warped.iter().map(|w| view.covisible(w)).collect();
    if mode == CovisMode::Pointwise {
        return Ok(pointwise);
    }
    let (h, w) = (sample.height(), sample.width());
    let pixels: Vec<[f64; 2]> = (0..h * w).map(|i| [(i % w) as f64, (i / w) as f64]).collect();
    let mut bbox: Option<[f64; 4]> = None;
    for (p, wp) in pixels.iter().zip(view.warp(&pixels)?) {
        if view.covisible(&wp) {
            let b = bbox.get_or_insert([p[0], p[1], p[0], p[1]]);
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
    }
    let Some(b) = bbox else {
        return Ok(vec![false; hc * wc]);
    };
    Ok(anchors
        .iter()
        .map(|a| depth_at(view.depth_src, *a) > 0.0 && a[0] >= b[0] && a[0] <= b[2] && a[1] >= b[1] && a[1] <= b[3])
        .collect())
}

/// Co-visibility labels for the selected cells of both sides.
pub fn covisible_labels(
    sample: &PairSample,
    cells_a: &[usize],
    cells_b: &[usize],
    mode: CovisMode,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let full_a = covisible_cells(sample, Side::A, mode)?;
    let full_b = covisible_cells(sample, Side::B, mode)?;
    Ok((
        cells_a.iter().map(|&c| full_a[c]).collect(),
        cells_b.iter().map(|&c| full_b[c]).collect(),
    ))
}

/// Cell each coarse anchor on `side` warps into, if co-visible.
pub fn warped_cells(sample: &PairSample, side: Side) -> Result<Vec<Option<usize>>> {
    let view = sample.view(side);
    let (hc, wc) = sample.coarse_dims();
    let anchors: Vec<[f64; 2]> = (0..hc * wc).map(|c| coarse_center(c, wc)).collect();
    Ok(view
        .warp(&anchors)?
        .iter()
        .map(|w| if view.covisible(w) { cell_of(w.point, hc, wc) } else { None })
        .collect())
}

/// Mutually consistent coarse correspondences over the full grids,
/// `(cell_a, cell_b)` sorted by `cell_a`.
pub fn gt_cell_pairs(sample: &PairSample) -> Result<Vec<(usize, usize)>> {
    let ab = warped_cells(sample, Side::A)?;
    let ba = warped_cells(sample, Side::B)?;
    Ok(ab
        .iter()
        .enumerate()
        .filter_map(|(a, b)| b.filter(|&b| ba[b] == Some(a)).map(|b| (a, b)))
        .collect())
}

/// Ground-truth assignment `[k_a×k_b]` between selected cells.
pub fn gt_coarse_assignment(sample: &PairSample, cells_a: &[usize], cells_b: &[usize]) -> Result<Tensor> {
    let pairs = gt_cell_pairs(sample)?;
    let (hc, wc) = sample.coarse_dims();
    let mut partner = vec![usize::MAX; hc * wc];
    for &(a, b) in &pairs {
        partner[a] = b;
    }
    let mut col_of = vec![usize::MAX; hc * wc];
    for (j, &b) in cells_b.iter().enumerate() {
        col_of[b] = j;
    }
    let (ka, kb) = (cells_a.len(), cells_b.len());
    let mut data = vec![0.0; ka * kb];
    for (i, &a) in cells_a.iter().enumerate() {
        let b = partner[a];
        if b != usize::MAX && col_of[b] != usize::MAX {
            data[i * kb + col_of[b]] = 1.0;
        }
    }
    Tensor::new(&[ka, kb], data)
}
