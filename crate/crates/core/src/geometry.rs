//! Bounding-box representations, conversions, overlap computation, and
//! covariance reparameterization.
//!
//! Two box parameterizations are supported: normalized center/size
//! (`cx, cy, w, h` in `[0,1]`, the decoder's native frame) and absolute
//! corners (`x1, y1, x2, y2` in pixels, the evaluation/export frame).
//! Conversion between them is an exact linear map, so box covariances
//! transform by the congruence `J Σ Jᵀ` with a constant Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// Center-x, center-y, width, height; unitless in `[0,1]`.
    CxcywhNorm,
    /// X-min, y-min, x-max, y-max in absolute pixels.
    XyxyAbs,
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::Dimension(format!(
                "degenerate image size {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }
}

/// An axis-aligned bounding box tagged with its parameterization.
///
/// Degenerate (zero-area) boxes are rejected at construction; they poison
/// IoU and covariance computations downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    param: Parameterization,
    coords: [f64; 4],
}

impl BBox {
    /// Normalized center/size box. All four coordinates must lie in `[0,1]`
    /// and width/height must be strictly positive.
    pub fn cxcywh_norm(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let coords = [cx, cy, w, h];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(Error::Dimension(format!(
                "cxcywh coordinates must lie in [0,1], got {coords:?}"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Dimension(format!(
                "degenerate box: width {w}, height {h}"
            )));
        }
        Ok(Self {
            param: Parameterization::CxcywhNorm,
            coords,
        })
    }

    /// Absolute corner box; `x2 > x1` and `y2 > y1` are required.
    pub fn xyxy_abs(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Dimension(format!(
                "non-finite corner coordinates {coords:?}"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Dimension(format!(
                "degenerate box: corners {coords:?}"
            )));
        }
        Ok(Self {
            param: Parameterization::XyxyAbs,
            coords,
        })
    }

    pub fn param(&self) -> Parameterization {
        self.param
    }

    /// Raw coordinates in this box's own parameterization.
    pub fn coords(&self) -> [f64; 4] {
        self.coords
    }

    /// Corner coordinates `[x1, y1, x2, y2]` in this box's own frame
    /// (normalized units for `CxcywhNorm`, pixels for `XyxyAbs`).
    pub fn corners(&self) -> [f64; 4] {
        match self.param {
            Parameterization::CxcywhNorm => {
                let [cx, cy, w, h] = self.coords;
                [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
            }
            Parameterization::XyxyAbs => self.coords,
        }
    }

    /// Box area in this box's own units (normalized² or pixel²).
    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    /// Convert to the target parameterization. The map is exactly linear;
    /// converting back reproduces the input up to rounding.
    pub fn convert(&self, target: Parameterization, image: ImageSize) -> Result<BBox> {
        let (iw, ih) = (image.width, image.height);
        match (self.param, target) {
            (a, b) if a == b => Ok(*self),
            (Parameterization::CxcywhNorm, Parameterization::XyxyAbs) => {
                let [cx, cy, w, h] = self.coords;
                BBox::xyxy_abs(
                    (cx - w / 2.0) * iw,
                    (cy - h / 2.0) * ih,
                    (cx + w / 2.0) * iw,
                    (cy + h / 2.0) * ih,
                )
            }
            (Parameterization::XyxyAbs, Parameterization::CxcywhNorm) => {
                let [x1, y1, x2, y2] = self.coords;
                BBox::cxcywh_norm(
                    (x1 + x2) / 2.0 / iw,
                    (y1 + y2) / 2.0 / ih,
                    (x2 - x1) / iw,
                    (y2 - y1) / ih,
                )
            }
            _ => unreachable!(),
        }
    }
}

/// Intersection-over-union of two boxes in the same parameterization.
///
/// Uses closed intervals: boxes sharing only an edge have intersection
/// area 0 and IoU 0 (standard COCO behavior). Disjoint boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.param != b.param {
        return Err(Error::Parameterization(format!(
            "iou requires matching parameterizations, got {:?} vs {:?}",
            a.param, b.param
        )));
    }
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// A 4×4 box covariance tagged with the parameterization of its box.
///
/// Invariants: symmetric within 1e-9 absolute, eigenvalues ≥ −1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCovariance {
    param: Parameterization,
    m: [[f64; 4]; 4],
}

/// Symmetry tolerance enforced at construction.
pub const COV_SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalue floor enforced at construction.
pub const COV_PSD_TOL: f64 = -1e-9;

impl BoxCovariance {
    pub fn new(param: Parameterization, m: [[f64; 4]; 4]) -> Result<Self> {
        for row in &m {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::Covariance("non-finite entry".into()));
                }
            }
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                if (m[i][j] - m[j][i]).abs() > COV_SYMMETRY_TOL {
                    return Err(Error::Covariance(format!(
                        "asymmetric at ({i},{j}): {} vs {}",
                        m[i][j], m[j][i]
                    )));
                }
            }
        }
        let eigs = sym_eigenvalues4(&m);
        if eigs.iter().any(|&e| e < COV_PSD_TOL) {
            return Err(Error::Covariance(format!(
                "not positive semi-definite, eigenvalues {eigs:?}"
            )));
        }
        Ok(Self { param, m })
    }

    pub fn zero(param: Parameterization) -> Self {
        Self {
            param,
            m: [[0.0; 4]; 4],
        }
    }

    pub fn param(&self) -> Parameterization {
        self.param
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        (0..4).map(|i| self.m[i][i]).sum()
    }

    /// Eigenvalues in ascending order (cyclic Jacobi iteration).
    pub fn eigenvalues(&self) -> [f64; 4] {
        sym_eigenvalues4(&self.m)
    }

    /// Reparameterize via the congruence `Σ' = J Σ Jᵀ`, where `J` is the
    /// constant Jacobian of the (linear) coordinate change. Preserves
    /// positive semi-definiteness exactly.
    pub fn convert(&self, target: Parameterization, image: ImageSize) -> Result<BoxCovariance> {
        if self.param == target {
            return Ok(*self);
        }
        let j = jacobian(self.param, target, image);
        let jt = transpose4(&j);
        let m = mul4(&mul4(&j, &self.m), &jt);
        // Symmetrize away rounding before revalidating.
        let mut sym = [[0.0; 4]; 4];
        for (i, row) in sym.iter_mut().enumerate() {
            for (jx, v) in row.iter_mut().enumerate() {
                *v = (m[i][jx] + m[jx][i]) / 2.0;
            }
        }
        BoxCovariance::new(target, sym)
    }
}

/// Jacobian of the coordinate change `from → to` for image size `(W, H)`.
fn jacobian(from: Parameterization, to: Parameterization, image: ImageSize) -> [[f64; 4]; 4] {
    let (w, h) = (image.width, image.height);
    match (from, to) {
        (Parameterization::CxcywhNorm, Parameterization::XyxyAbs) => [
            [w, 0.0, -w / 2.0, 0.0],
            [0.0, h, 0.0, -h / 2.0],
            [w, 0.0, w / 2.0, 0.0],
            [0.0, h, 0.0, h / 2.0],
        ],
        (Parameterization::XyxyAbs, Parameterization::CxcywhNorm) => [
            [0.5 / w, 0.0, 0.5 / w, 0.0],
            [0.0, 0.5 / h, 0.0, 0.5 / h],
            [-1.0 / w, 0.0, 1.0 / w, 0.0],
            [0.0, -1.0 / h, 0.0, 1.0 / h],
        ],
        _ => [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    }
}

fn mul4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            let aik = a[i][k];
            for j in 0..4 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn transpose4(a: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

/// Eigenvalues of a symmetric 4×4 matrix, ascending (cyclic Jacobi).
pub(crate) fn sym_eigenvalues4(m: &[[f64; 4]; 4]) -> [f64; 4] {
    let mut a = *m;
    let scale = m
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..3 {
            for q in (p + 1)..4 {
                if a[p][q].abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Gᵀ A G with Givens rotation in plane (p, q).
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs = [a[0][0], a[1][1], a[2][2], a[3][3]];
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}
