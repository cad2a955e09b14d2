//! Synthetic flow with known ground truth: the first-order motion field of a
//! pinhole camera over a depth model.
//!
//! For a centered pixel (x, y) at depth Z the field is
//!
//! ```text
//! u = (-f·τx + x·τz)/Z + (x·y/f)·θx - (f + x²/f)·θy + y·θz
//! v = (-f·τy + y·τz)/Z + (f + y²/f)·θx - (x·y/f)·θy - x·θz
//! ```
//!
//! which is linear in the motion vector at fixed depth and linear in inverse
//! depth at fixed translation; the rotational part never touches Z. Those
//! exactness properties are what make the generator a usable oracle.

use crate::flow::{self, FlowError, FlowField, SequenceManifest};
use crate::geometry::MotionVector;
use crate::rng::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("nonpositive depth {0} at pixel ({1}, {2})")]
    Depth(f64, usize, usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Pinhole intrinsics; the principal point must lie inside the image.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn new(focal: f64, height: usize, width: usize) -> Result<Self> {
        let cam = Camera {
            focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(SynthError::Camera(format!("focal {} must be > 0", self.focal)));
        }
        if self.cx < 0.0
            || self.cy < 0.0
            || self.cx > (self.width - 1) as f64
            || self.cy > (self.height - 1) as f64
        {
            return Err(SynthError::Camera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Default generator camera: f = 300 at the network input scale.
    pub fn network_default() -> Camera {
        Camera::new(300.0, 94, 300).expect("default camera is valid")
    }
}

/// Scene depth per pixel, in meters.
#[derive(Clone, Debug)]
pub enum DepthModel {
    Constant(f64),
    /// Fronto-parallel ramp, linear in the image row: `top` meters at row 0
    /// down to `bottom` meters at the last row (a road-like far-to-near
    /// gradient when top > bottom).
    Ramp { top: f64, bottom: f64 },
    /// Explicit per-pixel depth, row-major, height*width values.
    PerPixel {
        height: usize,
        width: usize,
        depths: Vec<f64>,
    },
}

impl DepthModel {
    pub fn depth_at(&self, row: usize, col: usize, cam: &Camera) -> f64 {
        match self {
            DepthModel::Constant(z) => *z,
            DepthModel::Ramp { top, bottom } => {
                let t = if cam.height > 1 {
                    row as f64 / (cam.height - 1) as f64
                } else {
                    0.0
                };
                top + (bottom - top) * t
            }
            DepthModel::PerPixel { width, depths, .. } => depths[row * width + col],
        }
    }

    fn validate(&self, cam: &Camera) -> Result<()> {
        match self {
            DepthModel::PerPixel {
                height,
                width,
                depths,
            } => {
                if (*height, *width) != (cam.height, cam.width)
                    || depths.len() != height * width
                {
                    return Err(SynthError::Camera(format!(
                        "depth map {height}x{width} does not match camera {}x{}",
                        cam.height, cam.width
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Dense first-order motion field for camera motion `y` over the given
/// depth. Valid in the small-motion regime (‖θ‖ ≲ 0.2 rad and
/// ‖τ‖/min(Z) ≲ 0.2); errors on nonpositive depth.
pub fn motion_field(cam: &Camera, depth: &DepthModel, y: &MotionVector) -> Result<FlowField> {
    cam.validate()?;
    depth.validate(cam)?;
    let f = cam.focal;
    let [tx, ty, tz] = y.translation;
    let [rx, ry, rz] = y.rotation;
    let mut field = FlowField::zeros(cam.height, cam.width);
    for row in 0..cam.height {
        let py = row as f64 - cam.cy;
        for col in 0..cam.width {
            let px = col as f64 - cam.cx;
            let z = depth.depth_at(row, col, cam);
            if !(z > 0.0) {
                return Err(SynthError::Depth(z, row, col));
            }
            let inv_z = 1.0 / z;
            let trans_u = (-f * tx + px * tz) * inv_z;
            let trans_v = (-f * ty + py * tz) * inv_z;
            let rot_u = (px * py / f) * rx - (f + px * px / f) * ry + py * rz;
            let rot_v = (f + py * py / f) * rx - (px * py / f) * ry - px * rz;
            field.set(row, col, trans_u + rot_u, trans_v + rot_v);
        }
    }
    Ok(field)
}

/// Randomized frame-to-frame motion distribution. Each sample draws one
/// dynamics multiplier (the d1/d3 mixing lives here) and scales the whole
/// motion vector by it.
#[derive(Clone, Debug)]
pub struct MotionSpec {
    pub dynamics: Vec<f64>,
    pub forward: (f64, f64),
    pub lateral: (f64, f64),
    pub vertical: (f64, f64),
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
}

impl MotionSpec {
    /// Driving-like defaults: dominant forward motion with yaw as the main
    /// rotation, matching the dynamics the estimator is meant to learn.
    pub fn driving(dynamics: Vec<f64>) -> MotionSpec {
        MotionSpec {
            dynamics,
            forward: (0.6, 1.4),
            lateral: (-0.05, 0.05),
            vertical: (-0.02, 0.02),
            yaw: (-0.02, 0.02),
            pitch: (-0.004, 0.004),
            roll: (-0.002, 0.002),
        }
    }

    /// Sample index `index` of the stream labelled `seed`; deterministic and
    /// order-independent across samples.
    pub fn draw(&self, seed: u64, index: u64) -> MotionVector {
        let mut rng = Rng::stream(seed, index);
        let scale = self.dynamics[rng.below(self.dynamics.len())];
        MotionVector::new(
            [
                scale * rng.range(self.lateral.0, self.lateral.1),
                scale * rng.range(self.vertical.0, self.vertical.1),
                scale * rng.range(self.forward.0, self.forward.1),
            ],
            [
                scale * rng.range(self.pitch.0, self.pitch.1),
                scale * rng.range(self.yaw.0, self.yaw.1),
                scale * rng.range(self.roll.0, self.roll.1),
            ],
        )
    }
}

/// Writes `n` flow/label pairs under `out_dir` (files `{index:06}.flo`) and
/// returns the manifest. Deterministic for a fixed seed.
pub fn generate_dataset(
    n: usize,
    spec: &MotionSpec,
    depth: &DepthModel,
    cam: &Camera,
    seed: u64,
    out_dir: &Path,
    frame_rate: f64,
) -> Result<SequenceManifest> {
    std::fs::create_dir_all(out_dir).map_err(FlowError::Io)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let y = spec.draw(seed, i as u64);
        let field = motion_field(cam, depth, &y)?;
        let path = out_dir.join(format!("{i:06}.flo"));
        flow::write_flo(&field, &path)?;
        entries.push(flow::ManifestEntry {
            flow_path: path,
            label: y,
        });
    }
    Ok(SequenceManifest {
        sequence_id: format!("synth-{seed}"),
        subsample: 1,
        frame_rate,
        entries,
    })
}

/// Exact two-view displacement for the same motion: project the 3-D point of
/// each pixel into the moved camera and subtract pixel positions. Used as
/// the independent oracle for [`motion_field`].
pub fn finite_displacement_field(
    cam: &Camera,
    depth: &DepthModel,
    y: &MotionVector,
) -> Result<FlowField> {
    let pose = crate::geometry::to_se3(y).map_err(|e| SynthError::Camera(e.to_string()))?;
    let r = pose.rotation();
    let t = pose.translation();
    let rt = crate::geometry::mat3_transpose(&r);
    let f = cam.focal;
    let mut field = FlowField::zeros(cam.height, cam.width);
    for row in 0..cam.height {
        let py = row as f64 - cam.cy;
        for col in 0..cam.width {
            let px = col as f64 - cam.cx;
            let z = depth.depth_at(row, col, cam);
            if !(z > 0.0) {
                return Err(SynthError::Depth(z, row, col));
            }
            // Point in frame 1, then expressed in the moved camera frame 2:
            // p2 = Rᵀ (p1 - t).
            let p1 = [px * z / f, py * z / f, z];
            let d = [p1[0] - t[0], p1[1] - t[1], p1[2] - t[2]];
            let p2 = [
                rt[0][0] * d[0] + rt[0][1] * d[1] + rt[0][2] * d[2],
                rt[1][0] * d[0] + rt[1][1] * d[1] + rt[1][2] * d[2],
                rt[2][0] * d[0] + rt[2][1] * d[1] + rt[2][2] * d[2],
            ];
            field.set(
                row,
                col,
                f * p2[0] / p2[2] - px,
                f * p2[1] / p2[2] - py,
            );
        }
    }
    Ok(field)
}
