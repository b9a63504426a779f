//! Shared domain types: pose layout, frames, control signals, masks and windows,
//! plus the head-canonical coordinate transform.
//!
//! Coordinates are right-handed with `+y` up. The head frame has `+z` along the
//! device's forward direction; a heading (yaw) of `θ` rotates head-local vectors
//! about `+y` so that forward becomes `(sin θ, 0, cos θ)` in world space.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Joint layout of the toy skeleton: head, left wrist, right wrist, then
/// `interior` latent joints. Every joint contributes an `(x, y, z)` triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub interior: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Layout { interior: 4 }
    }
}

impl Layout {
    pub const HEAD: usize = 0;
    pub const WRIST_LEFT: usize = 1;
    pub const WRIST_RIGHT: usize = 2;

    pub fn new(interior: usize) -> Self {
        Layout { interior }
    }

    pub fn joints(&self) -> usize {
        3 + self.interior
    }

    /// Pose vector dimension `D = 3 * (3 + J)`.
    pub fn dim(&self) -> usize {
        3 * self.joints()
    }

    pub fn joint_range(joint: usize) -> std::ops::Range<usize> {
        3 * joint..3 * joint + 3
    }

    pub fn joint(pose: &[f64], joint: usize) -> [f64; 3] {
        let r = Self::joint_range(joint);
        [pose[r.start], pose[r.start + 1], pose[r.start + 2]]
    }

    pub fn set_joint(pose: &mut [f64], joint: usize, value: [f64; 3]) {
        pose[Self::joint_range(joint)].copy_from_slice(&value);
    }

    pub fn full_mask(&self) -> VisibilityMask {
        VisibilityMask {
            bits: vec![true; self.dim()],
        }
    }

    pub fn empty_mask(&self) -> VisibilityMask {
        VisibilityMask {
            bits: vec![false; self.dim()],
        }
    }

    /// Mask of the components an observation anchors: the head always, each
    /// wrist when visible.
    pub fn observation_mask(&self, vis_left: bool, vis_right: bool) -> VisibilityMask {
        let mut mask = self.empty_mask();
        let mut set = |joint: usize| {
            for i in Self::joint_range(joint) {
                mask.bits[i] = true;
            }
        };
        set(Self::HEAD);
        if vis_left {
            set(Self::WRIST_LEFT);
        }
        if vis_right {
            set(Self::WRIST_RIGHT);
        }
        mask
    }
}

/// One time step's pose vector. Depending on context the coordinates are
/// world-frame or head-canonical; the type does not track which.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub pose: Vec<f64>,
}

impl MotionFrame {
    pub fn new(pose: Vec<f64>) -> Self {
        MotionFrame { pose }
    }

    pub fn zeros(dim: usize) -> Self {
        MotionFrame {
            pose: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.pose.len()
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().all(|v| v.is_finite())
    }
}

/// Rigid head pose reduced to a position and a planar heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    #[serde(rename = "p")]
    pub position: [f64; 3],
    pub yaw: f64,
}

impl HeadPose {
    pub fn new(position: [f64; 3], yaw: f64) -> Self {
        HeadPose { position, yaw }
    }

    pub fn identity() -> Self {
        HeadPose {
            position: [0.0; 3],
            yaw: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.yaw.is_finite()
    }

    /// Forward direction in world space.
    pub fn forward(&self) -> [f64; 3] {
        [self.yaw.sin(), 0.0, self.yaw.cos()]
    }

    /// Head-local vector to world orientation (no translation).
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
    }

    /// World orientation to head-local (inverse of [`HeadPose::rotate`]).
    pub fn unrotate(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]]
    }

    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        self.unrotate([
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ])
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotate(p);
        [
            r[0] + self.position[0],
            r[1] + self.position[1],
            r[2] + self.position[2],
        ]
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Head pose plus the two wrist observations at one time step. A wrist is
/// visible exactly when its position is present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSignal {
    pub head: HeadPose,
    pub wrist_left: Option<[f64; 3]>,
    pub wrist_right: Option<[f64; 3]>,
}

impl ControlSignal {
    pub fn head_only(head: HeadPose) -> Self {
        ControlSignal {
            head,
            wrist_left: None,
            wrist_right: None,
        }
    }

    pub fn vis_left(&self) -> bool {
        self.wrist_left.is_some()
    }

    pub fn vis_right(&self) -> bool {
        self.wrist_right.is_some()
    }

    pub fn is_finite(&self) -> bool {
        let wrist_ok = |w: &Option<[f64; 3]>| w.is_none_or(|p| p.iter().all(|v| v.is_finite()));
        self.head.is_finite() && wrist_ok(&self.wrist_left) && wrist_ok(&self.wrist_right)
    }

    /// Canonical-frame anchor pose and mask built from this observation: head
    /// components are zero, visible wrists are expressed in the head frame,
    /// every other component is zero and masked out.
    pub fn canonical_anchor(&self, layout: &Layout) -> Result<(MotionFrame, VisibilityMask)> {
        if !self.is_finite() {
            return Err(Error::InvalidPose("non-finite control signal".into()));
        }
        let mut pose = MotionFrame::zeros(layout.dim());
        if let Some(w) = self.wrist_left {
            Layout::set_joint(&mut pose.pose, Layout::WRIST_LEFT, self.head.to_local(w));
        }
        if let Some(w) = self.wrist_right {
            Layout::set_joint(&mut pose.pose, Layout::WRIST_RIGHT, self.head.to_local(w));
        }
        Ok((pose, layout.observation_mask(self.vis_left(), self.vis_right())))
    }
}

/// Per-component anchoring indicator aligned with a pose vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    pub bits: Vec<bool>,
}

impl VisibilityMask {
    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_all(&self, value: bool) -> bool {
        self.bits.iter().all(|b| *b == value)
    }
}

/// Sliding window of `h + 1 + f` frames at offsets `-h..=f` relative to the
/// current step, with a diffusion level and a mask per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub history: usize,
    pub horizon: usize,
    pub frames: Vec<MotionFrame>,
    pub levels: Vec<usize>,
    pub masks: Vec<VisibilityMask>,
}

impl Window {
    pub fn len_for(history: usize, horizon: usize) -> usize {
        history + 1 + horizon
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Slot index of a signed offset (`-h..=f`).
    pub fn slot(&self, offset: isize) -> usize {
        (offset + self.history as isize) as usize
    }

    pub fn validate(&self, max_level: usize) -> Result<()> {
        let n = Self::len_for(self.history, self.horizon);
        if self.frames.len() != n || self.levels.len() != n || self.masks.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "window expects {n} frames, levels and masks; got {}, {}, {}",
                self.frames.len(),
                self.levels.len(),
                self.masks.len()
            )));
        }
        let dim = self.frames[0].dim();
        for (frame, mask) in self.frames.iter().zip(&self.masks) {
            check_dim(dim, frame.dim())?;
            check_dim(dim, mask.dim())?;
        }
        if let Some(&level) = self.levels.iter().find(|&&k| k > max_level) {
            return Err(Error::LevelOutOfRange {
                level,
                max: max_level,
            });
        }
        Ok(())
    }
}

/// Network input: per frame `[pose; mask]` of dimension `2D`, the level
/// vector, and an optional context matrix (one row per past/current frame).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedWindow {
    pub rows: Vec<Vec<f64>>,
    pub levels: Vec<usize>,
    pub context: Option<Vec<Vec<f64>>>,
}

impl AugmentedWindow {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn pose_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len() / 2)
    }
}

fn check_pose(pose: &[f64], head: &HeadPose) -> Result<()> {
    if pose.len() % 3 != 0 {
        return Err(Error::InvalidPose(format!(
            "pose length {} is not a multiple of 3",
            pose.len()
        )));
    }
    if !head.is_finite() || !pose.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite component".into()));
    }
    Ok(())
}

/// Expresses every joint of a world-frame pose in the head frame.
pub fn canonicalize(frame_world: &MotionFrame, head: &HeadPose) -> Result<MotionFrame> {
    check_pose(&frame_world.pose, head)?;
    let mut pose = vec![0.0; frame_world.dim()];
    for (dst, src) in pose.chunks_exact_mut(3).zip(frame_world.pose.chunks_exact(3)) {
        dst.copy_from_slice(&head.to_local([src[0], src[1], src[2]]));
    }
    Ok(MotionFrame { pose })
}

/// Inverse of [`canonicalize`].
pub fn decanonicalize(frame_canonical: &MotionFrame, head: &HeadPose) -> Result<MotionFrame> {
    check_pose(&frame_canonical.pose, head)?;
    let mut pose = vec![0.0; frame_canonical.dim()];
    for (dst, src) in pose.chunks_exact_mut(3).zip(frame_canonical.pose.chunks_exact(3)) {
        dst.copy_from_slice(&head.to_world([src[0], src[1], src[2]]));
    }
    Ok(MotionFrame { pose })
}

/// Concatenates each frame's pose with its mask.
pub fn assemble_augmented(window: &Window) -> AugmentedWindow {
    let rows = window
        .frames
        .iter()
        .zip(&window.masks)
        .map(|(frame, mask)| {
            let mut row = Vec::with_capacity(2 * frame.dim());
            row.extend_from_slice(&frame.pose);
            row.extend(mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    AugmentedWindow {
        rows,
        levels: window.levels.clone(),
        context: None,
    }
}

/// One line of the JSON Lines sequence format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_world: Option<Vec<f64>>,
    pub head: HeadPose,
    pub wl: Option<[f64; 3]>,
    pub wr: Option<[f64; 3]>,
    pub vl: u8,
    pub vr: u8,
}

impl FrameRecord {
    pub fn new(t: i64, pose_world: Option<Vec<f64>>, obs: &ControlSignal) -> Self {
        FrameRecord {
            t,
            pose_world,
            head: obs.head,
            wl: obs.wrist_left,
            wr: obs.wrist_right,
            vl: obs.vis_left() as u8,
            vr: obs.vis_right() as u8,
        }
    }

    /// Observation carried by the record. A wrist counts as visible only when
    /// its flag is 1 and a position is present.
    pub fn control(&self) -> ControlSignal {
        ControlSignal {
            head: self.head,
            wrist_left: if self.vl == 1 { self.wl } else { None },
            wrist_right: if self.vr == 1 { self.wr } else { None },
        }
    }
}
