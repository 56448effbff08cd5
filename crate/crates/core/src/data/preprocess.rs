//! Per-sample preprocessing, modality derivation and augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, SkeletonSample};
use crate::error::{config_err, Result};
use crate::skeleton::SkeletonTopology;

/// Per-body energy: the standard deviation of each coordinate over time,
/// averaged over joints and channels. A motionless body scores zero.
pub(crate) fn body_energy(s: &SkeletonSample, m: usize) -> f64 {
    let n = s.frames as f64;
    let mut total = 0.0;
    for v in 0..s.joints {
        for c in 0..s.channels {
            let mean = (0..s.frames).map(|t| s.joint(t, m, v)[c]).sum::<f64>() / n;
            let var = (0..s.frames).map(|t| (s.joint(t, m, v)[c] - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
    }
    total / (s.joints * s.channels) as f64
}

/// Keeps the `keep` most energetic bodies (ties: lower original index
/// first), zero-padding when fewer exist.
pub fn select_bodies_by_energy(s: &SkeletonSample, keep: usize) -> Result<SkeletonSample> {
    if keep == 0 {
        return config_err("must keep at least one body");
    }
    let mut order: Vec<(usize, f64)> = (0..s.bodies).map(|m| (m, body_energy(s, m))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = SkeletonSample::zeros(s.id.clone(), s.label, [s.frames, keep, s.joints, s.channels]);
    for (slot, &(m, _)) in order.iter().take(keep).enumerate() {
        for t in 0..s.frames {
            out.body_frame_mut(t, slot).copy_from_slice(s.body_frame(t, m));
        }
    }
    Ok(out)
}

/// Subtracts each populated body's center joint, frame by frame.
pub fn center_on_spine(s: &SkeletonSample, center_joint: usize) -> Result<SkeletonSample> {
    if center_joint >= s.joints {
        return config_err(format!("center joint {center_joint} out of range for {} joints", s.joints));
    }
    let mut out = s.clone();
    let c = s.channels;
    for t in 0..s.frames {
        for m in 0..s.bodies {
            if !s.is_populated(t, m) {
                continue;
            }
            let origin = s.joint(t, m, center_joint).to_vec();
            for chunk in out.body_frame_mut(t, m).chunks_exact_mut(c) {
                for (x, o) in chunk.iter_mut().zip(&origin) {
                    *x -= o;
                }
            }
        }
    }
    Ok(out)
}

/// Zero-based joints defining the canonical axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignJoints {
    pub right_shoulder: usize,
    pub left_shoulder: usize,
    pub spine_base: usize,
    pub spine: usize,
}

impl Default for AlignJoints {
    /// NTU joints 5, 9, 21 and 2 in the dataset's one-based numbering.
    fn default() -> Self {
        Self { right_shoulder: 4, left_shoulder: 8, spine_base: 20, spine: 1 }
    }
}

type Vec3 = [f64; 3];

fn sub(a: &[f64], b: &[f64]) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn apply_rows(rows: &[Vec3; 3], p: &mut [f64]) {
    let v = [p[0], p[1], p[2]];
    for (i, r) in rows.iter().enumerate() {
        p[i] = dot(*r, v);
    }
}

fn rotate_populated(s: &mut SkeletonSample, rows: &[Vec3; 3], shift: Vec3) {
    let c = s.channels;
    for t in 0..s.frames {
        for m in 0..s.bodies {
            if !s.is_populated(t, m) {
                continue;
            }
            for p in s.body_frame_mut(t, m).chunks_exact_mut(c) {
                apply_rows(rows, p);
                for k in 0..3 {
                    p[k] += shift[k];
                }
            }
        }
    }
}

/// Rotates the whole sample so the shoulder line is the X axis and the
/// spine points along Y, using the first frame where body 0 is present.
/// Degenerate references leave the sample unrotated (with a warning).
pub fn align_axes(s: &SkeletonSample, joints: AlignJoints) -> Result<SkeletonSample> {
    if s.channels < 3 {
        return config_err(format!("axis alignment needs 3-D coordinates, sample has C={}", s.channels));
    }
    let AlignJoints { right_shoulder, left_shoulder, spine_base, spine } = joints;
    if [right_shoulder, left_shoulder, spine_base, spine].iter().any(|&j| j >= s.joints) {
        return config_err(format!("alignment joints {joints:?} out of range for {} joints", s.joints));
    }
    let Some(t0) = (0..s.frames).find(|&t| s.is_populated(t, 0)) else {
        log::warn!("sample {:?}: no populated frame, skipping alignment", s.id);
        return Ok(s.clone());
    };
    let x = sub(s.joint(t0, 0, left_shoulder), s.joint(t0, 0, right_shoulder));
    let y = sub(s.joint(t0, 0, spine), s.joint(t0, 0, spine_base));
    let nx = norm(x);
    if nx < 1e-8 || norm(y) < 1e-8 {
        log::warn!("sample {:?}: degenerate reference vectors, skipping alignment", s.id);
        return Ok(s.clone());
    }
    let u1 = scale(x, 1.0 / nx);
    let y_perp = sub(&y, &scale(u1, dot(y, u1)));
    let ny = norm(y_perp);
    if ny < 1e-8 * norm(y) {
        log::warn!("sample {:?}: collinear reference vectors, skipping alignment", s.id);
        return Ok(s.clone());
    }
    let u2 = scale(y_perp, 1.0 / ny);
    let u3 = cross(u1, u2);
    let mut out = s.clone();
    rotate_populated(&mut out, &[u1, u2, u3], [0.0; 3]);
    Ok(out)
}

/// Repeats the sequence cyclically up to `target` frames; longer
/// sequences keep their first `target` frames.
pub fn pad_frames(s: &SkeletonSample, target: usize) -> Result<SkeletonSample> {
    if target == 0 {
        return config_err("target frame count must be positive");
    }
    let per_frame = s.bodies * s.joints * s.channels;
    let mut data = Vec::with_capacity(target * per_frame);
    for t in 0..target {
        let src = t % s.frames;
        data.extend_from_slice(&s.data[src * per_frame..(src + 1) * per_frame]);
    }
    SkeletonSample::new(s.id.clone(), s.label, [target, s.bodies, s.joints, s.channels], data)
}

/// Bone vectors: each joint holds `joint − parent`, the root holds zeros.
pub fn derive_bones(s: &SkeletonSample, topo: &SkeletonTopology) -> Result<SkeletonSample> {
    if topo.num_joints != s.joints {
        return config_err(format!("topology has {} joints, sample has {}", topo.num_joints, s.joints));
    }
    let parents = topo.parents()?;
    let mut out = s.clone();
    for t in 0..s.frames {
        for m in 0..s.bodies {
            for (v, parent) in parents.iter().enumerate() {
                let dst = out.joint_mut(t, m, v);
                match parent {
                    Some(p) => {
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d = s.joint(t, m, v)[c] - s.joint(t, m, *p)[c];
                        }
                    }
                    None => dst.fill(0.0),
                }
            }
        }
    }
    Ok(out)
}

/// Frame `t` holds `frame(t+1) − frame(t)`; the last frame is zero.
pub fn derive_motion(s: &SkeletonSample) -> SkeletonSample {
    let per_frame = s.bodies * s.joints * s.channels;
    let mut out = s.clone();
    for t in 0..s.frames {
        let dst = &mut out.data[t * per_frame..(t + 1) * per_frame];
        if t + 1 == s.frames {
            dst.fill(0.0);
        } else {
            let (cur, next) = (&s.data[t * per_frame..], &s.data[(t + 1) * per_frame..]);
            for (i, d) in dst.iter_mut().enumerate() {
                *d = next[i] - cur[i];
            }
        }
    }
    out
}

pub fn derive_modality(s: &SkeletonSample, modality: Modality, topo: &SkeletonTopology) -> Result<SkeletonSample> {
    Ok(match modality {
        Modality::Joint => s.clone(),
        Modality::Bone => derive_bones(s, topo)?,
        Modality::JointMotion => derive_motion(s),
        Modality::BoneMotion => derive_motion(&derive_bones(s, topo)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub keep_bodies: usize,
    /// `None` skips centering (2-D data).
    pub center_joint: Option<usize>,
    /// `None` skips axis alignment (2-D data).
    pub align: Option<AlignJoints>,
    pub target_frames: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { keep_bodies: 2, center_joint: Some(1), align: Some(AlignJoints::default()), target_frames: 300 }
    }
}

/// select bodies → center → align → pad.
pub fn preprocess_sample(s: &SkeletonSample, cfg: &PreprocessConfig) -> Result<SkeletonSample> {
    let mut out = select_bodies_by_energy(s, cfg.keep_bodies)?;
    if let Some(c) = cfg.center_joint {
        out = center_on_spine(&out, c)?;
    }
    if let Some(a) = cfg.align {
        out = align_axes(&out, a)?;
    }
    pad_frames(&out, cfg.target_frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rot_deg: f64,
    pub max_translate: f64,
    /// Contiguous crop length; `None` keeps every frame.
    pub crop_frames: Option<usize>,
    /// 3 rotates about all three axes; 2 rotates in the image plane only.
    pub coord_dims: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rot_deg: 17.0, max_translate: 0.1, crop_frames: Some(150), coord_dims: 3 }
    }
}

fn rotation(ax: f64, ay: f64, az: f64) -> [Vec3; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    // Rz · Ry · Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Random contiguous crop plus one rigid rotation and translation for the
/// whole sample. Absent bodies stay zero. A pure function of its inputs.
pub fn augment_random(s: &SkeletonSample, seed: u64, cfg: &AugmentConfig) -> Result<SkeletonSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = cfg.crop_frames.unwrap_or(s.frames);
    if crop == 0 || crop > s.frames {
        return config_err(format!("crop of {crop} frames does not fit a {}-frame sample", s.frames));
    }
    if !(2..=3).contains(&cfg.coord_dims) || cfg.coord_dims > s.channels {
        return config_err(format!("augmentation over {} coordinates needs that many channels", cfg.coord_dims));
    }
    let start = rng.gen_range(0..=s.frames - crop);
    let per_frame = s.bodies * s.joints * s.channels;
    let data = s.data[start * per_frame..(start + crop) * per_frame].to_vec();
    let mut out = SkeletonSample::new(s.id.clone(), s.label, [crop, s.bodies, s.joints, s.channels], data)?;

    let r = cfg.max_rot_deg.to_radians();
    let mut angle = || if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (ax, ay, az) = (angle(), angle(), angle());
    let d = cfg.max_translate;
    let mut offset = || if d > 0.0 { rng.gen_range(-d..=d) } else { 0.0 };
    let shift = [offset(), offset(), offset()];
    let c = s.channels;
    if cfg.coord_dims == 3 {
        rotate_populated(&mut out, &rotation(ax, ay, az), shift);
    } else {
        let (sz, cz) = az.sin_cos();
        for t in 0..out.frames {
            for m in 0..out.bodies {
                if !out.is_populated(t, m) {
                    continue;
                }
                for p in out.body_frame_mut(t, m).chunks_exact_mut(c) {
                    let (x, y) = (p[0], p[1]);
                    p[0] = cz * x - sz * y + shift[0];
                    p[1] = sz * x + cz * y + shift[1];
                }
            }
        }
    }
    Ok(out)
}
