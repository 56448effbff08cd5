//! Synthetic labeled skeleton motions on the 25-joint layout.
//!
//! Each class is a parameterized movement of a rest-pose template; every
//! sample draws its own amplitude, tempo, phase, camera yaw, camera offset
//! and sensor noise, so classes differ by motion pattern rather than by
//! any fixed coordinate.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, SkeletonSample};
use crate::error::{config_err, Result};

const V: usize = 25;

/// Rest pose in meters, y up, facing the camera (−z).
const TEMPLATE: [[f64; 3]; V] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.30, 0.0],
    [0.0, 0.55, 0.0],
    [0.0, 0.70, 0.0],
    [-0.18, 0.50, 0.0],
    [-0.20, 0.25, 0.0],
    [-0.22, 0.02, 0.0],
    [-0.22, -0.05, 0.0],
    [0.18, 0.50, 0.0],
    [0.20, 0.25, 0.0],
    [0.22, 0.02, 0.0],
    [0.22, -0.05, 0.0],
    [-0.10, -0.02, 0.0],
    [-0.11, -0.45, 0.0],
    [-0.12, -0.85, 0.0],
    [-0.12, -0.90, -0.08],
    [0.10, -0.02, 0.0],
    [0.11, -0.45, 0.0],
    [0.12, -0.85, 0.0],
    [0.12, -0.90, -0.08],
    [0.0, 0.50, 0.0],
    [-0.22, -0.14, 0.0],
    [-0.20, -0.08, -0.02],
    [0.22, -0.14, 0.0],
    [0.20, -0.08, -0.02],
];

const ARM_A: (usize, [usize; 5]) = (4, [5, 6, 7, 21, 22]);
const ARM_B: (usize, [usize; 5]) = (8, [9, 10, 11, 23, 24]);
const LEG_A: (usize, [usize; 3]) = (12, [13, 14, 15]);
const LEG_B: (usize, [usize; 3]) = (16, [17, 18, 19]);
const UPPER: [usize; 16] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    StaticJitter,
    SingleArmWave,
    VerticalBounce,
    BilateralAlternation,
    OtherArmWave,
    BothArmsRaise,
    Bow,
    Kick,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 8] = [
        MotionFamily::StaticJitter,
        MotionFamily::SingleArmWave,
        MotionFamily::VerticalBounce,
        MotionFamily::BilateralAlternation,
        MotionFamily::OtherArmWave,
        MotionFamily::BothArmsRaise,
        MotionFamily::Bow,
        MotionFamily::Kick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::StaticJitter => "static_jitter",
            MotionFamily::SingleArmWave => "single_arm_wave",
            MotionFamily::VerticalBounce => "vertical_bounce",
            MotionFamily::BilateralAlternation => "bilateral_alternation",
            MotionFamily::OtherArmWave => "other_arm_wave",
            MotionFamily::BothArmsRaise => "both_arms_raise",
            MotionFamily::Bow => "bow",
            MotionFamily::Kick => "kick",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_per_class: usize,
    pub frames: usize,
    pub classes: usize,
    pub bodies: usize,
    pub seed: u64,
    /// Half-width of the uniform per-coordinate sensor noise, meters.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_per_class: 50, frames: 32, classes: 4, bodies: 1, seed: 0, noise: 0.01 }
    }
}

/// Family and tempo multiplier for a class index. Classes past the eighth
/// reuse the families at a faster tempo.
fn class_kind(class: usize) -> (MotionFamily, f64) {
    let fams = MotionFamily::ALL.len();
    (MotionFamily::ALL[class % fams], 1.0 + (class / fams) as f64)
}

fn rotate_about(p: [f64; 3], pivot: [f64; 3], axis: usize, angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let d = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut r = d;
    r[i] = c * d[i] - s * d[j];
    r[j] = s * d[i] + c * d[j];
    [r[0] + pivot[0], r[1] + pivot[1], r[2] + pivot[2]]
}

fn swing(pose: &mut [[f64; 3]; V], pivot: usize, chain: &[usize], axis: usize, angle: f64) {
    let p = pose[pivot];
    for &j in chain {
        pose[j] = rotate_about(pose[j], p, axis, angle);
    }
}

/// Pose at phase `u` (radians) with amplitude scale `a`.
fn pose(family: MotionFamily, u: f64, a: f64) -> [[f64; 3]; V] {
    let mut p = TEMPLATE;
    let raise = 0.5 - 0.5 * u.cos();
    match family {
        MotionFamily::StaticJitter => {}
        MotionFamily::SingleArmWave => {
            swing(&mut p, ARM_A.0, &ARM_A.1, 2, -a * (1.2 + 0.6 * u.sin()));
        }
        MotionFamily::OtherArmWave => {
            swing(&mut p, ARM_B.0, &ARM_B.1, 2, a * (1.2 + 0.6 * u.sin()));
        }
        MotionFamily::VerticalBounce => {
            let d = 0.2 * a * raise;
            for (j, q) in p.iter_mut().enumerate() {
                if ![14, 15, 18, 19].contains(&j) {
                    q[1] -= d;
                }
                if j == 13 || j == 17 {
                    q[2] -= 0.8 * d;
                }
            }
        }
        MotionFamily::BilateralAlternation => {
            let s = 0.6 * a * u.sin();
            swing(&mut p, ARM_A.0, &ARM_A.1, 0, s);
            swing(&mut p, ARM_B.0, &ARM_B.1, 0, -s);
            swing(&mut p, LEG_A.0, &LEG_A.1, 0, -0.6 * s);
            swing(&mut p, LEG_B.0, &LEG_B.1, 0, 0.6 * s);
        }
        MotionFamily::BothArmsRaise => {
            let s = -1.4 * a * raise;
            swing(&mut p, ARM_A.0, &ARM_A.1, 0, s);
            swing(&mut p, ARM_B.0, &ARM_B.1, 0, s);
        }
        MotionFamily::Bow => {
            swing(&mut p, 0, &UPPER, 0, -0.7 * a * raise);
        }
        MotionFamily::Kick => {
            swing(&mut p, LEG_A.0, &LEG_A.1, 0, -1.0 * a * u.sin().max(0.0));
        }
    }
    p
}

fn sample(id: String, class: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SkeletonSample {
    let (family, tempo) = class_kind(class);
    let amp = rng.gen_range(0.7..1.3);
    let cycles = tempo * rng.gen_range(1.5..2.5);
    let phase = rng.gen_range(0.0..TAU);
    let yaw = rng.gen_range(-PI / 6.0..PI / 6.0);
    let offset = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2), rng.gen_range(2.0..3.0)];
    let mut s = SkeletonSample::zeros(id, Some(class), [cfg.frames, cfg.bodies, V, 3]);
    for t in 0..cfg.frames {
        let u = phase + TAU * cycles * t as f64 / cfg.frames as f64;
        let p = pose(family, u, amp);
        for (v, q) in p.iter().enumerate() {
            let r = rotate_about(*q, [0.0; 3], 1, yaw);
            let dst = s.joint_mut(t, 0, v);
            for c in 0..3 {
                let jitter = if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..cfg.noise) } else { 0.0 };
                dst[c] = r[c] + offset[c] + jitter;
            }
        }
    }
    s
}

/// Deterministic labeled dataset, samples ordered class-major within each
/// repetition (`class 0, class 1, ..., class 0, ...`).
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.frames == 0 || cfg.bodies == 0 {
        return config_err("synthetic data needs at least one class, frame and body");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.num_per_class * cfg.classes);
    for i in 0..cfg.num_per_class {
        for class in 0..cfg.classes {
            samples.push(sample(format!("synth-{class:03}-{i:05}"), class, cfg, &mut rng));
        }
    }
    let class_names = (0..cfg.classes)
        .map(|c| {
            let (f, tempo) = class_kind(c);
            if tempo > 1.0 {
                format!("{}_x{}", f.name(), tempo)
            } else {
                f.name().to_string()
            }
        })
        .collect();
    Ok(Dataset::new(samples, class_names, Modality::Joint))
}
