//! Skeleton sequences: file format, preprocessing, derived modalities,
//! augmentation, synthetic data and minibatch assembly.

mod io;
mod preprocess;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub use io::{
    content_checksum, load_manifest, parse_samples, parse_samples_str, write_samples, write_samples_string, FileMeta,
    Manifest, TOOL_VERSION,
};
pub use preprocess::{
    align_axes, augment_random, center_on_spine, derive_bones, derive_modality, derive_motion, pad_frames,
    preprocess_sample, select_bodies_by_energy, AlignJoints, AugmentConfig, PreprocessConfig,
};
pub use synth::{synth_dataset, MotionFamily, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joint, Modality::Bone, Modality::JointMotion, Modality::BoneMotion];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint_motion",
            Modality::BoneMotion => "bone_motion",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}; expected joint, bone, joint_motion or bone_motion")))
    }
}

/// One labeled sequence, stored flat as `[T][M][V][C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSample {
    pub id: String,
    pub label: Option<usize>,
    pub frames: usize,
    pub bodies: usize,
    pub joints: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SkeletonSample {
    pub fn new(
        id: impl Into<String>,
        label: Option<usize>,
        dims: [usize; 4],
        data: Vec<f64>,
    ) -> Result<Self> {
        let [t, m, v, c] = dims;
        if t == 0 || m == 0 || v == 0 || c == 0 {
            return shape_err(format!("sample dims must be positive, got {dims:?}"));
        }
        if data.len() != t * m * v * c {
            return shape_err(format!("sample data has {} values, dims {dims:?} need {}", data.len(), t * m * v * c));
        }
        Ok(Self { id: id.into(), label, frames: t, bodies: m, joints: v, channels: c, data })
    }

    pub fn zeros(id: impl Into<String>, label: Option<usize>, dims: [usize; 4]) -> Self {
        let n = dims.iter().product();
        Self::new(id, label, dims, vec![0.0; n]).expect("positive dims")
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.bodies, self.joints, self.channels]
    }

    #[inline]
    pub fn offset(&self, t: usize, m: usize, v: usize) -> usize {
        ((t * self.bodies + m) * self.joints + v) * self.channels
    }

    /// Coordinates of one joint.
    pub fn joint(&self, t: usize, m: usize, v: usize) -> &[f64] {
        let o = self.offset(t, m, v);
        &self.data[o..o + self.channels]
    }

    pub fn joint_mut(&mut self, t: usize, m: usize, v: usize) -> &mut [f64] {
        let o = self.offset(t, m, v);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// All joints of one body in one frame, `[V][C]` flat.
    pub fn body_frame(&self, t: usize, m: usize) -> &[f64] {
        let o = self.offset(t, m, 0);
        &self.data[o..o + self.joints * self.channels]
    }

    pub fn body_frame_mut(&mut self, t: usize, m: usize) -> &mut [f64] {
        let o = self.offset(t, m, 0);
        let n = self.joints * self.channels;
        &mut self.data[o..o + n]
    }

    pub fn is_populated(&self, t: usize, m: usize) -> bool {
        self.body_frame(t, m).iter().any(|&x| x != 0.0)
    }

    /// Copy shaped `[C, T, V, M]`, the per-sample slice of a model batch.
    pub fn to_model_layout(&self) -> Vec<f64> {
        let (t, m, v, c) = (self.frames, self.bodies, self.joints, self.channels);
        let mut out = vec![0.0; c * t * v * m];
        for tt in 0..t {
            for mm in 0..m {
                for vv in 0..v {
                    for (cc, &x) in self.joint(tt, mm, vv).iter().enumerate() {
                        out[((cc * t + tt) * v + vv) * m + mm] = x;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SkeletonSample>,
    pub class_names: Vec<String>,
    pub modality: Modality,
}

impl Dataset {
    pub fn new(samples: Vec<SkeletonSample>, class_names: Vec<String>, modality: Modality) -> Self {
        Self { samples, class_names, modality }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shared `[T, M, V, C]`, or an error naming the first sample that differs.
    pub fn common_dims(&self) -> Result<Option<[usize; 4]>> {
        let Some(first) = self.samples.first() else { return Ok(None) };
        let d = first.dims();
        for s in &self.samples[1..] {
            if s.dims() != d {
                return shape_err(format!("sample {:?} has dims {:?}, expected {:?}", s.id, s.dims(), d));
            }
        }
        Ok(Some(d))
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Config(format!("sample {:?} has no label", s.id))))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        let from_labels = self.samples.iter().filter_map(|s| s.label).max().map_or(0, |l| l + 1);
        from_labels.max(self.class_names.len())
    }

    pub fn map_samples(&self, modality: Modality, f: impl Fn(&SkeletonSample) -> Result<SkeletonSample>) -> Result<Self> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, class_names: self.class_names.clone(), modality })
    }
}

/// Stacks samples into a model input `[N, C, T, V, M]`.
pub fn batch_tensor(samples: &[&SkeletonSample]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return config_err("cannot batch zero samples");
    };
    let d = first.dims();
    let mut data = Vec::with_capacity(samples.len() * d.iter().product::<usize>());
    for s in samples {
        if s.dims() != d {
            return shape_err(format!("sample {:?} has dims {:?}, batch expects {:?}", s.id, s.dims(), d));
        }
        data.extend(s.to_model_layout());
    }
    let [t, m, v, c] = d;
    Tensor::new(&[samples.len(), c, t, v, m], data)
}
