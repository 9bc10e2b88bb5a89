//! Synthetic labelled pose sequences with a known phase structure.
//!
//! A video is `K` consecutive phases. Phase `k` holds one joint group in a
//! phase-specific posture and oscillates it at its own frequency, so the
//! phases differ in which joints move, how fast, and where they sit. Poses
//! are built in a body frame (pelvis at the origin, y up, torso length 1),
//! jittered with truncated Gaussian noise, and mapped to pixel coordinates
//! with a per-video camera scale, position and drift.

use crate::pose_io::{joint, PoseSequence, NUM_JOINTS};
use crate::rng::{derive_seed, seeded};
use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_videos: usize,
    /// Inclusive `[min, max]` phase length in frames.
    pub frames_per_phase: [usize; 2],
    pub k: usize,
    /// Oscillation amplitude at the distal joint of the active group (torso units).
    pub amplitude: f64,
    /// Size of the phase-specific posture offset (torso units).
    pub posture: f64,
    /// Oscillation frequency of phase 0 in cycles per frame.
    pub base_frequency: f64,
    /// Frequency increase per phase index.
    pub frequency_step: f64,
    /// Jitter standard deviation (torso units); draws are clipped at 5 sigma.
    pub noise: f64,
    /// Width of the cross-fade between consecutive phases.
    pub blend_frames: usize,
    /// Relative per-video variation of amplitude and frequency.
    pub variation: f64,
    /// Pixels per torso length.
    pub scale: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            frames_per_phase: [25, 25],
            k: 4,
            amplitude: 0.35,
            posture: 0.6,
            base_frequency: 0.05,
            frequency_step: 0.035,
            noise: 0.02,
            blend_frames: 4,
            variation: 0.1,
            scale: 60.0,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        let [lo, hi] = self.frames_per_phase;
        if lo < 1 || lo > hi {
            return bad("frames_per_phase must be a nonempty range of positive lengths");
        }
        if self.num_videos == 0 {
            return bad("num_videos must be positive");
        }
        if !(self.amplitude >= 0.0 && self.posture >= 0.0 && self.noise >= 0.0) {
            return bad("amplitude, posture and noise must be non-negative");
        }
        if !(self.base_frequency > 0.0 && self.frequency_step >= 0.0) {
            return bad("frequencies must be positive");
        }
        if !(0.0..1.0).contains(&self.variation) {
            return bad("variation must lie in [0, 1)");
        }
        if !(self.scale > 0.0 && self.fps > 0.0) {
            return bad("scale and fps must be positive");
        }
        Ok(())
    }

    /// Largest possible distance of any body-frame coordinate from the rest pose.
    pub fn coordinate_bound(&self) -> f64 {
        (1.0 + self.variation) * (self.amplitude + self.posture) + 5.0 * self.noise
    }
}

/// Rest pose in the body frame, `16 x 2`.
pub fn rest_pose() -> Array2<f64> {
    use joint::*;
    let mut p = Array2::zeros((NUM_JOINTS, 2));
    let set = |p: &mut Array2<f64>, j: usize, x: f64, y: f64| {
        p[[j, 0]] = x;
        p[[j, 1]] = y;
    };
    set(&mut p, PELVIS, 0.0, 0.0);
    set(&mut p, THORAX, 0.0, 1.0);
    set(&mut p, UPPER_NECK, 0.0, 1.2);
    set(&mut p, HEAD_TOP, 0.0, 1.55);
    set(&mut p, R_HIP, -0.25, 0.0);
    set(&mut p, R_KNEE, -0.27, -0.9);
    set(&mut p, R_ANKLE, -0.28, -1.8);
    set(&mut p, L_HIP, 0.25, 0.0);
    set(&mut p, L_KNEE, 0.27, -0.9);
    set(&mut p, L_ANKLE, 0.28, -1.8);
    set(&mut p, R_SHOULDER, -0.35, 0.95);
    set(&mut p, R_ELBOW, -0.45, 0.45);
    set(&mut p, R_WRIST, -0.5, 0.0);
    set(&mut p, L_SHOULDER, 0.35, 0.95);
    set(&mut p, L_ELBOW, 0.45, 0.45);
    set(&mut p, L_WRIST, 0.5, 0.0);
    p
}

/// `(joint, weight)` pairs of the group driven by phase `k`; distal joints move most.
fn phase_group(k: usize) -> &'static [(usize, f64)] {
    use joint::*;
    const LEGS: [(usize, f64); 4] = [(R_KNEE, 0.6), (R_ANKLE, 1.0), (L_KNEE, 0.6), (L_ANKLE, 1.0)];
    const RIGHT_ARM: [(usize, f64); 2] = [(R_ELBOW, 0.6), (R_WRIST, 1.0)];
    const LEFT_ARM: [(usize, f64); 2] = [(L_ELBOW, 0.6), (L_WRIST, 1.0)];
    // The upper body leans as a unit, so the arms follow the shoulders.
    const TORSO: [(usize, f64); 9] = [
        (THORAX, 0.3),
        (UPPER_NECK, 0.6),
        (HEAD_TOP, 1.0),
        (R_SHOULDER, 0.5),
        (L_SHOULDER, 0.5),
        (R_ELBOW, 0.5),
        (L_ELBOW, 0.5),
        (R_WRIST, 0.5),
        (L_WRIST, 0.5),
    ];
    match k % 4 {
        0 => &LEGS,
        1 => &RIGHT_ARM,
        2 => &LEFT_ARM,
        _ => &TORSO,
    }
}

struct PhaseMotion {
    frequency: f64,
    amplitude: f64,
    offset: [f64; 2],
    /// Per-joint `(x, y)` phase angles.
    angles: Vec<(f64, f64)>,
}

fn vary(rng: &mut crate::rng::Rng, v: f64) -> f64 {
    1.0 + rng.random_range(-v..=v)
}

fn truncated_normal(rng: &mut crate::rng::Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-5.0, 5.0)
}

/// Body-frame coordinates (`T x 16 x 2`) and labels of video `index`.
pub fn generate_body(spec: &SynthSpec, index: usize) -> Result<(Array3<f64>, Vec<usize>), SynthError> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(spec.seed, index as u64));
    let [lo, hi] = spec.frames_per_phase;
    let lengths: Vec<usize> = (0..spec.k).map(|_| rng.random_range(lo..=hi)).collect();
    let labels: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let motions: Vec<PhaseMotion> = (0..spec.k)
        .map(|k| {
            let angle = TAU * k as f64 / spec.k as f64 + rng.random_range(-0.2..0.2);
            let posture = spec.posture * vary(&mut rng, spec.variation);
            PhaseMotion {
                frequency: (spec.base_frequency + spec.frequency_step * k as f64) * vary(&mut rng, spec.variation),
                amplitude: spec.amplitude * vary(&mut rng, spec.variation),
                offset: [posture * angle.cos(), posture * angle.sin()],
                angles: phase_group(k)
                    .iter()
                    .map(|_| (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)))
                    .collect(),
            }
        })
        .collect();

    let t_len = labels.len();
    let rest = rest_pose();
    let half = spec.blend_frames as isize / 2;
    let mut frames = Array3::zeros((t_len, NUM_JOINTS, 2));
    for t in 0..t_len {
        // Cross-fade weights: phase occupancy of a window centred on t.
        let mut w = vec![0.0; spec.k];
        let span = (-half..=half).filter(|d| spec.blend_frames > 0 || *d == 0);
        let mut count = 0.0;
        for d in span {
            let s = (t as isize + d).clamp(0, t_len as isize - 1) as usize;
            w[labels[s]] += 1.0;
            count += 1.0;
        }
        let mut pose = rest.clone();
        for (k, m) in motions.iter().enumerate() {
            let wk = w[k] / count;
            if wk == 0.0 {
                continue;
            }
            for (&(j, g), &(ax, ay)) in phase_group(k).iter().zip(&m.angles) {
                let phase = TAU * m.frequency * t as f64;
                pose[[j, 0]] += wk * g * (m.offset[0] + m.amplitude * (phase + ax).sin());
                pose[[j, 1]] += wk * g * (m.offset[1] + m.amplitude * (phase + ay).sin());
            }
        }
        for j in 0..NUM_JOINTS {
            for c in 0..2 {
                frames[[t, j, c]] = pose[[j, c]] + spec.noise * truncated_normal(&mut rng);
            }
        }
    }
    Ok((frames, labels))
}

/// Camera placement of video `index`: `(centre_x, centre_y, scale, drift_x, drift_y)`.
pub fn camera(spec: &SynthSpec, index: usize) -> (f64, f64, f64, f64, f64) {
    let mut rng = seeded(derive_seed(spec.seed ^ 0x63616d, index as u64));
    (
        rng.random_range(250.0..350.0),
        rng.random_range(200.0..300.0),
        spec.scale * vary(&mut rng, spec.variation),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
    )
}

/// Map body-frame frames to image pixels (y down) with a drifting camera.
pub fn body_to_pixel(body: &Array3<f64>, cam: (f64, f64, f64, f64, f64)) -> Array3<f64> {
    let (cx, cy, s, dx, dy) = cam;
    let mut out = body.clone();
    for (t, mut f) in out.outer_iter_mut().enumerate() {
        for mut xy in f.outer_iter_mut() {
            let (x, y) = (xy[0], xy[1]);
            xy[0] = cx + dx * t as f64 + s * x;
            xy[1] = cy + dy * t as f64 - s * y;
        }
    }
    out
}

pub fn video_id(index: usize) -> String {
    format!("synth_{index:03}")
}

/// Labelled videos `synth_000 ..` in pixel coordinates.
pub fn generate(spec: &SynthSpec) -> Result<Vec<PoseSequence>, SynthError> {
    spec.validate()?;
    (0..spec.num_videos)
        .map(|i| {
            let (body, labels) = generate_body(spec, i)?;
            let frames = body_to_pixel(&body, camera(spec, i));
            Ok(PoseSequence::new(video_id(i), frames, Some(labels), Some(spec.fps), spec.k)
                .expect("generator output is valid"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lengths_and_labels() {
        let v = generate(&SynthSpec::default()).unwrap();
        assert_eq!(v.len(), 20);
        let want: Vec<usize> = (0..4).flat_map(|k| std::iter::repeat_n(k, 25)).collect();
        for s in &v {
            assert_eq!(s.len(), 100);
            assert_eq!(s.labels.as_ref().unwrap(), &want);
        }
    }

    #[test]
    fn invalid_specs() {
        let s = SynthSpec {
            k: 1,
            ..SynthSpec::default()
        };
        assert!(generate(&s).is_err());
        let s = SynthSpec {
            frames_per_phase: [10, 5],
            ..SynthSpec::default()
        };
        assert!(generate(&s).is_err());
    }

    #[test]
    fn camera_mapping_round_trip() {
        let (body, _) = generate_body(&SynthSpec::default(), 0).unwrap();
        let cam = (10.0, 20.0, 2.0, 0.5, -0.5);
        let px = body_to_pixel(&body, cam);
        for t in [0, 50, 99] {
            let x = (px[[t, 3, 0]] - 10.0 - 0.5 * t as f64) / 2.0;
            let y = -(px[[t, 3, 1]] - 20.0 + 0.5 * t as f64) / 2.0;
            assert!((x - body[[t, 3, 0]]).abs() < 1e-12);
            assert!((y - body[[t, 3, 1]]).abs() < 1e-12);
        }
    }
}
