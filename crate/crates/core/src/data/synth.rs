//! Synthetic motion corpus.
//!
//! Every clip is driven by band-limited channel programs (sums of at most
//! four sinusoids): root motion, root-relative joint positions and one
//! rotation angle per joint. Joint velocities are exact forward differences
//! of the positions and foot contacts mark frames where a foot is both near
//! the ground and nearly still, so the redundant parts of the feature vector
//! stay mutually consistent.
//!
//! Text-paired clips add word-specific patterns inside time segments: the
//! prompt "a person kick then spin" puts the `kick` pattern on the first half
//! of the clip and the `spin` pattern on the second.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::MotionDataset;
use super::layout::{FeatureLayout, SliceKind};
use super::motion::{MotionSequence, STANDARD_FPS};
use crate::error::Result;
use crate::text::fnv1a64;

const PELVIS_HEIGHT: f64 = 0.9;
const CONTACT_MARGIN: f64 = 0.01;
/// A grounded foot only counts as planted while its root-relative
/// displacement stays below this, so labels never contradict the foot loss.
const PLANT_TOL: f64 = 0.004;
const MAX_WAVES: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
}

/// Smooth gate: raised-cosine ramps of `ramp` frames around `[start, end)`.
#[derive(Debug, Clone, Copy)]
struct Window {
    start: f64,
    end: f64,
    ramp: f64,
}

impl Window {
    fn weight(&self, t: f64) -> f64 {
        let rise = ((t - self.start) / self.ramp + 0.5).clamp(0.0, 1.0);
        let fall = ((self.end - t) / self.ramp + 0.5).clamp(0.0, 1.0);
        let w = rise.min(fall);
        0.5 - 0.5 * (std::f64::consts::PI * w).cos()
    }
}

#[derive(Debug, Clone, Default)]
struct Channel {
    offset: f64,
    waves: Vec<(Wave, Option<Window>)>,
}

impl Channel {
    fn eval(&self, t: f64) -> f64 {
        self.offset
            + self
                .waves
                .iter()
                .map(|(w, win)| {
                    let g = win.map_or(1.0, |win| win.weight(t));
                    g * w.amp * (w.omega * t + w.phase).sin()
                })
                .sum::<f64>()
    }
}

fn random_waves<R: Rng>(rng: &mut R, amp: (f64, f64), scale: f64, period: (f64, f64)) -> Vec<(Wave, Option<Window>)> {
    let k = rng.random_range(1..=MAX_WAVES);
    (0..k)
        .map(|_| {
            let wave = Wave {
                amp: scale * rng.random_range(amp.0..amp.1) / k as f64,
                omega: TAU / rng.random_range(period.0..period.1),
                phase: rng.random_range(0.0..TAU),
            };
            (wave, None)
        })
        .collect()
}

/// Channel programs for one clip.
#[derive(Debug, Clone)]
struct ClipPlan {
    root_ang_vel: Channel,
    root_lin_vel: [Channel; 2],
    root_height: Channel,
    /// per non-root joint, xyz root-relative position
    positions: Vec<[Channel; 3]>,
    /// per non-root joint, unit rotation axis and angle program
    axes: Vec<[f64; 3]>,
    angles: Vec<Channel>,
}

fn rest_pose(layout: &FeatureLayout) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + layout.joints as u64);
    let mut rest: Vec<[f64; 3]> = (1..layout.joints)
        .map(|_| {
            [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.5..0.7),
                rng.random_range(-0.2..0.2),
            ]
        })
        .collect();
    if let Some(feet) = layout.foot_joints {
        // left ankle, left toe, right ankle, right toe
        let pose = [[0.1, -0.82, 0.0], [0.1, -0.87, 0.12], [-0.1, -0.82, 0.0], [-0.1, -0.87, 0.12]];
        for (j, p) in feet.iter().zip(pose) {
            rest[j - 1] = p;
        }
    }
    rest
}

/// Per-joint rotation axes, fixed per skeleton.
fn rotation_axes(layout: &FeatureLayout) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0e5_0000 + layout.joints as u64);
    (1..layout.joints)
        .map(|_| {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect()
}

impl ClipPlan {
    fn random<R: Rng>(layout: &FeatureLayout, rng: &mut R, scale: f64) -> Self {
        let rest = rest_pose(layout);
        let feet = layout.foot_joints.unwrap_or([0; 4]);
        let mut ch = |offset: f64, amp: (f64, f64), period: (f64, f64)| {
            let mut waves = random_waves(rng, amp, scale, period);
            if scale == 0.0 {
                waves.clear();
            }
            Channel { offset, waves }
        };
        let root_ang_vel = ch(0.0, (0.005, 0.03), (40.0, 160.0));
        let root_lin_vel = [ch(0.02, (0.005, 0.03), (30.0, 120.0)), ch(0.0, (0.005, 0.02), (30.0, 120.0))];
        let root_height = ch(PELVIS_HEIGHT, (0.005, 0.02), (20.0, 80.0));
        let positions = (1..layout.joints)
            .map(|j| {
                let r = rest[j - 1];
                let y_amp = if feet.contains(&j) { (0.02, 0.06) } else { (0.01, 0.1) };
                [ch(r[0], (0.01, 0.1), (20.0, 120.0)), ch(r[1], y_amp, (20.0, 120.0)), ch(r[2], (0.01, 0.1), (20.0, 120.0))]
            })
            .collect();
        let angles = (1..layout.joints).map(|_| ch(0.0, (0.1, 0.6), (20.0, 120.0))).collect();
        let axes = rotation_axes(layout);
        Self { root_ang_vel, root_lin_vel, root_height, positions, axes, angles }
    }

    /// Splits the clip into equal segments, one per word in order.
    fn add_words(&mut self, words: &[&str], n_frames: usize) {
        let seg = n_frames as f64 / words.len().max(1) as f64;
        for (k, w) in words.iter().enumerate() {
            let window = if words.len() == 1 {
                Window { start: -1e9, end: 1e9, ramp: 1.0 }
            } else {
                Window { start: k as f64 * seg, end: (k + 1) as f64 * seg, ramp: 4.0 }
            };
            self.add_word(w, window);
        }
    }

    /// Adds `word`'s deterministic pattern gated to `window`.
    fn add_word(&mut self, word: &str, window: Window) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word.as_bytes()));
        let joints = self.positions.len();
        for j in 0..joints {
            if rng.random_bool(0.5) {
                for c in 0..3 {
                    let wave = Wave {
                        amp: rng.random_range(0.08..0.2),
                        omega: TAU / rng.random_range(8.0..40.0),
                        phase: rng.random_range(0.0..TAU),
                    };
                    self.positions[j][c].waves.push((wave, Some(window)));
                }
                let wave = Wave {
                    amp: rng.random_range(0.3..0.8),
                    omega: TAU / rng.random_range(8.0..40.0),
                    phase: rng.random_range(0.0..TAU),
                };
                self.angles[j].waves.push((wave, Some(window)));
            }
        }
        let wave = Wave { amp: rng.random_range(0.01..0.03), omega: TAU / rng.random_range(10.0..40.0), phase: 0.0 };
        self.root_height.waves.push((wave, Some(window)));
    }

    fn render(&self, layout: &FeatureLayout, n_frames: usize) -> MotionSequence {
        let d = layout.dim();
        let joints = layout.joints;
        // positions evaluated one frame past the end so every frame has a forward difference
        let pos_at = |t: f64| -> Vec<[f64; 3]> {
            self.positions.iter().map(|p| [p[0].eval(t), p[1].eval(t), p[2].eval(t)]).collect()
        };
        let mut frames = Array2::<f32>::zeros((n_frames, d));
        let ang = layout.slice(SliceKind::RootAngularVelocity).start;
        let lin = layout.slice(SliceKind::RootLinearVelocity).start;
        let height = layout.slice(SliceKind::RootHeight).start;
        let contacts = layout.slice(SliceKind::FootContacts).start;
        let rest = rest_pose(layout);
        for i in 0..n_frames {
            let t = i as f64;
            let p_now = pos_at(t);
            let p_next = pos_at(t + 1.0);
            let h_now = self.root_height.eval(t);
            let h_next = self.root_height.eval(t + 1.0);
            let lin_v = [self.root_lin_vel[0].eval(t), self.root_lin_vel[1].eval(t)];
            let mut row = frames.row_mut(i);
            row[ang] = self.root_ang_vel.eval(t) as f32;
            row[lin] = lin_v[0] as f32;
            row[lin + 1] = lin_v[1] as f32;
            row[height] = h_now as f32;
            for j in 1..joints {
                let pr = layout.joint_position(j);
                for c in 0..3 {
                    row[pr.start + c] = p_now[j - 1][c] as f32;
                }
                let rr = layout.joint_rotation(j);
                let rot6 = rotation_6d(self.axes[j - 1], self.angles[j - 1].eval(t));
                for c in 0..6 {
                    row[rr.start + c] = rot6[c] as f32;
                }
                let vr = layout.joint_velocity(j);
                for c in 0..3 {
                    row[vr.start + c] = (p_next[j - 1][c] - p_now[j - 1][c]) as f32;
                }
            }
            let v0 = layout.joint_velocity(0);
            row[v0.start] = lin_v[0] as f32;
            row[v0.start + 1] = (h_next - h_now) as f32;
            row[v0.start + 2] = lin_v[1] as f32;
            if let Some(feet) = layout.foot_joints {
                for (k, &j) in feet.iter().enumerate() {
                    let world_y = h_now + p_now[j - 1][1];
                    let rest_y = PELVIS_HEIGHT + rest[j - 1][1];
                    let step: f64 = (0..3).map(|c| (p_next[j - 1][c] - p_now[j - 1][c]).powi(2)).sum::<f64>().sqrt();
                    let planted = world_y < rest_y + CONTACT_MARGIN && step < PLANT_TOL;
                    row[contacts + k] = if planted { 1.0 } else { 0.0 };
                }
            }
        }
        MotionSequence::new(frames, STANDARD_FPS, layout.id)
    }
}

/// First two columns of the axis-angle rotation matrix.
fn rotation_6d(axis: [f64; 3], angle: f64) -> [f64; 6] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [t * x * x + c, t * x * y + s * z, t * x * z - s * y, t * x * y - s * z, t * y * y + c, t * y * z + s * x]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { min_frames: 60, max_frames: 240 }
    }
}

/// Unlabeled corpus of `n_clips` clips; clip ids `clip_0000`, `clip_0001`, ...
/// Each clip carries zero to two action patterns, so the corpus covers the
/// same motion repertoire as captioned pairs.
pub fn generate_synthetic_dataset(n_clips: usize, seed: u64, layout: &FeatureLayout, cfg: &SynthConfig) -> Result<MotionDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = (0..n_clips.max(1))
        .map(|i| {
            let n = rng.random_range(cfg.min_frames.max(1)..=cfg.max_frames.max(cfg.min_frames.max(1)));
            let mut plan = ClipPlan::random(layout, &mut rng, 1.0);
            let n_words = rng.random_range(0..=2);
            let words: Vec<&str> = (0..n_words).map(|_| ACTION_WORDS[rng.random_range(0..ACTION_WORDS.len())]).collect();
            plan.add_words(&words, n);
            (format!("clip_{i:04}"), plan.render(layout, n))
        })
        .collect();
    MotionDataset::new(layout.clone(), clips)
}

/// Action words that carry motion patterns in synthetic prompts.
pub const ACTION_WORDS: [&str; 12] =
    ["walk", "run", "jump", "kick", "spin", "wave", "crouch", "punch", "hop", "stretch", "sway", "climb"];

/// Renders the motion described by `prompt`. Action words found in the
/// prompt split the clip into equal segments in order of appearance;
/// `base_scale` sets the strength of the random background motion.
pub fn motion_for_prompt<R: Rng>(prompt: &str, n_frames: usize, layout: &FeatureLayout, base_scale: f64, rng: &mut R) -> MotionSequence {
    let mut plan = ClipPlan::random(layout, rng, base_scale);
    let words: Vec<&str> = prompt.split_whitespace().filter(|w| ACTION_WORDS.contains(w)).collect();
    plan.add_words(&words, n_frames);
    plan.render(layout, n_frames)
}

/// A motion clip with its caption.
#[derive(Debug, Clone)]
pub struct TextMotionPair {
    pub prompt: String,
    pub motion: MotionSequence,
}

/// Two-action prompts over [`ACTION_WORDS`], returned as (train, held-out).
/// Held-out prompts reuse seen words in unseen orderings/combinations.
pub fn generate_text_motion_pairs(
    n_train: usize,
    n_heldout: usize,
    n_frames: usize,
    layout: &FeatureLayout,
    base_scale: f64,
    seed: u64,
) -> (Vec<TextMotionPair>, Vec<TextMotionPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize)> = (0..ACTION_WORDS.len())
        .flat_map(|a| (0..ACTION_WORDS.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    // deterministic shuffle
    for i in (1..combos.len()).rev() {
        let j = rng.random_range(0..=i);
        combos.swap(i, j);
    }
    let heldout_combos: Vec<_> = combos.iter().take(n_heldout).copied().collect();
    let train_combos: Vec<_> = combos.iter().skip(n_heldout).copied().collect();
    let prompt = |(a, b): (usize, usize)| format!("a person {} then {}", ACTION_WORDS[a], ACTION_WORDS[b]);
    let train = (0..n_train)
        .map(|i| {
            let p = prompt(train_combos[i % train_combos.len()]);
            let motion = motion_for_prompt(&p, n_frames, layout, base_scale, &mut rng);
            TextMotionPair { prompt: p, motion }
        })
        .collect();
    let heldout = heldout_combos
        .into_iter()
        .map(|c| {
            let p = prompt(c);
            let motion = motion_for_prompt(&p, n_frames, layout, base_scale, &mut rng);
            TextMotionPair { prompt: p, motion }
        })
        .collect();
    (train, heldout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let layout = FeatureLayout::desk();
        let a = generate_synthetic_dataset(2, 7, &layout, &SynthConfig::default()).unwrap();
        let b = generate_synthetic_dataset(2, 7, &layout, &SynthConfig::default()).unwrap();
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
    }

    #[test]
    fn velocities_are_forward_differences() {
        for layout in [FeatureLayout::desk(), FeatureLayout::humanml()] {
            let ds = generate_synthetic_dataset(3, 11, &layout, &SynthConfig { min_frames: 20, max_frames: 40 }).unwrap();
            for clip in &ds.clips {
                for t in 0..clip.n_frames() - 1 {
                    for j in 1..layout.joints {
                        let p = layout.joint_position(j);
                        let v = layout.joint_velocity(j);
                        for c in 0..3 {
                            let diff = clip.frames[[t + 1, p.start + c]] - clip.frames[[t, p.start + c]];
                            assert!((clip.frames[[t, v.start + c]] - diff).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn contacts_are_binary_and_mixed() {
        let layout = FeatureLayout::desk();
        let ds = generate_synthetic_dataset(4, 3, &layout, &SynthConfig::default()).unwrap();
        let c = layout.slice(SliceKind::FootContacts);
        let mut ones = 0usize;
        let mut total = 0usize;
        for clip in &ds.clips {
            for row in clip.frames.outer_iter() {
                for k in c.clone() {
                    assert!(row[k] == 0.0 || row[k] == 1.0);
                    ones += (row[k] == 1.0) as usize;
                    total += 1;
                }
            }
        }
        assert!(ones > 0 && ones < total);
    }

    #[test]
    fn prompts_drive_distinct_motion() {
        let layout = FeatureLayout::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = motion_for_prompt("a person kick then spin", 40, &layout, 0.0, &mut rng);
        let b = motion_for_prompt("a person kick then spin", 40, &layout, 0.0, &mut rng);
        let c = motion_for_prompt("a person spin then kick", 40, &layout, 0.0, &mut rng);
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn heldout_prompts_unseen_in_training() {
        let layout = FeatureLayout::desk();
        let (train, held) = generate_text_motion_pairs(50, 8, 32, &layout, 0.1, 4);
        assert_eq!(train.len(), 50);
        assert_eq!(held.len(), 8);
        for h in &held {
            assert!(train.iter().all(|t| t.prompt != h.prompt));
        }
    }
}
