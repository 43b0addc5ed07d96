//! Closed-form planar action generators.
//!
//! Every frame carries `[pos_x, pos_y, vel_x, vel_y, sin(heading), cos(heading)]`.
//! Velocity is the displacement taken to reach the frame, so `pos[i] - pos[i-1]`
//! equals `vel[i]`. Each action starts from the pose where the previous one ended.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{feature, FrameLabelTrack, MotionSequence, Segment};
use crate::error::{Error, Result};

/// Bumped whenever generator output changes for a fixed seed.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Stand,
    WalkFwd,
    WalkBack,
    CircleCw,
    CircleCcw,
    Zigzag,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Stand,
        Action::WalkFwd,
        Action::WalkBack,
        Action::CircleCw,
        Action::CircleCcw,
        Action::Zigzag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Stand => "stand",
            Action::WalkFwd => "walk-fwd",
            Action::WalkBack => "walk-back",
            Action::CircleCw => "circle-cw",
            Action::CircleCcw => "circle-ccw",
            Action::Zigzag => "zigzag",
        }
    }

    /// The closed label vocabulary of generated datasets.
    pub fn vocabulary() -> Vec<String> {
        Action::ALL.iter().map(|a| a.name().to_string()).collect()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown action {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Meters per frame for every moving action.
    pub walk_speed: f64,
    /// Nominal heading change per frame of the circle actions (radians).
    pub turn_rate: f64,
    /// Relative spread of the per-segment turn rate, drawn from the seed.
    pub turn_jitter: f64,
    /// Angle between velocity and heading while zigzagging (radians).
    pub zigzag_angle: f64,
    /// Frames spent on each side of a zigzag.
    pub zigzag_period: usize,
    /// Start positions are drawn uniformly from `[-start_box, start_box]^2`.
    pub start_box: f64,
    pub fps: u32,
    pub max_frames: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            walk_speed: 0.05,
            turn_rate: 2.0 * PI / 40.0,
            turn_jitter: 0.2,
            zigzag_angle: PI / 4.0,
            zigzag_period: 4,
            start_box: 1.0,
            fps: 20,
            max_frames: 64,
        }
    }
}

/// One step of a script: an action held for a number of frames.
pub type ScriptStep = (Action, usize);

/// Parses `(name, frames)` pairs into a script.
pub fn parse_script<S: AsRef<str>>(steps: &[(S, usize)]) -> Result<Vec<ScriptStep>> {
    steps
        .iter()
        .map(|(name, n)| Ok((name.as_ref().parse::<Action>()?, *n)))
        .collect()
}

/// Sentence-level description of a script.
pub fn global_text(script: &[ScriptStep]) -> String {
    let names: Vec<&str> = script.iter().map(|(a, _)| a.name()).collect();
    format!("the figure {}", names.join(", then "))
}

/// Runs the generators over `script`.
///
/// Returns the motion, the track mirroring the script and the templated sentence.
/// The output is a pure function of `(script, seed, config)`.
pub fn generate_sequence(
    script: &[ScriptStep],
    seed: u64,
    config: &GeneratorConfig,
) -> Result<(MotionSequence, FrameLabelTrack, String)> {
    if script.is_empty() {
        return Err(Error::invalid("script must contain at least one action"));
    }
    if let Some((a, n)) = script.iter().find(|(_, n)| *n < 4) {
        return Err(Error::invalid(format!("action {a} needs at least 4 frames, got {n}")));
    }
    let total: usize = script.iter().map(|(_, n)| n).sum();
    if total > config.max_frames {
        return Err(Error::invalid(format!(
            "script spans {total} frames, maximum is {}",
            config.max_frames
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = rng.gen_range(-config.start_box..=config.start_box);
    let mut py = rng.gen_range(-config.start_box..=config.start_box);
    let mut heading = 0.0f64;

    let mut frames = Array2::<f64>::zeros((total, feature::DIM));
    let mut segments = Vec::with_capacity(script.len());
    let mut row = 0;
    for &(action, n) in script {
        let rate = config.turn_rate * (1.0 + config.turn_jitter * rng.gen_range(-1.0..=1.0));
        let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for k in 0..n {
            let (vx, vy) = match action {
                Action::Stand => (0.0, 0.0),
                Action::WalkFwd => polar(config.walk_speed, heading),
                Action::WalkBack => polar(-config.walk_speed, heading),
                Action::CircleCw => {
                    heading = wrap_angle(heading - rate);
                    polar(config.walk_speed, heading)
                }
                Action::CircleCcw => {
                    heading = wrap_angle(heading + rate);
                    polar(config.walk_speed, heading)
                }
                Action::Zigzag => {
                    let half = (k / config.zigzag_period.max(1)) % 2;
                    let sign = if half == 0 { side } else { -side };
                    polar(config.walk_speed, heading + sign * config.zigzag_angle)
                }
            };
            px += vx;
            py += vy;
            let mut f = frames.row_mut(row);
            f[feature::POS_X] = px;
            f[feature::POS_Y] = py;
            f[feature::VEL_X] = vx;
            f[feature::VEL_Y] = vy;
            f[feature::HEADING_SIN] = heading.sin();
            f[feature::HEADING_COS] = heading.cos();
            row += 1;
        }
        segments.push(Segment::new(row - n, row, action.name()));
    }

    let motion = MotionSequence::new(frames, config.fps)?;
    let track = FrameLabelTrack { segments };
    Ok((motion, track, global_text(script)))
}

fn polar(r: f64, angle: f64) -> (f64, f64) {
    (r * angle.cos(), r * angle.sin())
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Bounds for randomly drawn scripts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptSampler {
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for ScriptSampler {
    fn default() -> Self {
        ScriptSampler {
            min_segments: 1,
            max_segments: 4,
            min_frames: 8,
            max_frames: 20,
        }
    }
}

impl ScriptSampler {
    /// Draws a script whose consecutive actions differ and whose total fits `max_total`.
    pub fn sample<R: Rng>(&self, rng: &mut R, max_total: usize) -> Vec<ScriptStep> {
        let n_seg = rng.gen_range(self.min_segments..=self.max_segments.max(self.min_segments));
        let mut script: Vec<ScriptStep> = Vec::with_capacity(n_seg);
        let mut used = 0;
        for i in 0..n_seg {
            let remaining_after = (n_seg - i - 1) * self.min_frames;
            let budget = max_total.saturating_sub(used + remaining_after);
            if budget < self.min_frames {
                break;
            }
            let hi = self.max_frames.min(budget).max(self.min_frames);
            let n = rng.gen_range(self.min_frames..=hi);
            let action = loop {
                let a = Action::ALL[rng.gen_range(0..Action::ALL.len())];
                if script.last().is_none_or(|(prev, _)| *prev != a) {
                    break a;
                }
            };
            script.push((action, n));
            used += n;
        }
        script
    }
}
