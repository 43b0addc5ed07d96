//! Rule-based frame labeler.
//!
//! Decisions use only the velocity and heading features of each frame, so the
//! labeler can be applied to generated motion whose positions drift.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::generator::{wrap_angle, Action, GeneratorConfig};
use super::types::{feature, FrameLabelTrack, MotionSequence};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleConfig {
    /// Frames slower than this are standing.
    pub stand_speed: f64,
    /// Heading change per frame above which a frame is turning.
    pub turn_threshold: f64,
    /// |velocity angle - heading| beyond which a frame moves sideways.
    pub lateral_angle: f64,
    /// |velocity angle - heading| beyond which a frame moves backwards.
    pub backward_angle: f64,
    /// Relative half-width of the band around each threshold treated as ambiguous.
    pub ambiguity: f64,
}

impl OracleConfig {
    pub fn from_generator(cfg: &GeneratorConfig) -> Self {
        OracleConfig {
            stand_speed: 0.5 * cfg.walk_speed,
            turn_threshold: 0.5 * cfg.turn_rate * (1.0 - cfg.turn_jitter),
            lateral_angle: 0.5 * cfg.zigzag_angle,
            backward_angle: 0.5 * (cfg.zigzag_angle + PI),
            ambiguity: 0.1,
        }
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::from_generator(&GeneratorConfig::default())
    }
}

fn heading(frames: &ndarray::Array2<f64>, i: usize) -> f64 {
    frames[[i, feature::HEADING_SIN]].atan2(frames[[i, feature::HEADING_COS]])
}

/// Labels every valid frame and run-length merges the result.
pub fn oracle_label(motion: &MotionSequence, cfg: &OracleConfig) -> FrameLabelTrack {
    let labels = oracle_frame_actions(motion, cfg);
    let names: Vec<&str> = labels.iter().map(|a| a.name()).collect();
    FrameLabelTrack::from_frame_labels(&names).expect("a valid motion has at least one frame")
}

/// Per-frame decisions over the valid prefix of `motion`.
pub fn oracle_frame_actions(motion: &MotionSequence, cfg: &OracleConfig) -> Vec<Action> {
    let n = motion.valid_len();
    let f = &motion.frames;
    let near = |value: f64, threshold: f64| (value - threshold).abs() <= cfg.ambiguity * threshold;

    let mut out: Vec<Action> = Vec::with_capacity(n);
    for i in 0..n {
        let vx = f[[i, feature::VEL_X]];
        let vy = f[[i, feature::VEL_Y]];
        let speed = vx.hypot(vy);
        let h = heading(f, i);
        let turn = match (i, n) {
            (_, 1) => 0.0,
            (0, _) => wrap_angle(heading(f, 1) - h),
            _ => wrap_angle(h - heading(f, i - 1)),
        };
        let offset = if speed > 0.0 { wrap_angle(vy.atan2(vx) - h).abs() } else { 0.0 };

        let decision = if speed < cfg.stand_speed {
            Action::Stand
        } else if offset >= cfg.backward_angle {
            Action::WalkBack
        } else if offset >= cfg.lateral_angle {
            Action::Zigzag
        } else if turn <= -cfg.turn_threshold {
            Action::CircleCw
        } else if turn >= cfg.turn_threshold {
            Action::CircleCcw
        } else {
            Action::WalkFwd
        };

        let ambiguous = near(speed, cfg.stand_speed)
            || (speed >= cfg.stand_speed
                && (near(offset, cfg.backward_angle)
                    || near(offset, cfg.lateral_angle)
                    || (offset < cfg.lateral_angle && near(turn.abs(), cfg.turn_threshold))));
        match out.last() {
            Some(&prev) if ambiguous => out.push(prev),
            _ => out.push(decision),
        }
    }
    out
}
