use std::fmt::Write as _;

use crate::data::{feature, FrameLabelTrack, MotionSequence};
use crate::error::{Error, Result};

const SIZE: f64 = 400.0;
const MARGIN: f64 = 20.0;

/// Canvas position and active label of every frame.
pub fn viz_frames(motion: &MotionSequence, track: &FrameLabelTrack) -> Result<Vec<(f64, f64, String)>> {
    let n = motion.valid_len();
    if track.n_frames() != n {
        return Err(Error::invalid(format!(
            "track covers {} frames, motion has {n}",
            track.n_frames()
        )));
    }
    if motion.dim() <= feature::POS_Y {
        return Err(Error::invalid("motion has no planar position features"));
    }
    let xs: Vec<f64> = (0..n).map(|i| motion.frames[[i, feature::POS_X]]).collect();
    let ys: Vec<f64> = (0..n).map(|i| motion.frames[[i, feature::POS_Y]]).collect();
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x0, y0) = (lo(&xs), lo(&ys));
    let span = (hi(&xs) - x0).max(hi(&ys) - y0).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let labels = track.frame_labels();
    Ok((0..n)
        .map(|i| {
            (
                MARGIN + (xs[i] - x0) * scale,
                // SVG y grows downwards
                SIZE - MARGIN - (ys[i] - y0) * scale,
                labels[i].to_string(),
            )
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG animating the trajectory one frame per step, with the
/// active label shown beneath it.
pub fn render_svg(motion: &MotionSequence, track: &FrameLabelTrack) -> Result<String> {
    let frames = viz_frames(motion, track)?;
    let n = frames.len();
    let dur = n as f64 / motion.fps as f64;
    let key_times: Vec<String> = (0..n).map(|i| format!("{:.6}", i as f64 / n as f64)).collect();
    let key_times = key_times.join(";");
    let path: Vec<String> = frames.iter().map(|(x, y, _)| format!("{x:.2},{y:.2}")).collect();
    let cx: Vec<String> = frames.iter().map(|(x, _, _)| format!("{x:.2}")).collect();
    let cy: Vec<String> = frames.iter().map(|(_, y, _)| format!("{y:.2}")).collect();

    let mut s = String::new();
    let h = SIZE + 40.0;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{h}" viewBox="0 0 {SIZE} {h}" data-frames="{n}">"#
    );
    let _ = writeln!(s, r##"<rect width="{SIZE}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#9aa5b1" stroke-width="1.5"/>"##,
        path.join(" ")
    );
    let _ = writeln!(s, r##"<circle r="6" cx="{}" cy="{}" fill="#d9480f">"##, cx[0], cy[0]);
    for (attr, values) in [("cx", &cx), ("cy", &cy)] {
        let _ = writeln!(
            s,
            r#"<animate attributeName="{attr}" dur="{dur:.3}s" repeatCount="indefinite" calcMode="discrete" keyTimes="{key_times}" values="{}"/>"#,
            values.join(";")
        );
    }
    let _ = writeln!(s, "</circle>");
    for seg in &track.segments {
        let mut vis: Vec<&str> = vec!["hidden"; n];
        vis[seg.start..seg.end].fill("visible");
        let _ = writeln!(
            s,
            r##"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="16" fill="#212529" visibility="{}">{}<animate attributeName="visibility" dur="{dur:.3}s" repeatCount="indefinite" calcMode="discrete" keyTimes="{key_times}" values="{}"/></text>"##,
            SIZE + 25.0,
            vis[0],
            escape(&seg.label),
            vis.join(";")
        );
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}
