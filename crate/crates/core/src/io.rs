//! Plain-text artifact writers.

use std::io::Write;

use crate::geometry::Pose;
use crate::pipeline::ColoredPoint;

/// TUM trajectory lines `timestamp tx ty tz qx qy qz qw` giving the
/// camera-to-world pose of each keyframe.
pub fn write_tum<W: Write>(mut out: W, timestamps: &[f64], poses: &[Pose]) -> std::io::Result<()> {
    for (t, pose) in timestamps.iter().zip(poses) {
        let c = pose.camera_center();
        let q = pose.rotation.inverse();
        let q = q.quaternion();
        // fixed sign so equal rotations print identically
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        let fields = [*t, c.x, c.y, c.z, sign * q.i, sign * q.j, sign * q.k, sign * q.w];
        let line: Vec<String> = fields.iter().map(|&v| fixed6(v)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Six decimals without a sign on values that round to zero.
fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        s[1..].to_string()
    } else {
        s
    }
}

/// ASCII PLY with `x y z red green blue` vertices.
pub fn write_ply<W: Write>(mut out: W, points: &[ColoredPoint]) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", points.len())?;
    for prop in ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"] {
        writeln!(out, "property {prop}")?;
    }
    writeln!(out, "end_header")?;
    for p in points {
        let x = p.position;
        writeln!(out, "{:.6} {:.6} {:.6} {} {} {}", x.x, x.y, x.z, p.rgb[0], p.rgb[1], p.rgb[2])?;
    }
    Ok(())
}
