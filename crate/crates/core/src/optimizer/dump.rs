//! Line-oriented text form of a factor graph, see `docs/graph-format.md`.

use std::fmt::Write as _;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{FactorGraph, LandmarkVar, PoseVar};
use crate::error::{Error, Result};
use crate::factors::{Factor, Measurement, RayAnchor};
use crate::geometry::{CameraIntrinsics, PluckerRay, Pose, Vec2, Vec3};

const HEADER: &str = "# metric-slam graph v1";

fn flag(b: bool) -> u8 {
    u8::from(b)
}

pub fn write_graph(graph: &FactorGraph) -> String {
    let mut s = String::new();
    let k = &graph.intrinsics;
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "CAMERA {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    let _ = writeln!(s, "GAUGE {}", graph.gauge);
    for (i, p) in graph.poses.iter().enumerate() {
        let q = p.pose.rotation.quaternion();
        let t = p.pose.translation;
        let _ = writeln!(
            s,
            "POSE {i} {} {} {} {} {} {} {} {}",
            flag(p.fixed),
            q.w,
            q.i,
            q.j,
            q.k,
            t.x,
            t.y,
            t.z
        );
    }
    for (j, l) in graph.landmarks.iter().enumerate() {
        let x = l.position;
        let _ = writeln!(s, "LANDMARK {j} {} {} {} {} {}", flag(l.fixed), l.id, x.x, x.y, x.z);
    }
    for f in &graph.factors {
        let lm = f.landmark_id.unwrap_or(usize::MAX);
        let p = f.pose_ids[0];
        match &f.measurement {
            Measurement::Pixel(px) => {
                let _ = writeln!(
                    s,
                    "FACTOR reprojection {p} {lm} {} {} {} {}",
                    f.information, f.robust_delta, px.x, px.y
                );
            }
            Measurement::Ray { ray, pixel, anchor } => {
                let a = match anchor {
                    RayAnchor::Fixed => "fixed",
                    RayAnchor::Variable => "variable",
                };
                let (d, m) = (ray.direction, ray.moment);
                let _ = writeln!(
                    s,
                    "FACTOR ray {p} {lm} {} {} {a} {} {} {} {} {} {} {} {}",
                    f.information, f.robust_delta, d.x, d.y, d.z, m.x, m.y, m.z, pixel.x, pixel.y
                );
            }
            Measurement::LogDepth(v) => {
                let _ = writeln!(s, "FACTOR depth {p} {lm} {} {} {v}", f.information, f.robust_delta);
            }
            Measurement::Relative { rotation, direction } => {
                let q = rotation.quaternion();
                let _ = writeln!(
                    s,
                    "FACTOR relpose {p} {} {} {} {} {} {} {} {} {} {}",
                    f.pose_ids[1],
                    f.information,
                    f.robust_delta,
                    q.w,
                    q.i,
                    q.j,
                    q.k,
                    direction.x,
                    direction.y,
                    direction.z
                );
            }
        }
    }
    s
}

struct Fields<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn next_str(&mut self) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("line {}: missing field", self.line)))
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let tok = self.next_str()?;
        tok.parse()
            .map_err(|_| Error::InvalidInput(format!("line {}: cannot parse '{tok}'", self.line)))
    }

    fn f64s<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.parse()?;
        }
        Ok(out)
    }

    fn finish(mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(t) => Err(Error::InvalidInput(format!("line {}: trailing field '{t}'", self.line))),
        }
    }
}

fn quat(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
}

pub fn read_graph(text: &str) -> Result<FactorGraph> {
    let mut graph: Option<FactorGraph> = None;
    let mut gauge = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fl = Fields {
            line: n + 1,
            it: line.split_whitespace(),
        };
        let tag = fl.next_str()?;
        if tag == "CAMERA" {
            let [fx, fy, cx, cy] = fl.f64s::<4>()?;
            let k = CameraIntrinsics::new(fx, fy, cx, cy, fl.parse()?, fl.parse()?)?;
            fl.finish()?;
            graph = Some(FactorGraph::new(k));
            continue;
        }
        let g = graph
            .as_mut()
            .ok_or_else(|| Error::InvalidInput(format!("line {}: {tag} before CAMERA", n + 1)))?;
        match tag {
            "GAUGE" => gauge = fl.parse()?,
            "POSE" => {
                let idx: usize = fl.parse()?;
                let fixed: u8 = fl.parse()?;
                let [w, x, y, z, tx, ty, tz] = fl.f64s::<7>()?;
                if idx != g.poses.len() {
                    return Err(Error::InvalidInput(format!("line {}: pose index out of order", n + 1)));
                }
                g.poses.push(PoseVar {
                    pose: Pose::new(quat(w, x, y, z), Vec3::new(tx, ty, tz)),
                    fixed: fixed != 0,
                });
            }
            "LANDMARK" => {
                let idx: usize = fl.parse()?;
                let fixed: u8 = fl.parse()?;
                let id: u64 = fl.parse()?;
                let [x, y, z] = fl.f64s::<3>()?;
                if idx != g.landmarks.len() {
                    return Err(Error::InvalidInput(format!("line {}: landmark index out of order", n + 1)));
                }
                g.landmarks.push(LandmarkVar {
                    id,
                    position: Vec3::new(x, y, z),
                    fixed: fixed != 0,
                });
            }
            "FACTOR" => {
                let kind = fl.next_str()?;
                let p: usize = fl.parse()?;
                let second: usize = fl.parse()?;
                let [info, delta] = fl.f64s::<2>()?;
                let f = match kind {
                    "reprojection" => {
                        let [u, v] = fl.f64s::<2>()?;
                        Factor::reprojection(p, second, Vec2::new(u, v), info, delta)
                    }
                    "ray" => {
                        let anchor = match fl.next_str()? {
                            "fixed" => RayAnchor::Fixed,
                            "variable" => RayAnchor::Variable,
                            other => {
                                return Err(Error::InvalidInput(format!(
                                    "line {}: unknown anchor '{other}'",
                                    n + 1
                                )))
                            }
                        };
                        let [dx, dy, dz, mx, my, mz, u, v] = fl.f64s::<8>()?;
                        let mut f = Factor::ray(
                            p,
                            second,
                            PluckerRay {
                                direction: Vec3::new(dx, dy, dz),
                                moment: Vec3::new(mx, my, mz),
                            },
                            Vec2::new(u, v),
                            info,
                            delta,
                        );
                        if let Measurement::Ray { anchor: a, .. } = &mut f.measurement {
                            *a = anchor;
                        }
                        f
                    }
                    "depth" => {
                        let [log_depth] = fl.f64s::<1>()?;
                        let mut f = Factor::depth_prior(p, second, 1.0, info, delta);
                        f.measurement = Measurement::LogDepth(log_depth);
                        f
                    }
                    "relpose" => {
                        let [w, x, y, z, ux, uy, uz] = fl.f64s::<7>()?;
                        Factor {
                            pose_ids: vec![p, second],
                            landmark_id: None,
                            measurement: Measurement::Relative {
                                rotation: quat(w, x, y, z),
                                direction: Vec3::new(ux, uy, uz),
                            },
                            information: info,
                            robust_delta: delta,
                        }
                    }
                    other => {
                        return Err(Error::InvalidInput(format!(
                            "line {}: unknown factor kind '{other}'",
                            n + 1
                        )))
                    }
                };
                g.factors.push(f);
            }
            other => return Err(Error::InvalidInput(format!("line {}: unknown record '{other}'", n + 1))),
        }
        fl.finish()?;
    }
    let mut g = graph.ok_or_else(|| Error::InvalidInput("no CAMERA record".into()))?;
    g.gauge = gauge;
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::plucker_from_camera;

    #[test]
    fn round_trip_is_exact() {
        let k = CameraIntrinsics::default();
        let mut g = FactorGraph::new(k);
        let p1 = Pose::from_center(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(0.1, 1.0 / 3.0, -2.0));
        g.add_pose(Pose::identity(), false);
        g.add_pose(p1, true);
        g.add_landmark(42, Vec3::new(0.1, 0.2, 3.0));
        let px = Vec2::new(321.5, 200.25);
        g.add_factor(Factor::reprojection(0, 0, px, 0.7, 2.0));
        g.add_factor(Factor::ray(1, 0, plucker_from_camera(&p1, &px, &k), px, 400.0, 0.05));
        g.add_factor(Factor::depth_prior(1, 0, 2.9, 3.0, 0.1));
        g.add_factor(Factor::relative_pose(0, 1, p1.rotation, Vec3::new(1.0, 2.0, 2.0), 10.0, 1.0));
        let text = write_graph(&g);
        let back = read_graph(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(write_graph(&back), text);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_graph("POSE 0 0 1 0 0 0 0 0 0").is_err());
        assert!(read_graph("CAMERA 500 500 320 240 640 480\nFOO 1").is_err());
        assert!(read_graph("CAMERA 500 500 320 240 640 480\nPOSE 0 0 1 0 0 0 0 0 0 7").is_err());
    }
}
