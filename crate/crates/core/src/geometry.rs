//! Planar boxes, rigid poses and rotated-box overlap.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Oriented box in meters. `length` runs along `heading`, `width` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub length: f32,
    /// Radians in (-pi, pi].
    pub heading: f32,
}

impl GtBox {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = Float::sin_cos(self.heading as f64);
        let (hl, hw) = (self.length as f64 / 2.0, self.width as f64 / 2.0);
        let (cx, cy) = (self.x as f64, self.y as f64);
        let pt = |a: f64, b: f64| (cx + a * c - b * s, cy + a * s + b * c);
        [pt(hl, hw), pt(-hl, hw), pt(-hl, -hw), pt(hl, -hw)]
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.length as f64
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = Float::sin_cos(self.heading as f64);
        let (dx, dy) = (px - self.x as f64, py - self.y as f64);
        let a = dx * c + dy * s;
        let b = -dx * s + dy * c;
        Float::abs(a) <= self.length as f64 / 2.0 && Float::abs(b) <= self.width as f64 / 2.0
    }

    pub fn inflated(&self, margin: f32) -> GtBox {
        GtBox {
            width: self.width + 2.0 * margin,
            length: self.length + 2.0 * margin,
            ..*self
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rigid 2D transform from an agent frame into the ego frame:
/// `p_ego = R(yaw) p_agent + (x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for AgentPose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AgentPose {
    pub const IDENTITY: AgentPose = AgentPose {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.yaw == 0.0
    }

    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = Float::sin_cos(self.yaw);
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    pub fn inverse(&self) -> AgentPose {
        let (s, c) = Float::sin_cos(self.yaw);
        AgentPose {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            yaw: -self.yaw,
        }
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    pub fn compose(&self, inner: &AgentPose) -> AgentPose {
        let (x, y) = self.apply(inner.x, inner.y);
        AgentPose {
            x,
            y,
            yaw: wrap_angle(self.yaw + inner.yaw),
        }
    }
}

fn polygon_area(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    Float::abs(s) / 2.0
}

/// Sutherland-Hodgman clip of convex `subject` by convex counter-clockwise `clip`.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = core::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (cur, prev) = (input[j], input[(j + m - 1) % m]);
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

pub fn intersection_area(a: &GtBox, b: &GtBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = clip_polygon(&ca, &cb);
    if inter.len() < 3 {
        return 0.0;
    }
    polygon_area(&inter)
}

/// Intersection over union of two oriented boxes.
pub fn rotated_iou(a: &GtBox, b: &GtBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f32, y: f32, w: f32, l: f32, h: f32) -> GtBox {
        GtBox {
            x,
            y,
            width: w,
            length: l,
            heading: h,
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = bx(1.0, 2.0, 2.0, 4.0, 0.7);
        assert!((rotated_iou(&b, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn axis_aligned_half_overlap() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((rotated_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn flipped_heading_is_the_same_rectangle() {
        let a = bx(0.3, -0.2, 1.8, 4.4, 0.4);
        let b = GtBox {
            heading: 0.4 - core::f32::consts::PI,
            ..a
        };
        assert!((rotated_iou(&a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn square_rotated_45_degrees() {
        // Unit square vs the same square rotated by 45 degrees: overlap is a regular octagon.
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, core::f32::consts::FRAC_PI_4);
        let oct = 2.0 * (2.0f64.sqrt() - 1.0);
        assert!((intersection_area(&a, &b) - oct).abs() < 1e-6);
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(
            rotated_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.3), &bx(5.0, 0.0, 1.0, 1.0, 1.0)),
            0.0
        );
    }

    #[test]
    fn pose_inverse_and_compose() {
        let p = AgentPose {
            x: 3.0,
            y: -1.0,
            yaw: 0.7,
        };
        let q = AgentPose {
            x: -2.0,
            y: 4.0,
            yaw: -1.9,
        };
        let (x, y) = p.inverse().apply(p.apply(1.5, 2.5).0, p.apply(1.5, 2.5).1);
        assert!((x - 1.5).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);
        let (a, b) = p.compose(&q).apply(0.3, 0.9);
        let (c, d) = q.apply(0.3, 0.9);
        let (e, f) = p.apply(c, d);
        assert!((a - e).abs() < 1e-12 && (b - f).abs() < 1e-12);
    }
}
