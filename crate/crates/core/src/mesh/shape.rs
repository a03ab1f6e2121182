//! Closed boundary curves for the mirror outline.
//!
//! The eyepiece outline is a lens silhouette: an upper and a lower circular
//! arc, mirrored about the x axis, whose sharp corners are rounded by blend
//! arcs tangent to both. With `width == height` the outline degenerates to a
//! circle.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the eye-shaped outline, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeShape {
    pub width: f64,
    pub height: f64,
    pub blend_radius: f64,
}

impl Default for EyeShape {
    fn default() -> Self {
        Self {
            width: 50.0,
            height: 30.0,
            blend_radius: 6.0,
        }
    }
}

impl EyeShape {
    pub fn circle(diameter: f64) -> Self {
        Self {
            width: diameter,
            height: diameter,
            blend_radius: diameter / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    center: [f64; 2],
    radius: f64,
    start: f64,
    sweep: f64,
}

impl Arc {
    fn length(&self) -> f64 {
        self.radius * self.sweep.abs()
    }

    fn point(&self, s: f64) -> [f64; 2] {
        let angle = self.start + self.sweep * (s / self.length().max(f64::MIN_POSITIVE));
        [
            self.center[0] + self.radius * angle.cos(),
            self.center[1] + self.radius * angle.sin(),
        ]
    }
}

/// A closed, counter-clockwise, arc-length parametrised curve.
#[derive(Debug, Clone)]
pub struct BoundaryCurve {
    arcs: Vec<Arc>,
    perimeter: f64,
}

impl BoundaryCurve {
    pub fn eye(shape: &EyeShape) -> Result<Self> {
        let EyeShape {
            width,
            height,
            blend_radius: rb,
        } = *shape;
        if !(width.is_finite() && height.is_finite() && rb.is_finite()) {
            return Err(Error::InvalidShape("non-finite shape parameter".into()));
        }
        if width <= 0.0 || height <= 0.0 || rb <= 0.0 {
            return Err(Error::InvalidShape(
                "width, height and blend_radius must be positive".into(),
            ));
        }
        if width < height {
            return Err(Error::InvalidShape(format!(
                "width {width} < height {height}: the blend arcs would overlap"
            )));
        }
        let half_h = height / 2.0;
        if rb > half_h + 1e-12 {
            return Err(Error::InvalidShape(format!(
                "blend_radius {rb} exceeds half the height {half_h}"
            )));
        }
        if (height - 2.0 * rb).abs() <= 1e-12 {
            if (width - height).abs() <= 1e-12 {
                return Ok(Self::from_arcs(vec![Arc {
                    center: [0.0, 0.0],
                    radius: half_h,
                    start: 0.0,
                    sweep: TAU,
                }]));
            }
            return Err(Error::InvalidShape(
                "blend_radius equal to half height requires width == height".into(),
            ));
        }

        let half_w = width / 2.0;
        // Upper arc centred at (0, yc) through (0, height/2); blend circles centred
        // at (±xb, 0) are internally tangent to it.
        let arc_radius =
            ((half_w - rb).powi(2) - rb * rb + half_h * half_h) / (height - 2.0 * rb);
        let yc = half_h - arc_radius;
        let xb = half_w - rb;
        if yc > 1e-12 || xb < 0.0 {
            return Err(Error::InvalidShape(
                "outline arcs do not close into a convex curve".into(),
            ));
        }
        let phi = (-yc).atan2(xb);
        let arcs = vec![
            Arc {
                center: [xb, 0.0],
                radius: rb,
                start: 0.0,
                sweep: phi,
            },
            Arc {
                center: [0.0, yc],
                radius: arc_radius,
                start: phi,
                sweep: PI - 2.0 * phi,
            },
            Arc {
                center: [-xb, 0.0],
                radius: rb,
                start: PI - phi,
                sweep: 2.0 * phi,
            },
            Arc {
                center: [0.0, -yc],
                radius: arc_radius,
                start: PI + phi,
                sweep: PI - 2.0 * phi,
            },
            Arc {
                center: [xb, 0.0],
                radius: rb,
                start: -phi,
                sweep: phi,
            },
        ];
        Ok(Self::from_arcs(
            arcs.into_iter().filter(|a| a.length() > 0.0).collect(),
        ))
    }

    fn from_arcs(arcs: Vec<Arc>) -> Self {
        let perimeter = arcs.iter().map(Arc::length).sum();
        Self { arcs, perimeter }
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    /// Point at arc length `s` measured counter-clockwise from the rightmost point.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut s = s.rem_euclid(self.perimeter);
        for arc in &self.arcs {
            let len = arc.length();
            if s <= len {
                return arc.point(s);
            }
            s -= len;
        }
        let last = self.arcs.last().expect("curve has at least one arc");
        last.point(last.length())
    }

    /// `count` points at equal arc-length spacing, starting at `s = 0`.
    pub fn equispaced(&self, count: usize) -> Vec<[f64; 2]> {
        let step = self.perimeter / count as f64;
        (0..count).map(|i| self.point_at(i as f64 * step)).collect()
    }

    /// Dense polygonal approximation used for inside and distance queries.
    pub fn polygon(&self, count: usize) -> Polygon {
        Polygon {
            vertices: self.equispaced(count),
        }
    }
}

/// Convex counter-clockwise polygon.
#[derive(Debug, Clone)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    /// Signed distance: positive inside, negative outside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let n = self.vertices.len();
        let mut inside = true;
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let px = p[0] - a[0];
            let py = p[1] - a[1];
            if ex * py - ey * px < 0.0 {
                inside = false;
            }
            let len2 = ex * ex + ey * ey;
            let t = ((px * ex + py * ey) / len2).clamp(0.0, 1.0);
            let dx = px - t * ex;
            let dy = py - t * ey;
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        if inside {
            best
        } else {
            -best
        }
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}
