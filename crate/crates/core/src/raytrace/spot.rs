use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::RayBundle;
use crate::error::{Error, Result};
use crate::optics::MM_TO_NM;

pub const FOCUS_SCAN_SAMPLES: usize = 64;
const FOCUS_TOL: f64 = 1e-7;

/// Ray hits on a detector plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotDiagram {
    pub plane_z: f64,
    pub hits: Vec<[f64; 2]>,
    pub centroid: [f64; 2],
    /// Centroid-referenced RMS radius, nm.
    pub spot_rms: f64,
    /// Rays parallel to the plane, excluded from the statistics.
    pub flagged: usize,
}

/// Extends every ray (forwards or backwards) to `z = plane_z`.
pub fn propagate_to_plane(rays: &RayBundle, plane_z: f64) -> SpotDiagram {
    let mut hits = Vec::with_capacity(rays.len());
    let mut flagged = 0;
    for (o, u) in rays.origins.iter().zip(&rays.directions) {
        if u[2] == 0.0 {
            flagged += 1;
            continue;
        }
        let t = (plane_z - o[2]) / u[2];
        hits.push([o[0] + u[0] * t, o[1] + u[1] * t]);
    }
    let n = hits.len().max(1) as f64;
    let cx = hits.iter().map(|h| h[0]).sum::<f64>() / n;
    let cy = hits.iter().map(|h| h[1]).sum::<f64>() / n;
    let ms = hits.iter().map(|h| (h[0] - cx).powi(2) + (h[1] - cy).powi(2)).sum::<f64>() / n;
    SpotDiagram {
        plane_z,
        hits,
        centroid: [cx, cy],
        spot_rms: ms.sqrt() * MM_TO_NM,
        flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusResult {
    pub plane_z: f64,
    pub spot_rms: f64,
    /// Coarse scan `(plane_z, spot_rms)`.
    pub profile: Vec<(f64, f64)>,
}

impl FocusResult {
    pub fn focal_length(&self) -> f64 {
        self.plane_z.abs()
    }
}

/// Plane of least spot RMS within `[lo, hi]`: a uniform scan followed by
/// golden-section refinement around the best sample. A scan minimum on
/// either end of the interval is an error.
pub fn find_best_focus(rays: &RayBundle, interval: (f64, f64)) -> Result<FocusResult> {
    let (lo, hi) = interval;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid focus interval [{lo}, {hi}]")));
    }
    if rays.is_empty() {
        return Err(Error::InvalidArgument("no rays to focus".into()));
    }
    let rms = |z: f64| propagate_to_plane(rays, z).spot_rms;
    let step = (hi - lo) / (FOCUS_SCAN_SAMPLES - 1) as f64;
    let profile: Vec<(f64, f64)> = (0..FOCUS_SCAN_SAMPLES)
        .map(|i| {
            let z = if i + 1 == FOCUS_SCAN_SAMPLES { hi } else { lo + step * i as f64 };
            (z, rms(z))
        })
        .collect();
    let mut best = 0;
    for (i, p) in profile.iter().enumerate() {
        if p.1 < profile[best].1 {
            best = i;
        }
    }
    if best == 0 || best + 1 == FOCUS_SCAN_SAMPLES {
        return Err(Error::NoInteriorMinimum { lo, hi, profile });
    }
    let (mut a, mut b) = (profile[best - 1].0, profile[best + 1].0);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (rms(c), rms(d));
    while b - a > FOCUS_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = rms(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = rms(d);
        }
    }
    let z = 0.5 * (a + b);
    Ok(FocusResult {
        plane_z: z,
        spot_rms: rms(z),
        profile,
    })
}

impl SpotDiagram {
    /// `x,y` per hit in mm, with the summary as trailing comment lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_mm,y_mm\n");
        for h in &self.hits {
            writeln!(out, "{:e},{:e}", h[0], h[1]).unwrap();
        }
        writeln!(out, "# plane_z_mm={:e}", self.plane_z).unwrap();
        writeln!(out, "# centroid_mm={:e},{:e}", self.centroid[0], self.centroid[1]).unwrap();
        writeln!(out, "# spot_rms_nm={:e}", self.spot_rms).unwrap();
        writeln!(out, "# flagged={}", self.flagged).unwrap();
        out
    }

    /// Scatter plot of the hits relative to the centroid, in µm.
    pub fn to_svg(&self, caption: &str) -> String {
        let size = 400.0;
        let margin = 40.0;
        let extent = self
            .hits
            .iter()
            .map(|h| (h[0] - self.centroid[0]).abs().max((h[1] - self.centroid[1]).abs()))
            .fold(0.0, f64::max)
            .max(1e-9);
        let scale = (size / 2.0 - margin) / extent;
        let mut svg = String::new();
        writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
        )
        .unwrap();
        writeln!(svg, r#"<rect width="{size}" height="{size}" fill="white"/>"#).unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{} mm: {:.1} nm RMS</text>"#,
            size / 2.0,
            fmt_plane(self.plane_z),
            self.spot_rms
        )
        .unwrap();
        if !caption.is_empty() {
            writeln!(
                svg,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                size / 2.0,
                size - 12.0,
                escape(caption)
            )
            .unwrap();
        }
        let c = size / 2.0;
        writeln!(svg, r##"<line x1="{margin}" y1="{c}" x2="{}" y2="{c}" stroke="#ccc"/>"##, size - margin).unwrap();
        writeln!(svg, r##"<line x1="{c}" y1="{margin}" x2="{c}" y2="{}" stroke="#ccc"/>"##, size - margin).unwrap();
        for h in &self.hits {
            let x = c + (h[0] - self.centroid[0]) * scale;
            let y = c - (h[1] - self.centroid[1]) * scale;
            writeln!(svg, r##"<circle cx="{x:.3}" cy="{y:.3}" r="1.5" fill="#1f4e9c"/>"##).unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">half-width {:.3} µm</text>"#,
            size - 6.0,
            size - 28.0,
            extent * 1e3
        )
        .unwrap();
        svg.push_str("</svg>\n");
        svg
    }
}

fn fmt_plane(z: f64) -> String {
    if (z - z.round()).abs() < 1e-9 {
        format!("{}", z.round() as i64)
    } else {
        format!("{z:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
