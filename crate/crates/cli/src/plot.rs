//! Static SVG rendering of one scenario with its top-scored prediction.

use std::fmt::Write;

use cgtp_core::metrics::EvalRecord;
use cgtp_core::scene::{Point, Role, Scenario};

const MARGIN: f64 = 5.0;

struct Bounds {
    min: (f64, f64),
    max: (f64, f64),
}

impl Bounds {
    fn new() -> Self {
        Self {
            min: (f64::INFINITY, f64::INFINITY),
            max: (f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn add(&mut self, p: &Point<f64>) {
        self.min = (self.min.0.min(p.x), self.min.1.min(p.y));
        self.max = (self.max.0.max(p.x), self.max.1.max(p.y));
    }
}

fn path(points: &[Point<f64>], stroke: &str, width: f64, dash: Option<&str>) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let _ = write!(d, "{}{:.3},{:.3}", if i == 0 { "M" } else { " L" }, p.x, 0.0 - p.y);
    }
    let dash = dash.map(|v| format!(r#" stroke-dasharray="{v}""#)).unwrap_or_default();
    format!(r#"  <path d="{d}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#)
}

/// Lanes in grey, observed history solid, ground-truth future dashed and
/// the top-scored predicted pair in colour (A blue, B red).
pub fn scenario_svg(s: &Scenario<f64>, rec: &EvalRecord<f64>) -> String {
    let mut b = Bounds::new();
    let lanes: Vec<&[Point<f64>]> = s.lanes.iter().map(|l| l.centerline.as_slice()).collect();
    let history = |role: Role| -> Vec<Point<f64>> {
        let t = s.track(role);
        s.history(t).iter().map(|st| st.position()).collect()
    };
    let future = |role: Role| -> Vec<Point<f64>> { s.future(role).iter().map(|st| st.position()).collect() };
    let top = &rec.modes[rec.best_mode()];
    let agents = [
        (history(Role::A), future(Role::A), &top.traj_a, "#1f77b4"),
        (history(Role::B), future(Role::B), &top.traj_b, "#d62728"),
    ];
    for (h, f, p, _) in &agents {
        h.iter().chain(f).chain(p.iter()).for_each(|q| b.add(q));
    }
    for l in &lanes {
        l.iter().for_each(|q| b.add(q));
    }
    let (x0, y0) = (b.min.0 - MARGIN, -b.max.1 - MARGIN);
    let (w, h) = (b.max.0 - b.min.0 + 2.0 * MARGIN, b.max.1 - b.min.1 + 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.3} {y0:.3} {w:.3} {h:.3}" width="800" height="{:.0}">"#,
        800.0 * h / w
    );
    let _ = writeln!(out, "  <title>{}</title>", s.id());
    let _ = writeln!(out, r#"  <rect x="{x0:.3}" y="{y0:.3}" width="{w:.3}" height="{h:.3}" fill="white"/>"#);
    for l in &lanes {
        let _ = writeln!(out, "{}", path(l, "#bbbbbb", 0.4, None));
    }
    for (hist, fut, pred, colour) in &agents {
        let _ = writeln!(out, "{}", path(hist, colour, 0.5, None));
        let _ = writeln!(out, "{}", path(fut, "#333333", 0.35, Some("1,0.6")));
        let _ = writeln!(out, "{}", path(pred, colour, 0.35, Some("0.3,0.3")));
        if let Some(e) = pred.last() {
            let _ = writeln!(out, r#"  <circle cx="{:.3}" cy="{:.3}" r="0.6" fill="{colour}"/>"#, e.x, 0.0 - e.y);
        }
    }
    out.push_str("</svg>\n");
    out
}
