//! Joint-prediction metrics: displacement errors, miss rate, box overlap,
//! cut-in rate and mAP, plus the submission and report formats.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::scene::{LaneId, Point, Polyline, Role, Scenario, STEP_SECONDS};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("degenerate box: length {length}, width {width}")]
    DegenerateBox { length: f64, width: f64 },
    #[error("invalid record {id}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no ground truth for scenario {0}")]
    MissingScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One predicted trajectory pair in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModePair<T> {
    pub score: T,
    #[serde(rename = "traj_A")]
    pub traj_a: Vec<Point<T>>,
    #[serde(rename = "traj_B")]
    pub traj_b: Vec<Point<T>>,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Submission<T> {
    pub scenario_id: String,
    pub modes: Vec<ModePair<T>>,
}

pub fn write_submissions<T: Scalar, W: Write>(mut w: W, subs: &[Submission<T>]) -> std::io::Result<()> {
    for s in subs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_submissions<T: Scalar, R: BufRead>(r: R) -> Result<Vec<Submission<T>>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTruth<T> {
    pub future: Vec<Point<T>>,
    /// Heading and speed at the final future step.
    pub final_heading: T,
    pub final_speed: T,
    /// Heading at the last observed step.
    pub last_heading: T,
    pub length: T,
    pub width: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord<T> {
    pub id: String,
    pub modes: Vec<ModePair<T>>,
    pub a: AgentTruth<T>,
    pub b: AgentTruth<T>,
    pub lanes: Vec<(LaneId, Polyline<T>)>,
}

impl<T: Scalar> EvalRecord<T> {
    pub fn from_scenario(s: &Scenario<T>, sub: &Submission<T>) -> Result<Self, MetricsError> {
        let truth = |role: Role| {
            let track = s.track(role);
            let fut = s.future(role);
            let last = fut.last().expect("validated future");
            AgentTruth {
                future: fut.iter().map(|st| st.position()).collect(),
                final_heading: last.heading,
                final_speed: last.speed,
                last_heading: s.last_observed(track).heading,
                length: track.length(),
                width: track.width(),
            }
        };
        let rec = Self {
            id: s.id(),
            modes: sub.modes.clone(),
            a: truth(Role::A),
            b: truth(Role::B),
            lanes: s
                .lanes
                .iter()
                .filter_map(|l| l.polyline().map(|p| (l.id, p)))
                .collect(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn horizon(&self) -> usize {
        self.a.future.len()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| MetricsError::InvalidRecord {
            id: self.id.clone(),
            message: m,
        };
        let t = self.horizon();
        if t == 0 || self.b.future.len() != t {
            return Err(bad("ground truth horizons differ or are empty".into()));
        }
        if self.modes.is_empty() {
            return Err(bad("no modes".into()));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.traj_a.len() != t || m.traj_b.len() != t {
                return Err(bad(format!("mode {k} has {}/{} steps, expected {t}", m.traj_a.len(), m.traj_b.len())));
            }
            if !m.score.is_finite() {
                return Err(bad(format!("mode {k} has a non-finite score")));
            }
        }
        Ok(())
    }

    /// Highest-scored mode, ties to the lower index.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (k, m) in self.modes.iter().enumerate() {
            if m.score > self.modes[best].score {
                best = k;
            }
        }
        best
    }
}

fn mean_dist<T: Scalar>(p: &[Point<T>], q: &[Point<T>]) -> T {
    p.iter().zip(q).map(|(a, b)| a.dist(*b)).sum::<T>()
}

/// Per-mode average displacement over both agents and all steps.
pub fn mode_ade<T: Scalar>(rec: &EvalRecord<T>, k: usize) -> T {
    let m = &rec.modes[k];
    let t = T::from_usize(2 * rec.horizon()).unwrap();
    (mean_dist(&m.traj_a, &rec.a.future) + mean_dist(&m.traj_b, &rec.b.future)) / t
}

pub fn mode_fde<T: Scalar>(rec: &EvalRecord<T>, k: usize) -> T {
    let m = &rec.modes[k];
    let ea = m.traj_a.last().unwrap().dist(*rec.a.future.last().unwrap());
    let eb = m.traj_b.last().unwrap().dist(*rec.b.future.last().unwrap());
    (ea + eb) / T::lit(2.0)
}

fn min_over_modes<T: Scalar>(rec: &EvalRecord<T>, f: impl Fn(usize) -> T) -> T {
    (0..rec.modes.len()).map(f).fold(T::infinity(), T::min)
}

pub fn min_ade<T: Scalar>(rec: &EvalRecord<T>) -> T {
    min_over_modes(rec, |k| mode_ade(rec, k))
}

pub fn min_fde<T: Scalar>(rec: &EvalRecord<T>) -> T {
    min_over_modes(rec, |k| mode_fde(rec, k))
}

/// Lateral/longitudinal thresholds grown with horizon and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityThresholds {
    pub lateral_short: f64,
    pub longitudinal_short: f64,
    pub lateral_long: f64,
    pub longitudinal_long: f64,
    pub t_short: f64,
    pub t_long: f64,
    pub speed_low: f64,
    pub speed_high: f64,
    pub factor_low: f64,
}

impl Default for VelocityThresholds {
    fn default() -> Self {
        Self {
            lateral_short: 1.0,
            longitudinal_short: 2.0,
            lateral_long: 3.0,
            longitudinal_long: 6.0,
            t_short: 3.0,
            t_long: 8.0,
            speed_low: 1.4,
            speed_high: 11.0,
            factor_low: 0.5,
        }
    }
}

impl VelocityThresholds {
    /// `(lateral, longitudinal)` thresholds at horizon `t` seconds and
    /// final speed `v`.
    pub fn at(&self, t: f64, v: f64) -> (f64, f64) {
        let u = ((t - self.t_short) / (self.t_long - self.t_short)).clamp(0.0, 1.0);
        let lat = self.lateral_short + u * (self.lateral_long - self.lateral_short);
        let lon = self.longitudinal_short + u * (self.longitudinal_long - self.longitudinal_short);
        let w = ((v - self.speed_low) / (self.speed_high - self.speed_low)).clamp(0.0, 1.0);
        let f = self.factor_low + w * (1.0 - self.factor_low);
        (lat * f, lon * f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MissRegime {
    Fixed { threshold: f64 },
    Velocity(VelocityThresholds),
}

impl MissRegime {
    pub fn fixed() -> Self {
        MissRegime::Fixed { threshold: 2.0 }
    }

    pub fn velocity() -> Self {
        MissRegime::Velocity(VelocityThresholds::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            MissRegime::Fixed { .. } => "fixed",
            MissRegime::Velocity(_) => "velocity",
        }
    }
}

fn agent_misses<T: Scalar>(pred: Point<T>, truth: &AgentTruth<T>, horizon: usize, regime: &MissRegime) -> bool {
    let gt = *truth.future.last().unwrap();
    match regime {
        MissRegime::Fixed { threshold } => pred.dist(gt).to_f64_lossy() > *threshold,
        MissRegime::Velocity(th) => {
            let d = pred.sub(gt).rotate(-truth.final_heading);
            let t = horizon as f64 * STEP_SECONDS;
            let (lat, lon) = th.at(t, truth.final_speed.to_f64_lossy());
            d.y.to_f64_lossy().abs() > lat || d.x.to_f64_lossy().abs() > lon
        }
    }
}

/// A mode misses when either agent's endpoint misses.
pub fn mode_is_miss<T: Scalar>(rec: &EvalRecord<T>, k: usize, regime: &MissRegime) -> bool {
    let m = &rec.modes[k];
    let t = rec.horizon();
    agent_misses(*m.traj_a.last().unwrap(), &rec.a, t, regime)
        || agent_misses(*m.traj_b.last().unwrap(), &rec.b, t, regime)
}

pub fn record_is_miss<T: Scalar>(rec: &EvalRecord<T>, regime: &MissRegime) -> bool {
    (0..rec.modes.len()).all(|k| mode_is_miss(rec, k, regime))
}

pub fn miss_rate<T: Scalar>(records: &[EvalRecord<T>], regime: &MissRegime) -> f64 {
    let n = records.iter().filter(|r| record_is_miss(r, regime)).count();
    n as f64 / records.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox<T> {
    pub center: Point<T>,
    pub heading: T,
    pub length: T,
    pub width: T,
}

impl<T: Scalar> OrientedBox<T> {
    pub fn new(center: Point<T>, heading: T, length: T, width: T) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    fn check(&self) -> Result<(), MetricsError> {
        let ok = |v: T| v.is_finite() && v > T::zero();
        if ok(self.length) && ok(self.width) && self.center.x.is_finite() && self.center.y.is_finite() {
            Ok(())
        } else {
            Err(MetricsError::DegenerateBox {
                length: self.length.to_f64_lossy(),
                width: self.width.to_f64_lossy(),
            })
        }
    }

    /// Corners counter-clockwise.
    pub fn corners(&self) -> [Point<T>; 4] {
        let h = T::lit(0.5);
        let (l, w) = (self.length * h, self.width * h);
        [
            Point::new(l, -w),
            Point::new(l, w),
            Point::new(-l, w),
            Point::new(-l, -w),
        ]
        .map(|c| c.rotate(self.heading).add(self.center))
    }

    pub fn area(&self) -> T {
        self.length * self.width
    }
}

fn polygon_area<T: Scalar>(poly: &[Point<T>]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let twice: T = (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum();
    twice.abs() / T::lit(2.0)
}

/// Area of the intersection of two boxes by convex clipping.
pub fn intersection_area<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> Result<T, MetricsError> {
    a.check()?;
    b.check()?;
    let mut poly = a.corners().to_vec();
    let clip = b.corners();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % 4]);
        let edge = e1.sub(e0);
        let side = |p: Point<T>| edge.cross(p.sub(e0));
        let input = std::mem::take(&mut poly);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= T::zero() {
                poly.push(p);
            }
            if (sp >= T::zero()) != (sq >= T::zero()) {
                let u = sp / (sp - sq);
                poly.push(p.add(q.sub(p).scale(u)));
            }
        }
    }
    Ok(polygon_area(&poly))
}

pub fn obb_iou<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> Result<T, MetricsError> {
    let inter = intersection_area(a, b)?;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).min(T::one()).max(T::zero()))
}

/// Box headings along a predicted path: the first step keeps the last
/// observed heading, later steps follow the displacement, holding the
/// previous heading when the path stalls.
pub fn path_headings<T: Scalar>(path: &[Point<T>], last_heading: T) -> Vec<T> {
    let mut out = Vec::with_capacity(path.len());
    let mut h = last_heading;
    for (i, p) in path.iter().enumerate() {
        if i > 0 {
            let d = p.sub(path[i - 1]);
            if d.norm() > T::lit(1e-6) {
                h = d.y.atan2(d.x);
            }
        }
        out.push(h);
    }
    out
}

pub const OVERLAP_AREA_EPS: f64 = 1e-9;

/// Whether the boxes of the top-scored pair overlap at any future step.
pub fn record_overlaps<T: Scalar>(rec: &EvalRecord<T>) -> Result<bool, MetricsError> {
    let m = &rec.modes[rec.best_mode()];
    let ha = path_headings(&m.traj_a, rec.a.last_heading);
    let hb = path_headings(&m.traj_b, rec.b.last_heading);
    for d in 0..m.traj_a.len() {
        let ba = OrientedBox::new(m.traj_a[d], ha[d], rec.a.length, rec.a.width);
        let bb = OrientedBox::new(m.traj_b[d], hb[d], rec.b.length, rec.b.width);
        if intersection_area(&ba, &bb)?.to_f64_lossy() > OVERLAP_AREA_EPS {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn overlap_rate<T: Scalar>(records: &[EvalRecord<T>]) -> Result<f64, MetricsError> {
    let mut n = 0;
    for r in records {
        if record_overlaps(r)? {
            n += 1;
        }
    }
    Ok(n as f64 / records.len().max(1) as f64)
}

pub const LANE_SNAP_RADIUS: f64 = 3.0;

/// Nearest lane within the snap radius as `(lane index, arc length)`;
/// ties go to the earlier lane.
pub fn locate_on_lane<T: Scalar>(lanes: &[(LaneId, Polyline<T>)], p: Point<T>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T, T)> = None;
    for (i, (_, line)) in lanes.iter().enumerate() {
        let pr = line.project(p);
        if pr.distance.to_f64_lossy() <= LANE_SNAP_RADIUS && best.map_or(true, |(_, d, _)| pr.distance < d) {
            best = Some((i, pr.distance, pr.arc));
        }
    }
    best.map(|(i, _, s)| (i, s))
}

/// B's endpoint ahead of A's on the same lane, top-scored pair.
pub fn record_cuts_in<T: Scalar>(rec: &EvalRecord<T>) -> bool {
    let m = &rec.modes[rec.best_mode()];
    let la = locate_on_lane(&rec.lanes, *m.traj_a.last().unwrap());
    let lb = locate_on_lane(&rec.lanes, *m.traj_b.last().unwrap());
    matches!((la, lb), (Some((ia, sa)), Some((ib, sb))) if ia == ib && sb > sa)
}

/// Cut-in frames over safety (non-overlapping) frames; `None` without any
/// safety frame.
pub fn cut_in_rate<T: Scalar>(records: &[EvalRecord<T>]) -> Result<Option<f64>, MetricsError> {
    let mut safe = 0;
    let mut cut = 0;
    for r in records {
        if !record_overlaps(r)? {
            safe += 1;
            if record_cuts_in(r) {
                cut += 1;
            }
        }
    }
    Ok((safe > 0).then(|| cut as f64 / safe as f64))
}

/// Area under the interpolated precision-recall curve. Every record has
/// one possible true positive: its first non-missing mode by score.
pub fn map_score<T: Scalar>(records: &[EvalRecord<T>], regime: &MissRegime) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut entries: Vec<(T, usize, usize)> = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for (k, m) in rec.modes.iter().enumerate() {
            entries.push((m.score, k, r));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(records[a.2].id.cmp(&records[b.2].id))
            .then(a.2.cmp(&b.2))
    });
    let mut matched = vec![false; records.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(entries.len());
    for (i, &(_, k, r)) in entries.iter().enumerate() {
        if !matched[r] && !mode_is_miss(&records[r], k, regime) {
            matched[r] = true;
            tp += 1;
        }
        points.push((tp as f64 / records.len() as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// One line of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub regime: String,
    pub value: Option<f64>,
}

/// All metrics under one miss regime.
pub fn metric_rows<T: Scalar>(records: &[EvalRecord<T>], regime: &MissRegime) -> Result<Vec<MetricRow>, MetricsError> {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalRecord<T>) -> T| records.iter().map(|r| f(r).to_f64_lossy()).sum::<f64>() / n;
    let row = |metric: &str, regime: &str, value: Option<f64>| MetricRow {
        metric: metric.into(),
        regime: regime.into(),
        value,
    };
    Ok(vec![
        row("minADE", "all", Some(mean(&|r| min_ade(r)))),
        row("minFDE", "all", Some(mean(&|r| min_fde(r)))),
        row("MR", regime.name(), Some(miss_rate(records, regime))),
        row("OR", "all", Some(overlap_rate(records)?)),
        row("CR", "all", cut_in_rate(records)?),
        row("mAP", regime.name(), Some(map_score(records, regime))),
    ])
}
