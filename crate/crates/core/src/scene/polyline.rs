use super::geometry::{project_on_segment, Point};
use crate::scalar::Scalar;

/// Piecewise-linear curve with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline<T> {
    points: Vec<Point<T>>,
    cum: Vec<T>,
}

/// Closest point of a polyline to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub arc: T,
    pub distance: T,
    /// Direction of the segment holding the closest point.
    pub heading: T,
    /// Signed lateral offset, positive to the left of travel.
    pub lateral: T,
}

impl<T: Scalar> Polyline<T> {
    /// Consecutive duplicates are dropped. Needs at least two distinct points.
    pub fn new(points: impl IntoIterator<Item = Point<T>>) -> Option<Self> {
        let tiny = T::lit(1e-9);
        let mut pts: Vec<Point<T>> = Vec::new();
        for p in points {
            if pts.last().map_or(true, |q| q.dist(p) > tiny) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return None;
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(T::zero());
        for w in pts.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + w[0].dist(w[1]));
        }
        Some(Self { points: pts, cum })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn length(&self) -> T {
        *self.cum.last().unwrap()
    }

    fn segment_for(&self, s: T) -> usize {
        let n = self.points.len() - 1;
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 1),
        }
    }

    /// Point at arc length `s`; linear extrapolation beyond either end.
    pub fn point_at(&self, s: T) -> Point<T> {
        let i = self.segment_for(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let u = (s - self.cum[i]) / len;
        a.add(b.sub(a).scale(u))
    }

    pub fn heading_at(&self, s: T) -> T {
        let i = self.segment_for(s);
        let d = self.points[i + 1].sub(self.points[i]);
        d.y.atan2(d.x)
    }

    pub fn project(&self, p: Point<T>) -> Projection<T> {
        let mut best: Option<Projection<T>> = None;
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dist, u) = project_on_segment(p, a, b);
            if best.map_or(true, |bp| dist < bp.distance) {
                let d = b.sub(a);
                let lateral = d.cross(p.sub(a)) / d.norm();
                best = Some(Projection {
                    arc: self.cum[i] + u * (self.cum[i + 1] - self.cum[i]),
                    distance: dist,
                    heading: d.y.atan2(d.x),
                    lateral,
                });
            }
        }
        best.unwrap()
    }

    /// Sub-curve from arc length `s` to the end.
    pub fn tail_from(&self, s: T) -> Option<Self> {
        let start = self.point_at(s.max(T::zero()));
        let rest = self
            .points
            .iter()
            .zip(&self.cum)
            .filter(|(_, &c)| c > s)
            .map(|(p, _)| *p);
        Self::new(std::iter::once(start).chain(rest))
    }
}
