use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    let pi = T::from_f64(std::f64::consts::PI).unwrap();
    let two_pi = pi + pi;
    let mut r = a % two_pi;
    if r <= -pi {
        r = r + two_pi;
    } else if r > pi {
        r = r - two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", from = "[T; 2]", into = "[T; 2]")]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T> From<[T; 2]> for Point<T> {
    fn from([x, y]: [T; 2]) -> Self {
        Self { x, y }
    }
}

impl<T> From<Point<T>> for [T; 2] {
    fn from(p: Point<T>) -> Self {
        [p.x, p.y]
    }
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Self) -> T {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn rotate(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Position and heading; the reference frame of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Scalar> Pose<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn translation(&self) -> Point<T> {
        Point::new(self.x, self.y)
    }

    /// World point into this frame: `R(−heading)·(p − t)`.
    pub fn to_local(&self, p: Point<T>) -> Point<T> {
        p.sub(self.translation()).rotate(-self.heading)
    }

    /// Inverse of [`Pose::to_local`].
    pub fn to_world(&self, p: Point<T>) -> Point<T> {
        p.rotate(self.heading).add(self.translation())
    }

    pub fn pose_to_local(&self, p: &Pose<T>) -> Pose<T> {
        let q = self.to_local(p.translation());
        Pose::new(q.x, q.y, p.heading - self.heading)
    }

    pub fn pose_to_world(&self, p: &Pose<T>) -> Pose<T> {
        let q = self.to_world(p.translation());
        Pose::new(q.x, q.y, p.heading + self.heading)
    }

    /// Affine map `p ↦ M·p + c` taking points of `from`'s frame into this
    /// frame, returned as `(M row-major, c)`.
    pub fn relative_transform(&self, from: &Pose<T>) -> ([T; 4], Point<T>) {
        let (s, c) = (from.heading - self.heading).sin_cos();
        let offset = from.translation().sub(self.translation()).rotate(-self.heading);
        ([c, -s, s, c], offset)
    }
}

/// Expresses a world point or pose in the frame of `reference`.
pub fn to_agent_frame<T: Scalar>(p: Point<T>, reference: &Pose<T>) -> Point<T> {
    reference.to_local(p)
}

pub fn from_agent_frame<T: Scalar>(p: Point<T>, reference: &Pose<T>) -> Point<T> {
    reference.to_world(p)
}

/// Closest point on segment `a→b` to `p`: `(distance, fraction along segment)`.
pub fn project_on_segment<T: Scalar>(p: Point<T>, a: Point<T>, b: Point<T>) -> (T, T) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = if len2 > T::zero() {
        (p.sub(a).dot(ab) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let q = a.add(ab.scale(t));
    (p.dist(q), t)
}
