//! Planar primitives: points, Manhattan rotations, room poses.
//!
//! Conventions: y axis points up and rotations are counter-clockwise
//! positive. Room corner loops are stored counter-clockwise.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{JigsawError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, rhs: Point2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Point2 {
    type Output = Point2;
    fn div(self, s: f64) -> Point2 {
        Point2::new(self.x / s, self.y / s)
    }
}

/// A rotation by `k * 90` degrees counter-clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Rotation4(u8);

impl Rotation4 {
    pub const IDENTITY: Rotation4 = Rotation4(0);
    pub const ALL: [Rotation4; 4] = [Rotation4(0), Rotation4(1), Rotation4(2), Rotation4(3)];

    pub fn new(k: u8) -> Result<Self> {
        if k < 4 {
            Ok(Rotation4(k))
        } else {
            Err(JigsawError::InvalidConfig(format!(
                "rotation index {k} is outside 0..=3"
            )))
        }
    }

    /// Reduces any integer modulo 4.
    pub fn wrapping(k: i64) -> Self {
        Rotation4(k.rem_euclid(4) as u8)
    }

    pub fn k(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// `self` applied after `other`.
    pub fn compose(self, other: Rotation4) -> Rotation4 {
        Rotation4((self.0 + other.0) % 4)
    }

    pub fn inverse(self) -> Rotation4 {
        Rotation4((4 - self.0) % 4)
    }

    pub fn matrix(self) -> [[i32; 2]; 2] {
        rotation_matrix(self)
    }

    pub fn apply(self, p: Point2) -> Point2 {
        // Entries are 0/±1, so this is exact.
        match self.0 {
            0 => p,
            1 => Point2::new(-p.y, p.x),
            2 => Point2::new(-p.x, -p.y),
            _ => Point2::new(p.y, -p.x),
        }
    }
}

impl TryFrom<u8> for Rotation4 {
    type Error = JigsawError;
    fn try_from(k: u8) -> Result<Self> {
        Rotation4::new(k)
    }
}

impl From<Rotation4> for u8 {
    fn from(r: Rotation4) -> u8 {
        r.0
    }
}

/// Placement of one room: the room-center translation and its Manhattan rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "t")]
    pub translation: Point2,
    #[serde(rename = "k")]
    pub rotation: Rotation4,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        translation: Point2::ORIGIN,
        rotation: Rotation4::IDENTITY,
    };

    pub fn new(translation: Point2, rotation: Rotation4) -> Self {
        Pose {
            translation,
            rotation,
        }
    }

    pub fn transform(&self, p: Point2) -> Point2 {
        self.translation + self.rotation.apply(p)
    }
}

fn require_polygon(corners: &[Point2]) -> Result<()> {
    if corners.len() < 3 {
        return Err(JigsawError::InvalidPolygon(format!(
            "need at least 3 corners, got {}",
            corners.len()
        )));
    }
    Ok(())
}

/// Arithmetic mean of the corner coordinates.
pub fn centroid(corners: &[Point2]) -> Result<Point2> {
    require_polygon(corners)?;
    let sum = corners
        .iter()
        .fold(Point2::ORIGIN, |acc, &c| acc + c);
    Ok(sum / corners.len() as f64)
}

/// Subtracts the centroid from every corner. Returns `(centered, center)`.
pub fn normalize_room(corners: &[Point2]) -> Result<(Vec<Point2>, Point2)> {
    let center = centroid(corners)?;
    Ok((corners.iter().map(|&c| c - center).collect(), center))
}

/// Exact integer matrix of a `k * 90` degree counter-clockwise rotation, row-major.
pub fn rotation_matrix(r: Rotation4) -> [[i32; 2]; 2] {
    match r.k() {
        0 => [[1, 0], [0, 1]],
        1 => [[0, -1], [1, 0]],
        2 => [[-1, 0], [0, -1]],
        _ => [[0, 1], [-1, 0]],
    }
}

pub fn apply_pose(centered_corners: &[Point2], pose: &Pose) -> Vec<Point2> {
    centered_corners.iter().map(|&c| pose.transform(c)).collect()
}

pub fn rotate_room(centered_corners: &[Point2], k: Rotation4) -> Vec<Point2> {
    centered_corners.iter().map(|&c| k.apply(c)).collect()
}

/// Twice the signed area (shoelace); positive for counter-clockwise loops.
pub fn signed_area2(corners: &[Point2]) -> f64 {
    let n = corners.len();
    (0..n)
        .map(|i| {
            let a = corners[i];
            let b = corners[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum()
}

pub fn polygon_area(corners: &[Point2]) -> f64 {
    0.5 * signed_area2(corners).abs()
}

pub fn is_counter_clockwise(corners: &[Point2]) -> bool {
    signed_area2(corners) > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn square() -> Vec<Point2> {
        vec![p(0., 0.), p(1., 0.), p(1., 1.), p(0., 1.)]
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&square()).unwrap(), p(0.5, 0.5));
        assert_eq!(centroid(&[p(0., 0.), p(3., 0.), p(0., 3.)]).unwrap(), p(1., 1.));
        assert_eq!(centroid(&[p(2., 7.); 4]).unwrap(), p(2., 7.));
        assert!(matches!(
            centroid(&[p(2., 7.); 2]),
            Err(JigsawError::InvalidPolygon(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let (c, center) = normalize_room(&square()).unwrap();
        assert_eq!(center, p(0.5, 0.5));
        assert_eq!(c, vec![p(-0.5, -0.5), p(0.5, -0.5), p(0.5, 0.5), p(-0.5, 0.5)]);

        let already = vec![p(-1., -1.), p(1., -1.), p(1., 1.), p(-1., 1.)];
        let (c, center) = normalize_room(&already).unwrap();
        assert_eq!(center, Point2::ORIGIN);
        assert_eq!(c, already);

        let l_shape = vec![p(0., 0.), p(2., 0.), p(2., 1.), p(1., 1.), p(1., 2.), p(0., 2.)];
        // (0+2+2+1+1+0)/6 = 1, same for y.
        let (c, center) = normalize_room(&l_shape).unwrap();
        assert_eq!(center, p(1., 1.));
        let s = c.iter().fold(Point2::ORIGIN, |a, &b| a + b);
        assert!(s.norm() < 1e-12);
    }

    #[test]
    fn rotation_matrices() {
        assert_eq!(rotation_matrix(Rotation4::new(0).unwrap()), [[1, 0], [0, 1]]);
        assert_eq!(rotation_matrix(Rotation4::new(1).unwrap()), [[0, -1], [1, 0]]);
        assert_eq!(rotation_matrix(Rotation4::new(2).unwrap()), [[-1, 0], [0, -1]]);
        assert!(Rotation4::new(4).is_err());
    }

    #[test]
    fn rotation_group_property() {
        for a in Rotation4::ALL {
            for b in Rotation4::ALL {
                let ma = rotation_matrix(a);
                let mb = rotation_matrix(b);
                let mut prod = [[0i32; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        prod[i][j] = (0..2).map(|l| ma[i][l] * mb[l][j]).sum();
                    }
                }
                assert_eq!(prod, rotation_matrix(a.compose(b)));
                assert_eq!(a.compose(a.inverse()), Rotation4::IDENTITY);
            }
        }
    }

    #[test]
    fn apply_matches_matrix() {
        let q = p(2.5, -1.25);
        for r in Rotation4::ALL {
            let m = rotation_matrix(r);
            let expect = p(
                m[0][0] as f64 * q.x + m[0][1] as f64 * q.y,
                m[1][0] as f64 * q.x + m[1][1] as f64 * q.y,
            );
            assert_eq!(r.apply(q), expect);
        }
    }

    #[test]
    fn apply_pose_examples() {
        let corners = square();
        assert_eq!(apply_pose(&corners, &Pose::IDENTITY), corners);
        let pose = Pose::new(p(10., 0.), Rotation4::IDENTITY);
        assert_eq!(apply_pose(&[p(1., 1.)], &pose), vec![p(11., 1.)]);
        let pose = Pose::new(Point2::ORIGIN, Rotation4::new(1).unwrap());
        assert_eq!(apply_pose(&[p(1., 0.)], &pose), vec![p(0., 1.)]);
    }

    #[test]
    fn rotate_room_examples() {
        let (sq, _) = normalize_room(&square()).unwrap();
        assert_eq!(rotate_room(&sq, Rotation4::IDENTITY), sq);
        for r in Rotation4::ALL {
            let mut rotated = rotate_room(&sq, r);
            let mut orig = sq.clone();
            let key = |a: &Point2, b: &Point2| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y));
            rotated.sort_by(key);
            orig.sort_by(key);
            assert_eq!(rotated, orig);
        }
        assert_eq!(rotate_room(&[p(2., 1.)], Rotation4::new(3).unwrap()), vec![p(1., -2.)]);
    }

    #[test]
    fn winding() {
        assert!(is_counter_clockwise(&square()));
        let mut cw = square();
        cw.reverse();
        assert!(!is_counter_clockwise(&cw));
        assert_eq!(polygon_area(&cw), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pts() -> impl Strategy<Value = Vec<Point2>> {
            prop::collection::vec((-200.0f64..200.0, -200.0f64..200.0), 3..12)
                .prop_map(|v| v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
        }

        proptest! {
            #[test]
            fn pose_then_normalize_is_zero_mean(c in pts(), tx in 0.0f64..256.0, ty in 0.0f64..256.0, k in 0u8..4) {
                let (centered, _) = normalize_room(&c).unwrap();
                let pose = Pose::new(Point2::new(tx, ty), Rotation4::new(k).unwrap());
                let placed = apply_pose(&centered, &pose);
                let (again, center) = normalize_room(&placed).unwrap();
                let drift = centroid(&again).unwrap();
                prop_assert!(drift.norm() < 1e-9);
                prop_assert!((center - pose.translation).norm() < 1e-9);
            }

            #[test]
            fn rotation_preserves_distances(c in pts(), k in 0u8..4) {
                let r = rotate_room(&c, Rotation4::new(k).unwrap());
                for i in 0..c.len() {
                    for j in 0..c.len() {
                        prop_assert_eq!(
                            (c[i] - c[j]).dot(c[i] - c[j]),
                            (r[i] - r[j]).dot(r[i] - r[j])
                        );
                    }
                }
            }
        }
    }
}
