use rand::Rng;

use super::{House, RoomLayout};
use crate::geometry::{centroid, Point2};

/// Range of the per-house random scale applied at test time.
pub const TEST_SCALE_RANGE: (f64, f64) = (0.8, 1.0);

/// Multiplies every corner and every ground-truth translation by `s`.
pub fn scale_house(house: &House, s: f64) -> House {
    let mut out = house.clone();
    for room in &mut out.rooms {
        for c in &mut room.corners {
            *c = *c * s;
        }
    }
    for pose in &mut out.gt_poses {
        pose.translation = pose.translation * s;
    }
    out
}

/// Scales the house by one factor drawn uniformly from [`TEST_SCALE_RANGE`].
pub fn apply_test_scaling<R: Rng + ?Sized>(house: &House, rng: &mut R) -> House {
    let s = rng.gen_range(TEST_SCALE_RANGE.0..=TEST_SCALE_RANGE.1);
    scale_house(house, s)
}

/// Removes the room-type channel and/or the door information.
///
/// Dropping doors removes the door-corner nodes; each room is re-centered on
/// its remaining corners and its ground-truth translation moved accordingly.
pub fn corrupt_house(house: &House, drop_types: bool, drop_doors: bool) -> House {
    let mut out = house.clone();
    if drop_types {
        for room in &mut out.rooms {
            room.room_type = None;
        }
    }
    if drop_doors {
        for (room, pose) in out.rooms.iter_mut().zip(out.gt_poses.iter_mut()) {
            let kept: Vec<Point2> = room
                .corners
                .iter()
                .zip(&room.door_flags)
                .filter(|(_, &d)| !d)
                .map(|(&c, _)| c)
                .collect();
            let shift = centroid(&kept).unwrap_or(Point2::ORIGIN);
            pose.translation = pose.transform(shift);
            *room = RoomLayout {
                room_type: room.room_type,
                door_flags: vec![false; kept.len()],
                corners: kept.into_iter().map(|c| c - shift).collect(),
            };
        }
        out.door_pairs.clear();
    }
    out
}
