//! House/room data model, the JSONL dataset format, the procedural floorplan
//! generator and the test-time transforms (random scaling, information removal).

mod generator;
mod jsonl;
mod transform;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Pose};

pub use generator::{dataset_entry, generate_dataset, generate_house, GeneratorConfig};
pub use jsonl::{from_jsonl_str, read_jsonl, to_jsonl_string, write_jsonl};
pub use transform::{apply_test_scaling, corrupt_house, scale_house, TEST_SCALE_RANGE};

/// Room types known to the model. Index 25 is reserved for door corners.
pub const ROOM_TYPE_NAMES: [&str; 25] = [
    "living_room",
    "kitchen",
    "bedroom",
    "bathroom",
    "toilet",
    "closet",
    "corridor",
    "balcony",
    "den",
    "dining_room",
    "study",
    "laundry",
    "storage",
    "garage",
    "entrance",
    "master_bedroom",
    "guest_room",
    "kids_room",
    "office",
    "utility",
    "pantry",
    "walk_in_closet",
    "family_room",
    "playroom",
    "gym",
];

/// Length of the room/door type one-hot vector.
pub const NUM_TYPES: usize = 26;

/// Corner-count bounds for a generated house.
pub const MIN_HOUSE_CORNERS: usize = 12;
pub const MAX_HOUSE_CORNERS: usize = 182;

pub const MIN_ROOMS: usize = 3;
pub const MAX_ROOMS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RoomType(u8);

impl RoomType {
    pub const LIVING_ROOM: RoomType = RoomType(0);
    pub const TOILET: RoomType = RoomType(4);
    pub const CLOSET: RoomType = RoomType(5);
    pub const DOOR: RoomType = RoomType(25);

    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < NUM_TYPES {
            Ok(RoomType(id))
        } else {
            Err(JigsawError::InvalidConfig(format!(
                "room type {id} is outside 0..{NUM_TYPES}"
            )))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        ROOM_TYPE_NAMES.get(self.0 as usize).copied().unwrap_or("door")
    }

    pub fn one_hot(self) -> [f64; NUM_TYPES] {
        let mut v = [0.0; NUM_TYPES];
        v[self.0 as usize] = 1.0;
        v
    }
}

impl TryFrom<u8> for RoomType {
    type Error = JigsawError;
    fn try_from(id: u8) -> Result<Self> {
        RoomType::new(id)
    }
}

impl From<RoomType> for u8 {
    fn from(t: RoomType) -> u8 {
        t.0
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One room: a zero-mean corner loop mixing room and door corners.
///
/// `room_type` is `None` when the type channel has been removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomLayout {
    #[serde(rename = "type")]
    pub room_type: Option<RoomType>,
    pub corners: Vec<Point2>,
    pub door_flags: Vec<bool>,
}

impl RoomLayout {
    pub fn num_corners(&self) -> usize {
        self.corners.len()
    }

    pub fn num_room_corners(&self) -> usize {
        self.door_flags.iter().filter(|&&d| !d).count()
    }

    /// Door segments as pairs of corner indices, in loop order.
    ///
    /// Door corners must form runs of even length when the loop is walked
    /// starting from a room corner; consecutive door corners pair up.
    pub fn door_segments(&self) -> std::result::Result<Vec<(usize, usize)>, String> {
        let n = self.corners.len();
        let Some(start) = self.door_flags.iter().position(|&d| !d) else {
            return Err("room has no room corners".into());
        };
        let mut segs = Vec::new();
        let mut pending: Option<usize> = None;
        for step in 1..=n {
            let i = (start + step) % n;
            if self.door_flags[i] {
                match pending.take() {
                    None => pending = Some(i),
                    Some(a) => segs.push((a, i)),
                }
            } else if pending.is_some() {
                return Err(format!("door corner {} has no partner", pending.unwrap()));
            }
        }
        if let Some(a) = pending {
            return Err(format!("door corner {a} has no partner"));
        }
        Ok(segs)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.corners.len() != self.door_flags.len() {
            return Err(format!(
                "{} corners but {} door flags",
                self.corners.len(),
                self.door_flags.len()
            ));
        }
        if self.num_room_corners() < 3 {
            return Err(format!(
                "room needs at least 3 room corners, has {}",
                self.num_room_corners()
            ));
        }
        if let Some(c) = self.corners.iter().find(|c| !c.is_finite()) {
            return Err(format!("non-finite corner {c:?}"));
        }
        let n = self.corners.len() as f64;
        let mean = self.corners.iter().fold(Point2::ORIGIN, |a, &c| a + c) / n;
        let scale = self
            .corners
            .iter()
            .map(|c| c.x.abs().max(c.y.abs()))
            .fold(1.0, f64::max);
        if mean.norm() > 1e-6 * scale {
            return Err(format!("corners are not zero-mean (mean {mean:?})"));
        }
        self.door_segments().map(|_| ())
    }
}

/// One shared door corner: corner `corner_a` of room `room_a` coincides with
/// corner `corner_b` of room `room_b` in the assembled floorplan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct DoorPair {
    pub room_a: usize,
    pub corner_a: usize,
    pub room_b: usize,
    pub corner_b: usize,
}

impl From<[usize; 4]> for DoorPair {
    fn from(v: [usize; 4]) -> Self {
        DoorPair {
            room_a: v[0],
            corner_a: v[1],
            room_b: v[2],
            corner_b: v[3],
        }
    }
}

impl From<DoorPair> for [usize; 4] {
    fn from(d: DoorPair) -> Self {
        [d.room_a, d.corner_a, d.room_b, d.corner_b]
    }
}

/// A door between two rooms, given by the door segment in each room.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Door {
    pub room_a: usize,
    pub segment_a: (usize, usize),
    pub room_b: usize,
    pub segment_b: (usize, usize),
}

/// One benchmark instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct House {
    pub id: String,
    pub rooms: Vec<RoomLayout>,
    pub gt_poses: Vec<Pose>,
    pub door_pairs: Vec<DoorPair>,
}

impl House {
    pub fn num_rooms(&self) -> usize {
        self.rooms.len()
    }

    pub fn num_corners(&self) -> usize {
        self.rooms.iter().map(RoomLayout::num_corners).sum()
    }

    pub fn has_doors(&self) -> bool {
        !self.door_pairs.is_empty()
    }

    fn invalid(&self, message: impl Into<String>) -> JigsawError {
        JigsawError::Validation {
            house_id: self.id.clone(),
            message: message.into(),
        }
    }

    /// Structural validation of everything the file format promises.
    pub fn validate(&self) -> Result<()> {
        if self.rooms.len() != self.gt_poses.len() {
            return Err(self.invalid(format!(
                "{} rooms but {} ground-truth poses",
                self.rooms.len(),
                self.gt_poses.len()
            )));
        }
        if !(MIN_ROOMS..=MAX_ROOMS).contains(&self.rooms.len()) {
            return Err(self.invalid(format!(
                "room count {} outside {MIN_ROOMS}..={MAX_ROOMS}",
                self.rooms.len()
            )));
        }
        for (r, room) in self.rooms.iter().enumerate() {
            room.validate()
                .map_err(|m| self.invalid(format!("room {r}: {m}")))?;
        }
        for (r, pose) in self.gt_poses.iter().enumerate() {
            if !pose.translation.is_finite() {
                return Err(self.invalid(format!("pose {r} is not finite")));
            }
        }
        for (i, dp) in self.door_pairs.iter().enumerate() {
            if dp.room_a == dp.room_b {
                return Err(self.invalid(format!("door pair {i} joins room {} to itself", dp.room_a)));
            }
            for (room, corner) in [(dp.room_a, dp.corner_a), (dp.room_b, dp.corner_b)] {
                let flag = self
                    .rooms
                    .get(room)
                    .and_then(|r| r.door_flags.get(corner))
                    .copied();
                match flag {
                    None => {
                        return Err(self.invalid(format!(
                            "door pair {i} references missing corner {corner} of room {room}"
                        )))
                    }
                    Some(false) => {
                        return Err(self.invalid(format!(
                            "door pair {i} references corner {corner} of room {room}, which is not a door corner"
                        )))
                    }
                    Some(true) => {}
                }
            }
        }
        Ok(())
    }

    /// World-frame corners of room `r` under `pose`.
    pub fn placed_corners(&self, r: usize, pose: &Pose) -> Vec<Point2> {
        crate::geometry::apply_pose(&self.rooms[r].corners, pose)
    }

    /// Groups door pairs into doors (one per shared door segment).
    pub fn doors(&self) -> Result<Vec<Door>> {
        let segments: Vec<Vec<(usize, usize)>> = self
            .rooms
            .iter()
            .enumerate()
            .map(|(r, room)| {
                room.door_segments()
                    .map_err(|m| self.invalid(format!("room {r}: {m}")))
            })
            .collect::<Result<_>>()?;
        let find = |room: usize, corner: usize| -> Result<(usize, usize)> {
            segments[room]
                .iter()
                .copied()
                .find(|&(a, b)| a == corner || b == corner)
                .ok_or_else(|| {
                    self.invalid(format!("corner {corner} of room {room} is not on a door"))
                })
        };
        let mut doors: BTreeMap<(usize, (usize, usize), usize, (usize, usize)), ()> = BTreeMap::new();
        for dp in &self.door_pairs {
            let sa = find(dp.room_a, dp.corner_a)?;
            let sb = find(dp.room_b, dp.corner_b)?;
            let key = if (dp.room_a, sa) <= (dp.room_b, sb) {
                (dp.room_a, sa, dp.room_b, sb)
            } else {
                (dp.room_b, sb, dp.room_a, sa)
            };
            doors.insert(key, ());
        }
        Ok(doors
            .into_keys()
            .map(|(room_a, segment_a, room_b, segment_b)| Door {
                room_a,
                segment_a,
                room_b,
                segment_b,
            })
            .collect())
    }

    /// Room pairs joined by at least one door, as `(min, max)`.
    pub fn door_adjacency(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .door_pairs
            .iter()
            .map(|d| (d.room_a.min(d.room_b), d.room_a.max(d.room_b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

/// Deterministic 90/5/5 train/val/test assignment keyed on the house id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSplit {
    Train,
    Val,
    Test,
}

impl DatasetSplit {
    pub fn of(house_id: &str) -> DatasetSplit {
        let digest = Sha256::digest(house_id.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        match u64::from_le_bytes(bytes) % 100 {
            0..=89 => DatasetSplit::Train,
            90..=94 => DatasetSplit::Val,
            _ => DatasetSplit::Test,
        }
    }
}

impl std::str::FromStr for DatasetSplit {
    type Err = JigsawError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetSplit::Train),
            "val" => Ok(DatasetSplit::Val),
            "test" => Ok(DatasetSplit::Test),
            other => Err(JigsawError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(corners: &[(f64, f64)], doors: &[bool]) -> RoomLayout {
        RoomLayout {
            room_type: Some(RoomType::new(1).unwrap()),
            corners: corners.iter().map(|&(x, y)| Point2::new(x, y)).collect(),
            door_flags: doors.to_vec(),
        }
    }

    #[test]
    fn one_hot_length_and_door_type() {
        let t = RoomType::new(3).unwrap();
        let v = t.one_hot();
        assert_eq!(v.len(), NUM_TYPES);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(RoomType::DOOR.name(), "door");
        assert!(RoomType::new(26).is_err());
    }

    #[test]
    fn door_segments_pair_consecutive_corners() {
        let r = room(
            &[(-2., -1.), (-1., -1.), (1., -1.), (2., -1.), (2., 1.), (-2., 1.)],
            &[false, true, true, false, false, false],
        );
        assert_eq!(r.door_segments().unwrap(), vec![(1, 2)]);
        let odd = room(
            &[(-2., -1.), (-1., -1.), (2., -1.), (2., 1.), (-2., 1.)],
            &[false, true, false, false, false],
        );
        assert!(odd.door_segments().is_err());
    }

    #[test]
    fn split_is_deterministic_and_roughly_balanced() {
        let mut counts = [0usize; 3];
        for i in 0..2000 {
            let id = format!("house-{i}");
            let s = DatasetSplit::of(&id);
            assert_eq!(s, DatasetSplit::of(&id));
            counts[s as usize] += 1;
        }
        assert!(counts[0] > 1700 && counts[1] > 50 && counts[2] > 50, "{counts:?}");
    }
}
