use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{House, RoomType, NUM_TYPES};
use crate::diffusion::{encode_rotation, normalize_position, POS_SCALE};
use crate::error::{JigsawError, Result};
use crate::geometry::{rotate_room, Point2, Pose, Rotation4};
use crate::numcore::{AttentionLayout, Tensor};

/// Width of the per-corner condition: 2 corner coordinates plus the type one-hot.
pub const COND_DIM: usize = 2 + NUM_TYPES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Rooms arrive in ground-truth orientation; only positions are estimated.
    GtGiven,
    /// Rooms arrive randomly rotated; rotation is estimated too.
    #[default]
    Estimated,
}

impl RotationMode {
    pub fn state_dim(self) -> usize {
        match self {
            RotationMode::GtGiven => 2,
            RotationMode::Estimated => 6,
        }
    }
}

impl std::str::FromStr for RotationMode {
    type Err = JigsawError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_given" | "gt-given" => Ok(RotationMode::GtGiven),
            "estimated" => Ok(RotationMode::Estimated),
            other => Err(JigsawError::InvalidConfig(format!("unknown rotation mode `{other}`"))),
        }
    }
}

/// One house laid out as model tokens (one per corner).
///
/// Sample room `j` is house room `room_order[j]`, fed to the model rotated by
/// `input_rotation[j]`. Tokens are grouped by sample room, in corner order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub house_id: String,
    pub mode: RotationMode,
    pub room_order: Vec<usize>,
    pub input_rotation: Vec<Rotation4>,
    /// Pose that places each (input-rotated) sample room at its ground truth.
    pub targets: Vec<Pose>,
    /// Per token: (sample room, corner index in that room).
    pub tokens: Vec<(usize, usize)>,
    /// Per token: input-rotated, room-centered corner in pixels.
    pub corners: Vec<Point2>,
    /// Per token: type one-hot index, if any.
    pub type_ids: Vec<Option<u8>>,
    /// Token index pairs that coincide in the assembled layout.
    pub door_pairs: Vec<(usize, usize)>,
}

impl Sample {
    /// Lays out `house` with the given room order and input rotations.
    ///
    /// In [`RotationMode::GtGiven`] every input rotation must be the
    /// ground-truth one, so that targets carry the identity rotation.
    pub fn new(house: &House, mode: RotationMode, room_order: &[usize], input_rotation: &[Rotation4]) -> Result<Self> {
        let n = house.num_rooms();
        let mut seen = vec![false; n];
        if room_order.len() != n || input_rotation.len() != n {
            return Err(JigsawError::shape("sample layout", &[n], &[room_order.len(), input_rotation.len()]));
        }
        for &r in room_order {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(JigsawError::InvalidConfig(format!("room order {room_order:?} is not a permutation")));
            }
        }
        let mut tokens = Vec::with_capacity(house.num_corners());
        let mut corners = Vec::with_capacity(house.num_corners());
        let mut type_ids = Vec::with_capacity(house.num_corners());
        let mut targets = Vec::with_capacity(n);
        let mut first_token = vec![0; n];
        for (j, (&r, &k_in)) in room_order.iter().zip(input_rotation).enumerate() {
            let room = &house.rooms[r];
            let gt = house.gt_poses[r];
            // rotating the input by k_in means R(label) must undo it before R(gt)
            let label = gt.rotation.compose(k_in.inverse());
            if mode == RotationMode::GtGiven && label != Rotation4::IDENTITY {
                return Err(JigsawError::InvalidConfig(
                    "gt_given mode requires rooms in ground-truth orientation".into(),
                ));
            }
            targets.push(Pose::new(gt.translation, label));
            first_token[r] = tokens.len();
            let rotated = rotate_room(&room.corners, k_in);
            for (i, (c, &door)) in rotated.into_iter().zip(&room.door_flags).enumerate() {
                tokens.push((j, i));
                corners.push(c);
                type_ids.push(if door {
                    Some(RoomType::DOOR.id())
                } else {
                    room.room_type.map(RoomType::id)
                });
            }
        }
        let door_pairs = house
            .door_pairs
            .iter()
            .map(|d| (first_token[d.room_a] + d.corner_a, first_token[d.room_b] + d.corner_b))
            .collect();
        Ok(Sample {
            house_id: house.id.clone(),
            mode,
            room_order: room_order.to_vec(),
            input_rotation: input_rotation.to_vec(),
            targets,
            tokens,
            corners,
            type_ids,
            door_pairs,
        })
    }

    /// Identity room order with ground-truth orientation (no augmentation).
    pub fn canonical(house: &House, mode: RotationMode) -> Result<Self> {
        let order: Vec<usize> = (0..house.num_rooms()).collect();
        let rot: Vec<Rotation4> = house.gt_poses.iter().map(|p| p.rotation).collect();
        Sample::new(house, mode, &order, &rot)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_rooms(&self) -> usize {
        self.room_order.len()
    }

    /// Clean per-token state: the room target broadcast to all of its corners.
    pub fn gt_state(&self) -> Tensor {
        let d = self.mode.state_dim();
        let mut data = Vec::with_capacity(self.tokens.len() * d);
        for &(j, _) in &self.tokens {
            let t = &self.targets[j];
            data.extend_from_slice(&normalize_position(t.translation));
            if d == 6 {
                data.extend_from_slice(&encode_rotation(t.rotation));
            }
        }
        Tensor::matrix(self.tokens.len(), d, data)
    }

    /// Maps a per-sample-room result back to house room order.
    pub fn to_house_order<T: Clone>(&self, per_sample_room: &[T]) -> Vec<T> {
        let mut out: Vec<Option<T>> = vec![None; per_sample_room.len()];
        for (j, &r) in self.room_order.iter().enumerate() {
            out[r] = Some(per_sample_room[j].clone());
        }
        out.into_iter().map(|v| v.expect("room order is a permutation")).collect()
    }

    /// Converts a pose estimated for the input-rotated room into the house's
    /// own frame (where room corners sit in ground-truth orientation).
    pub fn pose_in_house_frame(&self, j: usize, estimated: Pose) -> Pose {
        Pose::new(estimated.translation, estimated.rotation.compose(self.input_rotation[j]))
    }
}

/// Several samples stacked into one token matrix.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
    /// `N x COND_DIM`: corners divided by the position scale, then the type one-hot.
    pub cond: Tensor,
    /// Per house: (first token, token count).
    pub spans: Vec<(usize, usize)>,
    pub house_of: Vec<usize>,
    /// Corner index within its house, used for the positional encoding.
    pub local_index: Vec<usize>,
    /// Room id unique across the batch.
    pub room_of: Vec<usize>,
    pub door_pairs: Vec<(usize, usize)>,
    pub rsa_layout: Rc<AttentionLayout>,
    pub gsa_layout: Rc<AttentionLayout>,
}

impl Batch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(JigsawError::InvalidConfig("empty batch".into()));
        }
        let mode = samples[0].mode;
        if samples.iter().any(|s| s.mode != mode) {
            return Err(JigsawError::InvalidConfig("batch mixes rotation modes".into()));
        }
        let total: usize = samples.iter().map(Sample::num_tokens).sum();
        let mut cond = Vec::with_capacity(total * COND_DIM);
        let mut spans = Vec::with_capacity(samples.len());
        let mut house_of = Vec::with_capacity(total);
        let mut local_index = Vec::with_capacity(total);
        let mut room_of = Vec::with_capacity(total);
        let mut door_pairs = Vec::new();
        let mut room_spans = Vec::new();
        let mut room_base = 0;
        for (h, s) in samples.iter().enumerate() {
            let start = house_of.len();
            spans.push((start, s.num_tokens()));
            for (i, ((&(j, _), c), ty)) in s.tokens.iter().zip(&s.corners).zip(&s.type_ids).enumerate() {
                cond.push(c.x / POS_SCALE);
                cond.push(c.y / POS_SCALE);
                let mut onehot = [0.0; NUM_TYPES];
                if let Some(t) = ty {
                    onehot[*t as usize] = 1.0;
                }
                cond.extend_from_slice(&onehot);
                house_of.push(h);
                local_index.push(i);
                room_of.push(room_base + j);
                match room_spans.last_mut() {
                    Some((room, _, len)) if *room == room_base + j => *len += 1,
                    _ => room_spans.push((room_base + j, start + i, 1)),
                }
            }
            door_pairs.extend(s.door_pairs.iter().map(|&(a, b)| (start + a, start + b)));
            room_base += s.num_rooms();
        }
        let rsa_layout = AttentionLayout::grouped(
            &room_spans.iter().map(|&(_, s, l)| (s, l)).collect::<Vec<_>>(),
            None,
        );
        let gsa_layout = AttentionLayout::grouped(&spans, None);
        Ok(Batch {
            cond: Tensor::matrix(total, COND_DIM, cond),
            spans,
            house_of,
            local_index,
            room_of,
            door_pairs,
            rsa_layout: Rc::new(rsa_layout),
            gsa_layout: Rc::new(gsa_layout),
            samples,
        })
    }

    pub fn mode(&self) -> RotationMode {
        self.samples[0].mode
    }

    pub fn state_dim(&self) -> usize {
        self.mode().state_dim()
    }

    pub fn num_tokens(&self) -> usize {
        self.house_of.len()
    }

    pub fn num_houses(&self) -> usize {
        self.samples.len()
    }

    pub fn gt_state(&self) -> Tensor {
        let parts: Vec<Tensor> = self.samples.iter().map(Sample::gt_state).collect();
        Tensor::concat_rows(&parts).expect("same state width")
    }

    /// Expands one value per house to one per token.
    pub fn per_token<T: Copy>(&self, per_house: &[T]) -> Vec<T> {
        self.house_of.iter().map(|&h| per_house[h]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};

    #[test]
    fn gt_state_reassembles_doors() {
        let house = generate_house(4, &GeneratorConfig::with_rooms(4)).unwrap();
        let order = [2, 0, 3, 1];
        let rot = [Rotation4::wrapping(1), Rotation4::wrapping(3), Rotation4::IDENTITY, Rotation4::wrapping(2)];
        let s = Sample::new(&house, RotationMode::Estimated, &order, &rot).unwrap();
        assert_eq!(s.num_tokens(), house.num_corners());
        assert_eq!(s.targets[0].rotation.k(), 3);
        assert_eq!(s.targets[1].rotation.k(), 1);
        // target pose applied to the rotated corners lands door corners together
        let place = |tok: usize| {
            let (j, _) = s.tokens[tok];
            s.targets[j].transform(s.corners[tok])
        };
        assert!(!s.door_pairs.is_empty());
        for &(a, b) in &s.door_pairs {
            assert!(place(a).distance(place(b)) < 1e-9);
        }
        let back = s.to_house_order(&s.targets);
        for (r, p) in back.iter().enumerate() {
            assert_eq!(p.translation, house.gt_poses[r].translation);
        }
    }

    #[test]
    fn gt_given_state_is_two_wide() {
        let house = generate_house(5, &GeneratorConfig::with_rooms(3)).unwrap();
        let s = Sample::canonical(&house, RotationMode::GtGiven).unwrap();
        assert_eq!(s.gt_state().cols(), 2);
        let bad = Sample::new(&house, RotationMode::GtGiven, &[0, 1, 2], &[Rotation4::wrapping(1); 3]);
        assert!(bad.is_err());
    }

    #[test]
    fn batch_layouts_follow_rooms_and_houses() {
        let a = generate_house(1, &GeneratorConfig::with_rooms(3)).unwrap();
        let b = generate_house(2, &GeneratorConfig::with_rooms(5)).unwrap();
        let batch = Batch::new(vec![
            Sample::canonical(&a, RotationMode::Estimated).unwrap(),
            Sample::canonical(&b, RotationMode::Estimated).unwrap(),
        ])
        .unwrap();
        assert_eq!(batch.num_tokens(), a.num_corners() + b.num_corners());
        assert_eq!(batch.rsa_layout.segments.len(), 8);
        assert_eq!(batch.gsa_layout.segments.len(), 2);
        assert_eq!(batch.cond.cols(), COND_DIM);
        let door_col = 2 + RoomType::DOOR.id() as usize;
        for t in 0..batch.num_tokens() {
            let row = batch.cond.row(t);
            assert_eq!(row[2..].iter().sum::<f64>(), 1.0);
            let (j, i) = batch.samples[batch.house_of[t]].tokens[batch.local_index[t]];
            let house = if batch.house_of[t] == 0 { &a } else { &b };
            assert_eq!(row[door_col] == 1.0, house.rooms[j].door_flags[i]);
        }
    }
}
