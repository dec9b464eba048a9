//! Procedural Manhattan floorplans.
//!
//! A rectangular footprint is cut by recursive guillotine splits with
//! jittered positions; a few sibling cells are then merged into L/T-shaped
//! rooms. Rooms touching along a long enough wall are candidates for doors;
//! a random spanning tree of candidates (plus a few extra) becomes the door
//! set, so the room graph is always connected. All geometry lives on the
//! integer grid, which makes shared door corners coincide exactly.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    DoorPair, House, RoomLayout, RoomType, MAX_HOUSE_CORNERS, MAX_ROOMS, MIN_HOUSE_CORNERS,
    MIN_ROOMS, ROOM_TYPE_NAMES,
};
use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Pose, Rotation4};

const MAX_ATTEMPTS: usize = 64;
/// Room centers are snapped to multiples of 2^-40 so that
/// `center + (corner - center)` reproduces integer corners exactly.
const CENTER_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_rooms: usize,
    /// Side of the square frame the house must fit in, in pixels.
    pub frame: u32,
    pub min_room_side: u32,
    /// Per-room chance of being built from two merged cells.
    pub merge_probability: f64,
    /// Chance that a door-capable wall outside the spanning tree gets a door.
    pub extra_door_probability: f64,
    /// Door width in pixels; must be even.
    pub door_width: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_rooms: 5,
            frame: 256,
            min_room_side: 24,
            merge_probability: 0.3,
            extra_door_probability: 0.25,
            door_width: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn with_rooms(n_rooms: usize) -> Self {
        GeneratorConfig {
            n_rooms,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(MIN_ROOMS..=MAX_ROOMS).contains(&self.n_rooms) {
            return Err(JigsawError::InvalidConfig(format!(
                "n_rooms must be in {MIN_ROOMS}..={MAX_ROOMS}, got {}",
                self.n_rooms
            )));
        }
        if self.min_room_side == 0 || self.frame == 0 {
            return Err(JigsawError::InvalidConfig(
                "frame and min_room_side must be positive".into(),
            ));
        }
        if self.door_width < 2 || self.door_width % 2 != 0 {
            return Err(JigsawError::InvalidConfig(format!(
                "door width must be even and at least 2, got {}",
                self.door_width
            )));
        }
        if !(0.0..=1.0).contains(&self.merge_probability)
            || !(0.0..=1.0).contains(&self.extra_door_probability)
        {
            return Err(JigsawError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

impl Rect {
    fn w(&self) -> i32 {
        self.x1 - self.x0
    }
    fn h(&self) -> i32 {
        self.y1 - self.y0
    }
    fn area(&self) -> i64 {
        self.w() as i64 * self.h() as i64
    }
}

/// Length of the wall shared by two rectangles, and whether their union is a rectangle.
fn shared_wall(a: &Rect, b: &Rect) -> (i32, bool) {
    if a.x1 == b.x0 || b.x1 == a.x0 {
        let len = a.y1.min(b.y1) - a.y0.max(b.y0);
        (len.max(0), a.y0 == b.y0 && a.y1 == b.y1)
    } else if a.y1 == b.y0 || b.y1 == a.y0 {
        let len = a.x1.min(b.x1) - a.x0.max(b.x0);
        (len.max(0), a.x0 == b.x0 && a.x1 == b.x1)
    } else {
        (0, false)
    }
}

struct Retry(&'static str);

type Ipt = (i32, i32);

/// Seed and room count of house `index` in a dataset drawn with `seed`,
/// room counts uniform over `rooms`.
pub fn dataset_entry(seed: u64, index: u64, rooms: (usize, usize)) -> (u64, usize) {
    let mut rng = crate::keyed::keyed_rng(seed, "gen-data", &[index]);
    (rng.gen(), rng.gen_range(rooms.0..=rooms.1))
}

/// `n` houses sorted by id; entry `i` depends only on `(seed, i, rooms, cfg)`.
pub fn generate_dataset(n: usize, seed: u64, rooms: (usize, usize), cfg: &GeneratorConfig) -> Result<Vec<House>> {
    if rooms.0 > rooms.1 {
        return Err(JigsawError::InvalidConfig(format!("empty room range {}-{}", rooms.0, rooms.1)));
    }
    let mut out = (0..n as u64)
        .map(|i| {
            let (s, r) = dataset_entry(seed, i, rooms);
            generate_house(s, &GeneratorConfig { n_rooms: r, ..cfg.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Generates one house. Pure function of `(seed, cfg)`.
pub fn generate_house(seed: u64, cfg: &GeneratorConfig) -> Result<House> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = "";
    for _ in 0..MAX_ATTEMPTS {
        match try_generate(&mut rng, cfg) {
            Ok(mut house) => {
                house.id = format!("gen-{seed:016x}");
                return Ok(house);
            }
            Err(Retry(why)) => last = why,
        }
    }
    Err(JigsawError::Generation(format!(
        "no valid layout for {} rooms with min side {} after {MAX_ATTEMPTS} attempts ({last})",
        cfg.n_rooms, cfg.min_room_side
    )))
}

fn try_generate(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> std::result::Result<House, Retry> {
    let frame = cfg.frame as i32;
    let min_side = cfg.min_room_side as i32;

    // Footprint: the long side spans the frame, the short side is random.
    let short = rng.gen_range(frame / 2..=frame);
    let (w, h) = if rng.gen_bool(0.5) { (frame, short) } else { (short, frame) };
    let footprint = Rect {
        x0: (frame - w) / 2,
        y0: (frame - h) / 2,
        x1: (frame - w) / 2 + w,
        y1: (frame - h) / 2 + h,
    };

    let n_merge = (0..cfg.n_rooms)
        .filter(|_| rng.gen_bool(cfg.merge_probability))
        .count()
        .min(cfg.n_rooms / 2);
    let cells = guillotine(rng, footprint, cfg.n_rooms + n_merge, min_side)?;
    let labels = merge_cells(rng, &cells, n_merge, min_side)?;
    let n_rooms = cfg.n_rooms;

    let grid = LabelGrid::new(&cells, &labels);
    let mut loops: Vec<Vec<Ipt>> = (0..n_rooms).map(|r| grid.trace(r)).collect();
    let mut flags: Vec<Vec<bool>> = loops.iter().map(|l| vec![false; l.len()]).collect();

    // Door candidates: the longest shared wall per room pair.
    let min_run = cfg.door_width as i32 + 2;
    let mut candidates: Vec<((usize, usize), Run)> = grid
        .longest_runs()
        .into_iter()
        .filter(|(_, run)| run.hi - run.lo >= min_run)
        .collect();
    candidates.shuffle(rng);

    let mut parent: Vec<usize> = (0..n_rooms).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut doors = Vec::new();
    let mut extra = Vec::new();
    for (pair, run) in candidates {
        let (ra, rb) = (find(&mut parent, pair.0), find(&mut parent, pair.1));
        if ra != rb {
            parent[ra] = rb;
            doors.push((pair, run));
        } else {
            extra.push((pair, run));
        }
    }
    if doors.len() + 1 != n_rooms {
        return Err(Retry("room graph is not connected through door-capable walls"));
    }
    for d in extra {
        if rng.gen_bool(cfg.extra_door_probability) {
            doors.push(d);
        }
    }
    doors.sort_by_key(|(pair, _)| *pair);

    let half = cfg.door_width as i32 / 2;
    let mut door_points = Vec::with_capacity(doors.len());
    for ((ra, rb), run) in &doors {
        let mid = (run.lo + run.hi).div_euclid(2);
        let (p, q) = match run.axis {
            Axis::Vertical => ((run.at, mid - half), (run.at, mid + half)),
            Axis::Horizontal => ((mid - half, run.at), (mid + half, run.at)),
        };
        for r in [*ra, *rb] {
            insert_door(&mut loops[r], &mut flags[r], p, q)
                .map_err(|_| Retry("door does not lie on a room wall"))?;
        }
        door_points.push((*ra, *rb, p, q));
    }

    let mut door_pairs = Vec::with_capacity(2 * door_points.len());
    for (ra, rb, p, q) in door_points {
        for pt in [p, q] {
            let ia = door_index(&loops[ra], &flags[ra], pt).ok_or(Retry("lost door corner"))?;
            let ib = door_index(&loops[rb], &flags[rb], pt).ok_or(Retry("lost door corner"))?;
            door_pairs.push(DoorPair {
                room_a: ra,
                corner_a: ia,
                room_b: rb,
                corner_b: ib,
            });
        }
    }

    let total: usize = loops.iter().map(Vec::len).sum();
    if !(MIN_HOUSE_CORNERS..=MAX_HOUSE_CORNERS).contains(&total) {
        return Err(Retry("corner count out of range"));
    }

    let types = assign_types(rng, &loops, &flags);
    let mut rooms = Vec::with_capacity(n_rooms);
    let mut gt_poses = Vec::with_capacity(n_rooms);
    for ((lp, fl), ty) in loops.iter().zip(flags).zip(types) {
        let n = lp.len() as f64;
        let (sx, sy) = lp
            .iter()
            .fold((0i64, 0i64), |(ax, ay), &(x, y)| (ax + x as i64, ay + y as i64));
        let center = Point2::new(
            (sx as f64 / n / CENTER_QUANTUM).round() * CENTER_QUANTUM,
            (sy as f64 / n / CENTER_QUANTUM).round() * CENTER_QUANTUM,
        );
        rooms.push(RoomLayout {
            room_type: Some(ty),
            corners: lp
                .iter()
                .map(|&(x, y)| Point2::new(x as f64, y as f64) - center)
                .collect(),
            door_flags: fl,
        });
        gt_poses.push(Pose::new(center, Rotation4::IDENTITY));
    }
    Ok(House {
        id: String::new(),
        rooms,
        gt_poses,
        door_pairs,
    })
}

fn guillotine(
    rng: &mut ChaCha8Rng,
    footprint: Rect,
    target: usize,
    min_side: i32,
) -> std::result::Result<Vec<Rect>, Retry> {
    let mut cells = vec![footprint];
    while cells.len() < target {
        let splittable: Vec<usize> = (0..cells.len())
            .filter(|&i| cells[i].w().max(cells[i].h()) >= 2 * min_side)
            .collect();
        if splittable.is_empty() {
            return Err(Retry("no cell is large enough to split"));
        }
        let total: i64 = splittable.iter().map(|&i| cells[i].area()).sum();
        let mut pick = rng.gen_range(0..total);
        let mut idx = splittable[0];
        for &i in &splittable {
            if pick < cells[i].area() {
                idx = i;
                break;
            }
            pick -= cells[i].area();
        }
        let c = cells[idx];
        let can_x = c.w() >= 2 * min_side;
        let can_y = c.h() >= 2 * min_side;
        let split_x = match (can_x, can_y) {
            (true, true) => {
                let longer_is_x = c.w() >= c.h();
                if rng.gen_bool(0.8) {
                    longer_is_x
                } else {
                    !longer_is_x
                }
            }
            (x, _) => x,
        };
        let (lo, hi) = if split_x { (c.x0, c.x1) } else { (c.y0, c.y1) };
        let frac: f64 = rng.gen_range(0.3..0.7);
        let at = (lo + ((hi - lo) as f64 * frac).round() as i32).clamp(lo + min_side, hi - min_side);
        let (a, b) = if split_x {
            (Rect { x1: at, ..c }, Rect { x0: at, ..c })
        } else {
            (Rect { y1: at, ..c }, Rect { y0: at, ..c })
        };
        cells[idx] = a;
        cells.push(b);
    }
    Ok(cells)
}

/// Assigns a room label per cell, merging `n_merge` adjacent pairs into non-rectangular rooms.
fn merge_cells(
    rng: &mut ChaCha8Rng,
    cells: &[Rect],
    n_merge: usize,
    min_side: i32,
) -> std::result::Result<Vec<usize>, Retry> {
    let mut partner: Vec<Option<usize>> = vec![None; cells.len()];
    for _ in 0..n_merge {
        let mut options = Vec::new();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if partner[i].is_some() || partner[j].is_some() {
                    continue;
                }
                let (len, is_rect) = shared_wall(&cells[i], &cells[j]);
                if len >= min_side && !is_rect {
                    options.push((i, j));
                }
            }
        }
        let &(i, j) = options.choose(rng).ok_or(Retry("no cell pair can be merged"))?;
        partner[i] = Some(j);
        partner[j] = Some(i);
    }
    let mut labels = vec![usize::MAX; cells.len()];
    let mut next = 0;
    for i in 0..cells.len() {
        if labels[i] != usize::MAX {
            continue;
        }
        labels[i] = next;
        if let Some(j) = partner[i] {
            labels[j] = next;
        }
        next += 1;
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Axis {
    /// A wall on the line `x = at`.
    Vertical,
    /// A wall on the line `y = at`.
    Horizontal,
}

#[derive(Clone, Copy, Debug)]
struct Run {
    axis: Axis,
    at: i32,
    lo: i32,
    hi: i32,
}

/// Room labels on the compressed grid induced by all cell boundaries.
struct LabelGrid {
    xs: Vec<i32>,
    ys: Vec<i32>,
    labels: Vec<Option<usize>>,
}

impl LabelGrid {
    fn new(cells: &[Rect], cell_labels: &[usize]) -> Self {
        let mut xs: Vec<i32> = cells.iter().flat_map(|c| [c.x0, c.x1]).collect();
        let mut ys: Vec<i32> = cells.iter().flat_map(|c| [c.y0, c.y1]).collect();
        xs.sort_unstable();
        xs.dedup();
        ys.sort_unstable();
        ys.dedup();
        let (nx, ny) = (xs.len() - 1, ys.len() - 1);
        let mut labels = vec![None; nx * ny];
        for (c, &lab) in cells.iter().zip(cell_labels) {
            let i0 = xs.binary_search(&c.x0).unwrap();
            let i1 = xs.binary_search(&c.x1).unwrap();
            let j0 = ys.binary_search(&c.y0).unwrap();
            let j1 = ys.binary_search(&c.y1).unwrap();
            for j in j0..j1 {
                for i in i0..i1 {
                    labels[j * nx + i] = Some(lab);
                }
            }
        }
        LabelGrid { xs, ys, labels }
    }

    fn nx(&self) -> usize {
        self.xs.len() - 1
    }

    fn ny(&self) -> usize {
        self.ys.len() - 1
    }

    fn at(&self, i: isize, j: isize) -> Option<usize> {
        if i < 0 || j < 0 || i as usize >= self.nx() || j as usize >= self.ny() {
            return None;
        }
        self.labels[j as usize * self.nx() + i as usize]
    }

    /// Counter-clockwise boundary loop of `room`, collinear vertices removed,
    /// starting at its lowest-then-leftmost vertex.
    fn trace(&self, room: usize) -> Vec<Ipt> {
        let mut next: HashMap<Ipt, Ipt> = HashMap::new();
        for j in 0..self.ny() as isize {
            for i in 0..self.nx() as isize {
                if self.at(i, j) != Some(room) {
                    continue;
                }
                let (x0, x1) = (self.xs[i as usize], self.xs[i as usize + 1]);
                let (y0, y1) = (self.ys[j as usize], self.ys[j as usize + 1]);
                if self.at(i, j - 1) != Some(room) {
                    next.insert((x0, y0), (x1, y0));
                }
                if self.at(i + 1, j) != Some(room) {
                    next.insert((x1, y0), (x1, y1));
                }
                if self.at(i, j + 1) != Some(room) {
                    next.insert((x1, y1), (x0, y1));
                }
                if self.at(i - 1, j) != Some(room) {
                    next.insert((x0, y1), (x0, y0));
                }
            }
        }
        let start = *next.keys().min_by_key(|&&(x, y)| (y, x)).unwrap();
        let mut raw = vec![start];
        let mut cur = next[&start];
        while cur != start {
            raw.push(cur);
            cur = next[&cur];
        }
        let n = raw.len();
        let keep: Vec<Ipt> = (0..n)
            .filter(|&k| {
                let a = raw[(k + n - 1) % n];
                let b = raw[k];
                let c = raw[(k + 1) % n];
                let cross = (b.0 - a.0) as i64 * (c.1 - b.1) as i64 - (b.1 - a.1) as i64 * (c.0 - b.0) as i64;
                cross != 0
            })
            .map(|k| raw[k])
            .collect();
        let s = keep
            .iter()
            .enumerate()
            .min_by_key(|(_, &(x, y))| (y, x))
            .map(|(k, _)| k)
            .unwrap();
        keep[s..].iter().chain(&keep[..s]).copied().collect()
    }

    /// The longest contiguous shared wall of every touching room pair.
    fn longest_runs(&self) -> Vec<((usize, usize), Run)> {
        let mut pieces: BTreeMap<((usize, usize), Axis, i32), Vec<(i32, i32)>> = BTreeMap::new();
        for j in 0..self.ny() as isize {
            for i in 0..self.nx() as isize {
                let Some(here) = self.at(i, j) else { continue };
                if let Some(right) = self.at(i + 1, j) {
                    if right != here {
                        let key = ((here.min(right), here.max(right)), Axis::Vertical, self.xs[i as usize + 1]);
                        pieces
                            .entry(key)
                            .or_default()
                            .push((self.ys[j as usize], self.ys[j as usize + 1]));
                    }
                }
                if let Some(up) = self.at(i, j + 1) {
                    if up != here {
                        let key = ((here.min(up), here.max(up)), Axis::Horizontal, self.ys[j as usize + 1]);
                        pieces
                            .entry(key)
                            .or_default()
                            .push((self.xs[i as usize], self.xs[i as usize + 1]));
                    }
                }
            }
        }
        let mut best: BTreeMap<(usize, usize), Run> = BTreeMap::new();
        for ((pair, axis, at), mut segs) in pieces {
            segs.sort_unstable();
            let mut runs: Vec<(i32, i32)> = Vec::new();
            for (lo, hi) in segs {
                match runs.last_mut() {
                    Some(last) if last.1 == lo => last.1 = hi,
                    _ => runs.push((lo, hi)),
                }
            }
            for (lo, hi) in runs {
                let run = Run { axis, at, lo, hi };
                match best.get(&pair) {
                    Some(b) if b.hi - b.lo >= hi - lo => {}
                    _ => {
                        best.insert(pair, run);
                    }
                }
            }
        }
        best.into_iter().collect()
    }
}

fn on_segment(a: Ipt, b: Ipt, p: Ipt) -> bool {
    if a.0 == b.0 && p.0 == a.0 {
        p.1 > a.1.min(b.1) && p.1 < a.1.max(b.1)
    } else if a.1 == b.1 && p.1 == a.1 {
        p.0 > a.0.min(b.0) && p.0 < a.0.max(b.0)
    } else {
        false
    }
}

fn insert_door(lp: &mut Vec<Ipt>, flags: &mut Vec<bool>, p: Ipt, q: Ipt) -> std::result::Result<(), ()> {
    let n = lp.len();
    for e in 0..n {
        let a = lp[e];
        let b = lp[(e + 1) % n];
        if on_segment(a, b, p) && on_segment(a, b, q) {
            let dist = |x: Ipt| (x.0 - a.0).abs() + (x.1 - a.1).abs();
            let (first, second) = if dist(p) < dist(q) { (p, q) } else { (q, p) };
            lp.insert(e + 1, second);
            lp.insert(e + 1, first);
            flags.insert(e + 1, true);
            flags.insert(e + 1, true);
            return Ok(());
        }
    }
    Err(())
}

fn door_index(lp: &[Ipt], flags: &[bool], p: Ipt) -> Option<usize> {
    (0..lp.len()).find(|&i| flags[i] && lp[i] == p)
}

/// Largest room is the living room, the smallest a toilet or closet, the rest random.
fn assign_types(rng: &mut ChaCha8Rng, loops: &[Vec<Ipt>], flags: &[Vec<bool>]) -> Vec<RoomType> {
    let areas: Vec<i64> = loops
        .iter()
        .zip(flags)
        .map(|(lp, fl)| {
            let pts: Vec<Ipt> = lp.iter().zip(fl).filter(|(_, &d)| !d).map(|(&p, _)| p).collect();
            let n = pts.len();
            (0..n)
                .map(|i| {
                    let (a, b) = (pts[i], pts[(i + 1) % n]);
                    a.0 as i64 * b.1 as i64 - b.0 as i64 * a.1 as i64
                })
                .sum::<i64>()
        })
        .collect();
    let mut order: Vec<usize> = (0..loops.len()).collect();
    order.sort_by_key(|&r| (std::cmp::Reverse(areas[r]), r));
    let others: Vec<u8> = (0..ROOM_TYPE_NAMES.len() as u8)
        .filter(|&t| ![RoomType::LIVING_ROOM, RoomType::TOILET, RoomType::CLOSET].contains(&RoomType(t)))
        .collect();
    let mut types = vec![RoomType::LIVING_ROOM; loops.len()];
    let last = *order.last().unwrap();
    for &r in &order[1..] {
        types[r] = if r == last {
            if rng.gen_bool(0.5) {
                RoomType::TOILET
            } else {
                RoomType::CLOSET
            }
        } else {
            RoomType(*others.choose(rng).unwrap())
        };
    }
    types
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::is_counter_clockwise;

    #[test]
    fn three_room_house() {
        let h = generate_house(1, &GeneratorConfig::with_rooms(3)).unwrap();
        h.validate().unwrap();
        assert_eq!(h.num_rooms(), 3);
        assert!(h.door_pairs.len() >= 4, "two doors give four shared corners");
        for r in &h.rooms {
            assert!(is_counter_clockwise(&r.corners));
        }
    }

    #[test]
    fn room_count_precondition() {
        assert!(matches!(
            generate_house(1, &GeneratorConfig::with_rooms(2)),
            Err(JigsawError::InvalidConfig(_))
        ));
        assert!(generate_house(1, &GeneratorConfig::with_rooms(11)).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = GeneratorConfig::with_rooms(7);
        let a = serde_json::to_string(&generate_house(99, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_house(99, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_min_side() {
        let cfg = GeneratorConfig {
            n_rooms: 10,
            min_room_side: 120,
            ..Default::default()
        };
        assert!(matches!(generate_house(3, &cfg), Err(JigsawError::Generation(_))));
    }

    #[test]
    fn door_corners_coincide_under_gt() {
        for seed in 0..200 {
            let n = 3 + (seed % 8) as usize;
            let h = generate_house(seed, &GeneratorConfig::with_rooms(n)).unwrap();
            for dp in &h.door_pairs {
                let a = h.gt_poses[dp.room_a].transform(h.rooms[dp.room_a].corners[dp.corner_a]);
                let b = h.gt_poses[dp.room_b].transform(h.rooms[dp.room_b].corners[dp.corner_b]);
                assert_eq!(a, b, "seed {seed}");
            }
        }
    }

    #[test]
    fn produces_non_rectangular_rooms() {
        let found = (0..50).any(|seed| {
            let h = generate_house(seed, &GeneratorConfig::with_rooms(6)).unwrap();
            h.rooms.iter().any(|r| r.num_room_corners() > 4)
        });
        assert!(found);
    }
}
