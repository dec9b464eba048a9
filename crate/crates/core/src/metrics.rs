//! Mean positional error and connectivity graph edit distance.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::House;
use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Pose};

/// Door-center distance (pixels) below which two rooms count as connected.
pub const CONNECT_THRESHOLD: f64 = 5.0;

/// Mean over rooms of the Euclidean distance between predicted and true room centers.
pub fn mpe(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(JigsawError::shape("mpe", &[pred.len()], &[gt.len()]));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.translation.distance(g.translation))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Shifts `pred` so its mean room center matches that of `gt`.
pub fn align_translation(pred: &[Pose], gt: &[Pose]) -> Vec<Pose> {
    if pred.is_empty() || pred.len() != gt.len() {
        return pred.to_vec();
    }
    let n = pred.len() as f64;
    let mean = |ps: &[Pose]| ps.iter().fold(Point2::ORIGIN, |a, p| a + p.translation) / n;
    let shift = mean(gt) - mean(pred);
    pred.iter()
        .map(|p| Pose::new(p.translation + shift, p.rotation))
        .collect()
}

/// Undirected simple graph over room indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    pub num_nodes: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl ConnectivityGraph {
    pub fn new(num_nodes: usize) -> Self {
        ConnectivityGraph {
            num_nodes,
            edges: BTreeSet::new(),
        }
    }

    /// Adds the edge `{a, b}`; self-loops and out-of-range nodes are rejected.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a == b || a >= self.num_nodes || b >= self.num_nodes {
            return Err(JigsawError::InvalidConfig(format!(
                "invalid edge ({a}, {b}) in a graph of {} nodes",
                self.num_nodes
            )));
        }
        self.edges.insert((a.min(b), a.max(b)));
        Ok(())
    }

    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = ConnectivityGraph::new(num_nodes);
        for &(a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.edges {
                let next = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Rooms are connected when the centers of a shared door, placed by each
/// room's pose, lie within `threshold` pixels.
pub fn connectivity(poses: &[Pose], house: &House, threshold: f64) -> Result<ConnectivityGraph> {
    if poses.len() != house.num_rooms() {
        return Err(JigsawError::shape("connectivity", &[poses.len()], &[house.num_rooms()]));
    }
    let mut graph = ConnectivityGraph::new(house.num_rooms());
    for door in house.doors()? {
        let center = |room: usize, (i, j): (usize, usize)| {
            let c = &house.rooms[room].corners;
            poses[room].transform(c[i]).midpoint(poses[room].transform(c[j]))
        };
        let a = center(door.room_a, door.segment_a);
        let b = center(door.room_b, door.segment_b);
        if a.distance(b) <= threshold {
            graph.add_edge(door.room_a, door.room_b)?;
        }
    }
    Ok(graph)
}

/// Edge edits turning `pred` into `gt`. Nodes correspond by index, so this
/// is the size of the symmetric difference of the edge sets.
pub fn ged(pred: &ConnectivityGraph, gt: &ConnectivityGraph) -> Result<usize> {
    if pred.num_nodes != gt.num_nodes {
        return Err(JigsawError::shape("ged", &[pred.num_nodes], &[gt.num_nodes]));
    }
    Ok(pred.edges.symmetric_difference(&gt.edges).count())
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub house_id: String,
    pub run: usize,
    pub mpe: f64,
    /// `None` when the house has no door information.
    pub ged: Option<usize>,
}

/// Writes `house_id,run,mpe,ged` rows; a missing GED is written as `NA`.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "house_id,run,mpe,ged")?;
    for r in rows {
        let ged = r.ged.map_or_else(|| "NA".to_string(), |g| g.to_string());
        writeln!(w, "{},{},{:.6},{}", r.house_id, r.run, r.mpe, ged)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};
    use crate::geometry::Rotation4;
    use proptest::prelude::*;

    fn at(x: f64, y: f64) -> Pose {
        Pose::new(Point2::new(x, y), Rotation4::IDENTITY)
    }

    #[test]
    fn mpe_examples() {
        let gt = vec![at(10.0, 10.0), at(50.0, 20.0)];
        assert_eq!(mpe(&gt, &gt).unwrap(), 0.0);
        let off: Vec<Pose> = gt.iter().map(|p| at(p.translation.x + 3.0, p.translation.y + 4.0)).collect();
        assert!((mpe(&off, &gt).unwrap() - 5.0).abs() < 1e-12);
        let mixed = vec![at(11.0, 10.0), at(50.0, 22.0)];
        assert!((mpe(&mixed, &gt).unwrap() - 1.5).abs() < 1e-12);
        assert!(mpe(&gt[..1], &gt).is_err());
    }

    #[test]
    fn alignment_removes_common_shift() {
        let gt = vec![at(10.0, 10.0), at(50.0, 20.0)];
        let off: Vec<Pose> = gt.iter().map(|p| at(p.translation.x - 7.0, p.translation.y + 2.0)).collect();
        assert!(mpe(&align_translation(&off, &gt), &gt).unwrap() < 1e-12);
    }

    #[test]
    fn ged_examples() {
        let g = |e: &[(usize, usize)]| ConnectivityGraph::from_edges(3, e).unwrap();
        assert_eq!(ged(&g(&[(0, 1)]), &g(&[(0, 1)])).unwrap(), 0);
        assert_eq!(ged(&g(&[(0, 1)]), &g(&[(0, 1), (1, 2)])).unwrap(), 1);
        assert_eq!(ged(&g(&[(0, 1), (1, 2)]), &g(&[(0, 1), (0, 2)])).unwrap(), 2);
        assert!(ged(&g(&[]), &ConnectivityGraph::new(4)).is_err());
        assert!(ConnectivityGraph::new(3).add_edge(1, 1).is_err());
    }

    #[test]
    fn gt_connectivity_matches_door_adjacency() {
        for seed in 0..20 {
            let h = generate_house(seed, &GeneratorConfig::with_rooms(3 + (seed as usize % 6))).unwrap();
            let g = connectivity(&h.gt_poses, &h, CONNECT_THRESHOLD).unwrap();
            let want: BTreeSet<_> = h.door_adjacency().into_iter().collect();
            assert_eq!(g.edges, want);
            assert!(g.is_connected());
        }
    }

    #[test]
    fn shifting_a_room_drops_its_doors() {
        let h = generate_house(11, &GeneratorConfig::with_rooms(4)).unwrap();
        let mut poses = h.gt_poses.clone();
        poses[0].translation.x += 10.0;
        let g = connectivity(&poses, &h, CONNECT_THRESHOLD).unwrap();
        assert!(g.edges.iter().all(|&(a, b)| a != 0 && b != 0));
        let all = connectivity(&poses, &h, f64::INFINITY).unwrap();
        let want: BTreeSet<_> = h.door_adjacency().into_iter().collect();
        assert_eq!(all.edges, want);
    }

    #[test]
    fn csv_marks_missing_ged() {
        let rows = vec![
            MetricRow { house_id: "a".into(), run: 0, mpe: 1.5, ged: Some(2) },
            MetricRow { house_id: "b".into(), run: 1, mpe: 0.0, ged: None },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "house_id,run,mpe,ged\na,0,1.500000,2\nb,1,0.000000,NA\n");
    }

    fn graph_strategy() -> impl Strategy<Value = ConnectivityGraph> {
        prop::collection::vec(any::<bool>(), 15).prop_map(|bits| {
            let mut g = ConnectivityGraph::new(6);
            let mut k = 0;
            for a in 0..6 {
                for b in a + 1..6 {
                    if bits[k] {
                        g.add_edge(a, b).unwrap();
                    }
                    k += 1;
                }
            }
            g
        })
    }

    proptest! {
        #[test]
        fn ged_is_a_metric(a in graph_strategy(), b in graph_strategy(), c in graph_strategy()) {
            let (ab, ba) = (ged(&a, &b).unwrap(), ged(&b, &a).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ged(&a, &a).unwrap(), 0);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(ged(&a, &c).unwrap() <= ab + ged(&b, &c).unwrap());
        }

        #[test]
        fn mpe_is_translation_equivariant(
            pts in prop::collection::vec((-300.0f64..300.0, -300.0f64..300.0, -300.0f64..300.0, -300.0f64..300.0), 1..10),
            vx in -100.0f64..100.0, vy in -100.0f64..100.0,
        ) {
            let pred: Vec<Pose> = pts.iter().map(|p| at(p.0, p.1)).collect();
            let gt: Vec<Pose> = pts.iter().map(|p| at(p.2, p.3)).collect();
            let shift = |ps: &[Pose]| ps.iter().map(|p| at(p.translation.x + vx, p.translation.y + vy)).collect::<Vec<_>>();
            let base = mpe(&pred, &gt).unwrap();
            prop_assert!((mpe(&shift(&pred), &shift(&gt)).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn connectivity_is_monotone_in_threshold(
            seed in 0u64..200, shifts in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 10),
            t1 in 0.0f64..12.0, dt in 0.0f64..12.0,
        ) {
            let h = generate_house(seed, &GeneratorConfig::with_rooms(3 + (seed as usize % 4))).unwrap();
            let poses: Vec<Pose> = h.gt_poses.iter().zip(&shifts).map(|(p, s)| {
                Pose::new(p.translation + Point2::new(s.0, s.1), p.rotation)
            }).collect();
            let lo = connectivity(&poses, &h, t1).unwrap();
            let hi = connectivity(&poses, &h, t1 + dt).unwrap();
            prop_assert!(lo.edges.is_subset(&hi.edges));
        }
    }
}
