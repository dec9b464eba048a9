//! SVG drawings of room arrangements.

use std::fmt::Write;

use crate::data::House;
use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Pose};

const FRAME: f64 = 256.0;

#[derive(Clone, Debug)]
pub struct RenderOptions {
    /// Output pixels per frame unit.
    pub scale: f64,
    /// Draw the ground-truth arrangement faintly under the prediction.
    pub ghost_gt: bool,
    pub door_width: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            scale: 2.0,
            ghost_gt: true,
            door_width: 3.0,
        }
    }
}

/// Fill color of a room type id; untyped rooms are grey.
pub fn type_color(type_id: Option<u8>) -> String {
    match type_id {
        None => "#bdbdbd".to_string(),
        Some(id) => {
            // Golden-angle hue steps keep neighbouring ids apart.
            let hue = (f64::from(id) * 137.508) % 360.0;
            format!("hsl({hue:.0},60%,70%)")
        }
    }
}

fn points(ps: &[Point2]) -> String {
    let mut s = String::new();
    for (i, p) in ps.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        // y grows upward in the frame and downward in SVG.
        let _ = write!(s, "{:.3},{:.3}", p.x, FRAME - p.y);
    }
    s
}

fn layer(out: &mut String, house: &House, poses: &[Pose], opacity: f64, opt: &RenderOptions, class: &str) -> Result<()> {
    let _ = writeln!(out, r#"  <g class="{class}" opacity="{opacity}">"#);
    for (r, room) in house.rooms.iter().enumerate() {
        let placed = house.placed_corners(r, &poses[r]);
        let color = type_color(room.room_type.map(|t| t.id()));
        let _ = writeln!(
            out,
            r##"    <polygon points="{}" fill="{color}" stroke="#333" stroke-width="0.6"/>"##,
            points(&placed)
        );
        let segments = room
            .door_segments()
            .map_err(|message| JigsawError::Validation { house_id: house.id.clone(), message })?;
        for (i, j) in segments {
            let (a, b) = (placed[i], placed[j]);
            let _ = writeln!(
                out,
                r##"    <line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="#6d4c41" stroke-width="{}"/>"##,
                a.x,
                FRAME - a.y,
                b.x,
                FRAME - b.y,
                opt.door_width
            );
        }
    }
    out.push_str("  </g>\n");
    Ok(())
}

/// One SVG document showing `house` placed by `poses`, with the ground
/// truth ghosted underneath when requested.
pub fn render_svg(house: &House, poses: &[Pose], opt: &RenderOptions) -> Result<String> {
    if poses.len() != house.num_rooms() {
        return Err(JigsawError::shape("render_svg", &[poses.len()], &[house.num_rooms()]));
    }
    let size = FRAME * opt.scale;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {FRAME} {FRAME}">"#
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(&house.id));
    out.push_str("  <rect x=\"0\" y=\"0\" width=\"256\" height=\"256\" fill=\"white\"/>\n");
    if opt.ghost_gt {
        layer(&mut out, house, &house.gt_poses, 0.25, opt, "gt")?;
    }
    layer(&mut out, house, poses, 0.85, opt, "pred")?;
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};

    #[test]
    fn svg_is_well_formed_with_frame_viewbox() {
        let h = generate_house(4, &GeneratorConfig::with_rooms(5)).unwrap();
        let svg = render_svg(&h, &h.gt_poses, &RenderOptions::default()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.attribute("viewBox"), Some("0 0 256 256"));
        let polys = doc.descendants().filter(|n| n.has_tag_name("polygon")).count();
        assert_eq!(polys, 2 * h.num_rooms());
    }

    #[test]
    fn gt_door_lines_coincide_across_rooms() {
        let h = generate_house(9, &GeneratorConfig::with_rooms(4)).unwrap();
        let opt = RenderOptions { ghost_gt: false, ..RenderOptions::default() };
        let svg = render_svg(&h, &h.gt_poses, &opt).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let mids: Vec<(f64, f64)> = doc
            .descendants()
            .filter(|n| n.has_tag_name("line"))
            .map(|n| {
                let f = |k: &str| n.attribute(k).unwrap().parse::<f64>().unwrap();
                ((f("x1") + f("x2")) / 2.0, (f("y1") + f("y2")) / 2.0)
            })
            .collect();
        assert!(!mids.is_empty());
        for m in &mids {
            let partners = mids.iter().filter(|o| (o.0 - m.0).abs() < 1e-3 && (o.1 - m.1).abs() < 1e-3).count();
            assert!(partners >= 2, "door midpoint {m:?} has no partner");
        }
    }

    #[test]
    fn untyped_rooms_are_grey() {
        assert_eq!(type_color(None), "#bdbdbd");
        assert_ne!(type_color(Some(0)), type_color(Some(1)));
    }
}
