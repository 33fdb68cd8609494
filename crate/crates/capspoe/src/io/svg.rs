//! Routing diagrams as standalone SVG 1.1.

use std::fmt::Write as _;
use std::path::Path;

use capspoe_core::diagram::DiagramModel;

use crate::Result;

const CELL: f64 = 12.0;
const BOX_W: f64 = 10.0;
const BOX_H: f64 = 24.0;
const MARGIN: f64 = 10.0;
const GAP: f64 = 200.0;

/// Shade in `[0, 1]` to a gray level: 0 is white, 1 is black.
pub fn gray_level(shade: f64) -> u8 {
    let s = if shade.is_nan() { 0.0 } else { shade.clamp(0.0, 1.0) };
    (255.0 * (1.0 - s)).round() as u8
}

fn gray(shade: f64) -> String {
    let g = gray_level(shade);
    format!("#{g:02x}{g:02x}{g:02x}")
}

/// Lower capsules as the bottom row, upper capsules centered above them,
/// edges drawn first so rectangles stay on top.
pub fn render_routing_svg(diagram: &DiagramModel) -> String {
    let (ni, nj) = (diagram.lower.len(), diagram.upper.len());
    let wide = ni.max(nj).max(1) as f64 * CELL;
    let width = wide + 2.0 * MARGIN;
    let height = 2.0 * MARGIN + 2.0 * BOX_H + GAP;
    let x_of = |k: usize, n: usize| MARGIN + (wide - n as f64 * CELL) / 2.0 + k as f64 * CELL;
    let upper_y = MARGIN;
    let lower_y = MARGIN + BOX_H + GAP;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<g id="edges" stroke-width="0.5">"#);
    for e in &diagram.edges {
        let x1 = x_of(e.lower, ni) + BOX_W / 2.0;
        let x2 = x_of(e.upper, nj) + BOX_W / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x1}" y1="{lower_y}" x2="{x2}" y2="{}" stroke="{}"/>"#,
            upper_y + BOX_H,
            gray(e.shade)
        );
    }
    let _ = writeln!(s, "</g>");
    for (id, shades, n, y) in [
        ("lower", &diagram.lower, ni, lower_y),
        ("upper", &diagram.upper, nj, upper_y),
    ] {
        let _ = writeln!(s, r##"<g id="{id}" stroke="#000000" stroke-width="0.5">"##);
        for (k, &shade) in shades.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{BOX_W}" height="{BOX_H}" fill="{}"/>"#,
                x_of(k, n),
                gray(shade)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

pub fn emit_routing_svg(diagram: &DiagramModel, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path, render_routing_svg(diagram).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use capspoe_core::diagram::routing_diagram;
    use capspoe_core::routing::RoutingState;

    #[test]
    fn fig_scale_diagram() {
        let c = RoutingState::uniform(144, 10);
        let d = routing_diagram(&c, &vec![0.0; 144], &[0.0; 10], 0.0).unwrap();
        let svg = render_routing_svg(&d);
        // One background rect plus one per capsule.
        assert_eq!(svg.matches("<rect").count(), 1 + 154);
        assert_eq!(svg.matches("<line").count(), 1440);
        assert_eq!(svg.matches(r##"fill="#ffffff""##).count(), 1 + 154);
        let strokes: std::collections::BTreeSet<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<line"))
            .map(|l| l.split("stroke=").nth(1).unwrap())
            .collect();
        assert_eq!(strokes.len(), 1);
    }

    #[test]
    fn shades_map_linearly() {
        assert_eq!(gray_level(0.0), 255);
        assert_eq!(gray_level(1.0), 0);
        assert_eq!(gray_level(0.5), 128);
        assert_eq!(gray_level(2.0), 0);
    }
}
