//! Abstract routing diagram: node and edge shades ready for rendering.

use alloc::vec::Vec;

use crate::routing::RoutingState;
use crate::{Error, Result};

/// Edges whose normalized shade falls below this are left out.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagramEdge {
    pub lower: usize,
    pub upper: usize,
    /// In `[0, 1]`; 0 is the lightest shade, 1 the darkest.
    pub shade: f64,
}

/// Shades in `[0, 1]`, 0 lightest. Node shades are activation magnitudes;
/// edge shades are `c[i][j] / max c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagramModel {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub edges: Vec<DiagramEdge>,
}

pub fn routing_diagram(
    state: &RoutingState,
    lower_activations: &[f64],
    upper_activations: &[f64],
    edge_threshold: f64,
) -> Result<DiagramModel> {
    state.expect_dims(
        "routing_diagram",
        lower_activations.len(),
        upper_activations.len(),
    )?;
    if edge_threshold.is_nan() || edge_threshold < 0.0 {
        return Err(Error::InvalidArgument {
            op: "routing_diagram",
            reason: "edge threshold must be non-negative",
        });
    }
    let shade = |a: f64| if a.is_finite() { a.clamp(0.0, 1.0) } else { 0.0 };
    let max_c = state.coefficients().iter().copied().fold(0.0, f64::max);
    let nj = upper_activations.len();
    let edges = state
        .coefficients()
        .iter()
        .enumerate()
        .map(|(k, &c)| DiagramEdge {
            lower: k / nj,
            upper: k % nj,
            shade: if max_c > 0.0 { c / max_c } else { 0.0 },
        })
        .filter(|e| e.shade >= edge_threshold)
        .collect();
    Ok(DiagramModel {
        lower: lower_activations.iter().map(|&a| shade(a)).collect(),
        upper: upper_activations.iter().map(|&a| shade(a)).collect(),
        edges,
    })
}
