//! Deterministic schematic renderer.
//!
//! Each world draws a fixed scene whose element placements are smooth,
//! injective functions of the factor vector, so the factors are recoverable
//! from pixels. Images are grayscale in `[0,1]`, anti-aliased by averaging a
//! 4x4 subpixel grid. All layout constants are expressed at a reference
//! 32-pixel canvas and scaled linearly for other sizes.

use crate::error::{CdlError, Result};
use crate::world::scm::GroundTruthScm;

/// Painter's-order scene element; later elements cover earlier ones.
enum Element {
    /// Axis-aligned rectangle `[x0,x1] x [y0,y1]` in pixel coordinates.
    Rect { x0: f64, x1: f64, y0: f64, y1: f64, value: f64 },
    Disc { cx: f64, cy: f64, r: f64, value: f64 },
    /// Segment from `(x0,y0)` to `(x1,y1)` with a half-width.
    Segment { x0: f64, y0: f64, x1: f64, y1: f64, half_width: f64, value: f64 },
}

impl Element {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Element::Rect { x0, x1, y0, y1, .. } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Element::Disc { cx, cy, r, .. } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Element::Segment { x0, y0, x1, y1, half_width, .. } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len_sq = vx * vx + vy * vy;
                let t = if len_sq > 0.0 {
                    (((x - x0) * vx + (y - y0) * vy) / len_sq).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (x - (x0 + t * vx), y - (y0 + t * vy));
                dx * dx + dy * dy <= half_width * half_width
            }
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Element::Rect { value, .. }
            | Element::Disc { value, .. }
            | Element::Segment { value, .. } => value,
        }
    }
}

fn rasterize(elements: &[Element], size: usize) -> Vec<f64> {
    let mut image = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                    let y = py as f64 + (sy as f64 + 0.5) / 4.0;
                    // Topmost covering element wins; background is white.
                    let mut v = 1.0;
                    for e in elements {
                        if e.covers(x, y) {
                            v = e.value();
                        }
                    }
                    acc += v;
                }
            }
            image[py * size + px] = acc / 16.0;
        }
    }
    image
}

/// Pendulum scene. Factors: pendulum angle, light angle, shadow length,
/// shadow midpoint. Layout (at the 32-px reference): the pivot hangs at
/// `(16, 8)` with a 10-px rod; the ground band spans rows 27.2-28.4 with the
/// shadow bar on top of it at 3 px per world unit; the light disc slides
/// along the top edge proportionally to its horizontal offset.
fn pendulum_elements(z: &[f64], s: f64) -> Vec<Element> {
    let theta_p = z[0];
    let theta_l = z[1];
    let shadow_len = z[2].max(0.0);
    let shadow_pos = z[3];

    let light_x = 8.0 * theta_l.tan();
    let (pivot_x, pivot_y) = (16.0 * s, 8.0 * s);
    let (ball_x, ball_y) =
        (pivot_x + 10.0 * s * theta_p.sin(), pivot_y + 10.0 * s * theta_p.cos());

    vec![
        // Ground band.
        Element::Rect { x0: 0.0, x1: 32.0 * s, y0: 27.2 * s, y1: 28.4 * s, value: 0.25 },
        // Shadow bar sitting on the ground.
        Element::Rect {
            x0: (16.0 + 3.0 * (shadow_pos - shadow_len / 2.0)) * s,
            x1: (16.0 + 3.0 * (shadow_pos + shadow_len / 2.0)) * s,
            y0: 25.4 * s,
            y1: 27.2 * s,
            value: 0.5,
        },
        // Light disc near the top edge (compressed horizontal scale).
        Element::Disc { cx: (16.0 + 0.9 * light_x) * s, cy: 3.5 * s, r: 2.0 * s, value: 0.35 },
        // Rod, pivot, ball.
        Element::Segment {
            x0: pivot_x,
            y0: pivot_y,
            x1: ball_x,
            y1: ball_y,
            half_width: 0.7 * s,
            value: 0.15,
        },
        Element::Disc { cx: pivot_x, cy: pivot_y, r: 1.0 * s, value: 0.2 },
        Element::Disc { cx: ball_x, cy: ball_y, r: 2.2 * s, value: 0.05 },
    ]
}

/// Two vertical bars whose heights encode the two factors.
fn toy_bars_elements(z: &[f64], ranges: &[(f64, f64)], s: f64) -> Vec<Element> {
    let mut elements = vec![
        // Baseline band.
        Element::Rect { x0: 0.0, x1: 32.0 * s, y0: 29.5 * s, y1: 30.5 * s, value: 0.3 },
    ];
    for (i, (&value, &(lo, hi))) in z.iter().zip(ranges).enumerate() {
        let frac = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
        let height = (1.0 + 26.0 * frac) * s;
        let cx = (10.0 + 12.0 * i as f64) * s;
        elements.push(Element::Rect {
            x0: cx - 3.0 * s,
            x1: cx + 3.0 * s,
            y0: 29.5 * s - height,
            y1: 29.5 * s,
            value: 0.15,
        });
    }
    elements
}

/// Renders a factor vector to a `size x size` grayscale image in `[0,1]`.
pub fn render(world: &GroundTruthScm, factors: &[f64], size: usize) -> Result<Vec<f64>> {
    if factors.len() != world.node_count() {
        return Err(CdlError::Shape(format!(
            "render: {} factors for a {}-node world",
            factors.len(),
            world.node_count()
        )));
    }
    if size < 16 {
        return Err(CdlError::Config(format!("render: size {size} below minimum 16")));
    }
    let s = size as f64 / 32.0;
    let elements = match world.world_id() {
        "pendulum" => pendulum_elements(factors, s),
        "toy-bars" => {
            let ranges: Vec<(f64, f64)> =
                world.ranges().iter().map(|r| (r.lo, r.hi)).collect();
            toy_bars_elements(factors, &ranges, s)
        }
        other => {
            return Err(CdlError::Config(format!("world '{other}' has no renderer")));
        }
    };
    Ok(rasterize(&elements, size))
}
