//! Anti-aliased sprites composited over a background frame.
//!
//! Pixel `(x, y)` has its centre at integer coordinates; coverage of a shape
//! at distance `d` from a pixel centre is `clamp(w + ½ − d, 0, 1)` for a shape
//! of half-width `w`.

/// Intensity of the agent sprite.
pub const AGENT_LEVEL: f64 = 0.5;
/// Intensity of the pointmass goal marker.
pub const GOAL_LEVEL: f64 = 0.25;
/// Half-width of the pendulum rod in pixels.
pub const ROD_HALF_WIDTH: f64 = 1.0;
/// Rod length as a fraction of the image side.
pub const ROD_LENGTH: f64 = 0.4;
pub const AGENT_RADIUS: f64 = 1.5;
pub const GOAL_RADIUS: f64 = 1.2;

fn coverage(half_width: f64, d: f64) -> f64 {
    (half_width + 0.5 - d).clamp(0.0, 1.0)
}

/// Coverage of a filled disc centred at pixel coordinates `(cx, cy)`.
pub fn disc(size: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            out.push(coverage(radius, d));
        }
    }
    out
}

/// Coverage of a thick segment from `a` to `b` (pixel coordinates).
pub fn segment(size: usize, a: (f64, f64), b: (f64, f64), half_width: f64) -> Vec<f64> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
            out.push(coverage(half_width, d));
        }
    }
    out
}

/// `frame ← α·level + (1 − α)·frame`.
pub fn composite(frame: &mut [f64], alpha: &[f64], level: f64) {
    for (f, &a) in frame.iter_mut().zip(alpha) {
        *f = a * level + (1.0 - a) * *f;
    }
}

/// Image centre, the pendulum pivot.
pub fn centre(size: usize) -> f64 {
    (size as f64 - 1.0) / 2.0
}

/// Rod coverage for angle `theta` (0 points up, increasing clockwise on screen).
pub fn pendulum_layer(size: usize, theta: f64) -> Vec<f64> {
    let c = centre(size);
    let len = ROD_LENGTH * size as f64;
    let tip = (c + len * theta.sin(), c - len * theta.cos());
    segment(size, (c, c), tip, ROD_HALF_WIDTH)
}

/// Maps world coordinates in `[−1, 1]²` to pixel coordinates, leaving room
/// for the agent disc at the walls.
pub fn world_to_pixel(size: usize, x: f64, y: f64) -> (f64, f64) {
    let c = centre(size);
    let scale = size as f64 / 2.0 - 2.0;
    (c + x * scale, c - y * scale)
}

pub fn pointmass_layer(size: usize, x: f64, y: f64) -> Vec<f64> {
    let (px, py) = world_to_pixel(size, x, y);
    disc(size, px, py, AGENT_RADIUS)
}

pub fn goal_layer(size: usize, x: f64, y: f64) -> Vec<f64> {
    let (px, py) = world_to_pixel(size, x, y);
    disc(size, px, py, GOAL_RADIUS)
}
