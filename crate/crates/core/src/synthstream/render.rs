//! Pinhole column raycaster over the axis-aligned wall set.
//!
//! Rays are cast with non-normalised directions `forward + k * right`, so the
//! hit parameter is directly the perpendicular depth used for projection.
//! Floor and ceiling shading depend only on the pixel row, never on the pose,
//! which keeps congruent wall views identical across the whole image.

use super::world::{texture_value, World};
use crate::backend::Pose;
use crate::frame::{Frame, FrameError, PixelMode};

const FOV_H_DEG: f64 = 66.0;
const WALL_HALF_HEIGHT: f64 = 1.2;
const SHADE_FALLOFF: f64 = 0.07;
const MIN_SHADE: f64 = 0.2;
const T_MIN: f64 = 1e-9;

struct Hit {
    /// Perpendicular depth along the viewing axis.
    depth: f64,
    /// Euclidean distance to the hit point.
    distance: f64,
    texture_id: usize,
    u: f64,
}

fn cast_column(world: &World, ox: f64, oy: f64, dx: f64, dy: f64, spread: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for wall in &world.walls {
        let vertical = wall.ax == wall.bx;
        let (t, u) = if vertical {
            if dx == 0.0 {
                continue;
            }
            let t = (wall.ax - ox) / dx;
            if t <= T_MIN || !t.is_finite() {
                continue;
            }
            let hit_y = oy + t * dy;
            if hit_y < wall.ay || hit_y > wall.by {
                continue;
            }
            (t, hit_y - wall.ay)
        } else {
            if dy == 0.0 {
                continue;
            }
            let t = (wall.ay - oy) / dy;
            if t <= T_MIN || !t.is_finite() {
                continue;
            }
            let hit_x = ox + t * dx;
            if hit_x < wall.ax || hit_x > wall.bx {
                continue;
            }
            (t, hit_x - wall.ax)
        };
        if best.as_ref().is_none_or(|b| t < b.depth) {
            best = Some(Hit {
                depth: t,
                distance: t * spread,
                texture_id: wall.texture_id,
                u,
            });
        }
    }
    best
}

fn shade(distance: f64) -> f64 {
    (1.0 / (1.0 + SHADE_FALLOFF * distance)).clamp(MIN_SHADE, 1.0)
}

/// Render the grayscale view from `pose`, at the world's configured image
/// size. `id` and `timestamp` are stamped onto the returned frame.
pub fn render_view(world: &World, pose: &Pose, id: u64, timestamp: f64) -> Result<Frame, FrameError> {
    let (w, h) = world.spec.image_size;
    let (w_us, h_us) = (w as usize, h as usize);
    let tan_half_h = (FOV_H_DEG.to_radians() / 2.0).tan();
    let tan_half_v = tan_half_h * h as f64 / w as f64;
    let cy = h as f64 / 2.0;
    let (sin_t, cos_t) = pose.theta.sin_cos();
    // Heading and screen-right basis vectors; k sweeps the image plane.
    let (fx, fy) = (cos_t, sin_t);
    let (rx, ry) = (sin_t, -cos_t);

    let mut pixels = vec![0.0f64; w_us * h_us];
    for col in 0..w_us {
        let k = tan_half_h * (2.0 * (col as f64 + 0.5) / w as f64 - 1.0);
        let dx = fx + k * rx;
        let dy = fy + k * ry;
        let spread = (1.0 + k * k).sqrt();
        let hit = cast_column(world, pose.x, pose.y, dx, dy, spread);
        let (line_half, wall_shade) = match &hit {
            Some(hit) => (
                cy * WALL_HALF_HEIGHT / (hit.depth * tan_half_v),
                shade(hit.distance),
            ),
            None => (0.0, 0.0),
        };
        for row in 0..h_us {
            let yr = row as f64 + 0.5;
            let off = cy - yr;
            let value = if off.abs() < line_half {
                let hit = hit.as_ref().unwrap();
                let z = off * WALL_HALF_HEIGHT / line_half;
                texture_value(world.spec.seed, hit.texture_id, hit.u, z + WALL_HALF_HEIGHT)
                    * wall_shade
            } else if off > 0.0 {
                // Ceiling: darkens toward the horizon.
                0.2 + 0.5 * off / cy
            } else {
                // Floor: brightens toward the camera.
                0.25 + 0.6 * -off / cy
            };
            pixels[row * w_us + col] = value.clamp(0.0, 1.0);
        }
    }
    Frame::new(id, timestamp, w, h, PixelMode::Gray, pixels)
}
