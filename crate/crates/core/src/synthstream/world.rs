//! Procedural warehouse worlds: axis-aligned shelving blocks inside a walled
//! rectangle, with wall textures drawn from a small bank.
//!
//! All structural coordinates are integers, and repeated structures (shelf
//! pitch, wall panels) repeat at integer offsets. That makes congruent views
//! at texture-aliased positions not merely similar but bit-identical when the
//! bank collapses to one texture: every intermediate float in the raycast is
//! shifted by an exactly-representable constant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("waypoint or path point ({x}, {y}) is outside the free space")]
    PathOutsideWorld { x: f64, y: f64 },
    #[error("invalid flight plan: {0}")]
    InvalidPlan(String),
    #[error("redundancy premise violated at frame {index}: mean per-pixel delta {delta} exceeds bound {bound}")]
    RedundancyViolated { index: usize, delta: f64, bound: f64 },
    #[error(transparent)]
    Frame(#[from] crate::frame::FrameError),
}

/// `aisle_count` is the number of inner corridors between shelf blocks
/// (`aisle_count + 1` shelves); 0 means a single free-standing block.
/// `texture_bank_size` is the number of distinct wall textures — small banks
/// make distinct corridors render near-identical views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub aisle_count: usize,
    pub aisle_length: f64,
    pub texture_bank_size: usize,
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            aisle_count: 4,
            aisle_length: 8.0,
            texture_bank_size: 3,
            image_size: (64, 48),
            seed: 0,
        }
    }
}

pub const MARGIN: f64 = 3.0;
pub const SHELF_WIDTH: f64 = 2.0;
pub const SHELF_PITCH: f64 = 4.0;
const PANEL_LENGTH: f64 = 4.0;

/// One textured axis-aligned wall segment from `(ax, ay)` to `(bx, by)`;
/// texture distance `u` is measured from the `(ax, ay)` end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
    pub texture_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub walls: Vec<Wall>,
    pub width: f64,
    pub height: f64,
    /// Shelf footprints as (x0, y0, x1, y1), for free-space checks.
    pub shelves: Vec<(f64, f64, f64, f64)>,
}

impl World {
    /// Centerline x of inner corridor `j` (1-based, `1..=aisle_count`).
    pub fn corridor_x(&self, j: usize) -> f64 {
        MARGIN + SHELF_PITCH * j as f64 - 1.0
    }

    pub fn in_free_space(&self, x: f64, y: f64, clearance: f64) -> bool {
        if x < clearance || y < clearance || x > self.width - clearance || y > self.height - clearance {
            return false;
        }
        !self.shelves.iter().any(|&(x0, y0, x1, y1)| {
            x > x0 - clearance && x < x1 + clearance && y > y0 - clearance && y < y1 + clearance
        })
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World, SynthError> {
    if spec.texture_bank_size < 1 {
        return Err(SynthError::InvalidSpec("texture_bank_size must be >= 1".into()));
    }
    if !spec.aisle_length.is_finite() || spec.aisle_length < 2.0 {
        return Err(SynthError::InvalidSpec(format!(
            "aisle_length {} too short (need >= 2)",
            spec.aisle_length
        )));
    }
    let (w, h) = spec.image_size;
    if w < 8 || h < 8 {
        return Err(SynthError::InvalidSpec(format!("image_size {w}x{h} too small (need >= 8x8)")));
    }
    let shelf_count = spec.aisle_count + 1;
    let width = 2.0 * MARGIN + SHELF_PITCH * (shelf_count - 1) as f64 + SHELF_WIDTH;
    let height = 2.0 * MARGIN + spec.aisle_length;
    let bank = spec.texture_bank_size;
    let mut walls = Vec::new();

    // Outer walls, split into panels so long walls carry varying texture.
    // Panel index determines the texture id; each side gets its own phase so
    // adjacent sides don't trivially repeat.
    let add_panels = |walls: &mut Vec<Wall>, horizontal: bool, fixed: f64, len: f64, phase: usize| {
        let count = (len / PANEL_LENGTH).ceil() as usize;
        for p in 0..count {
            let a = PANEL_LENGTH * p as f64;
            let b = (PANEL_LENGTH * (p + 1) as f64).min(len);
            let texture_id = (p + phase) % bank;
            if horizontal {
                walls.push(Wall { ax: a, ay: fixed, bx: b, by: fixed, texture_id });
            } else {
                walls.push(Wall { ax: fixed, ay: a, bx: fixed, by: b, texture_id });
            }
        }
    };
    // Distinct per-side phases keep opposite walls distinguishable whenever
    // the bank is large enough; small banks collapse them back into aliases.
    add_panels(&mut walls, true, 0.0, width, 0);
    add_panels(&mut walls, false, width, height, 1);
    add_panels(&mut walls, true, height, width, 2);
    add_panels(&mut walls, false, 0.0, height, 3);

    // Shelf blocks: four faces each, both long faces sharing the shelf's
    // texture so corridors `j` and `j + bank` see identical texture pairs.
    let mut shelves = Vec::new();
    for s in 0..shelf_count {
        let x0 = MARGIN + SHELF_PITCH * s as f64;
        let x1 = x0 + SHELF_WIDTH;
        let y0 = MARGIN;
        let y1 = MARGIN + spec.aisle_length;
        let texture_id = s % bank;
        walls.push(Wall { ax: x0, ay: y0, bx: x0, by: y1, texture_id });
        walls.push(Wall { ax: x1, ay: y0, bx: x1, by: y1, texture_id });
        walls.push(Wall { ax: x0, ay: y0, bx: x1, by: y0, texture_id });
        walls.push(Wall { ax: x0, ay: y1, bx: x1, by: y1, texture_id });
        shelves.push((x0, y0, x1, y1));
    }

    Ok(World { spec: spec.clone(), walls, width, height, shelves })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const CELL_U: f64 = 0.25;
const CELL_V: f64 = 0.4;
const STRIPE_U: f64 = 0.5;
const SLAT_V: f64 = 0.3;
const CHECK_U: f64 = 1.0;
const CHECK_V: f64 = 0.8;

const HASH_U: u64 = 0x2545_f491_4f6c_dd1d;
const HASH_V: u64 = 0x9e6c_63d0_876a_90bd;

/// Procedural texture lookup, pure in all arguments. Texture ids cycle
/// through four structurally distinct families — blocky cell noise, vertical
/// stripes, horizontal slats, checkerboard — over a per-id base tone. Ids
/// that repeat under a small bank still alias exactly, while different ids
/// differ in spatial structure rather than only in a re-hashed noise field,
/// so a dictionary fitted to one wall class carries no free ride on another.
pub fn texture_value(world_seed: u64, texture_id: usize, u: f64, v: f64) -> f64 {
    let id = texture_id as u64;
    let key = world_seed ^ id.wrapping_mul(0x517c_c1b7_2722_0a95);
    let base = 0.25 + 0.5 * unit(splitmix64(key ^ 0xa076_1d64_78bd_642f));
    let value = match texture_id % 4 {
        0 => {
            let cu = (u / CELL_U).floor() as i64 as u64;
            let cv = (v / CELL_V).floor() as i64;
            let cell_h =
                splitmix64(key ^ cu.wrapping_mul(HASH_U) ^ (cv as u64).wrapping_mul(HASH_V));
            let band = if cv.rem_euclid(3) == 0 { -0.12 } else { 0.0 };
            base + 0.45 * (unit(cell_h) - 0.5) + band
        }
        1 => {
            let su = (u / STRIPE_U).floor() as i64 as u64;
            base + 0.45 * (unit(splitmix64(key ^ su.wrapping_mul(HASH_U))) - 0.5)
        }
        2 => {
            let sv = (v / SLAT_V).floor() as i64 as u64;
            base + 0.45 * (unit(splitmix64(key ^ sv.wrapping_mul(HASH_V))) - 0.5)
        }
        _ => {
            let cu = (u / CHECK_U).floor() as i64;
            let cv = (v / CHECK_V).floor() as i64;
            if (cu + cv).rem_euclid(2) == 0 {
                base + 0.28
            } else {
                base - 0.28
            }
        }
    };
    value.clamp(0.03, 0.97)
}
