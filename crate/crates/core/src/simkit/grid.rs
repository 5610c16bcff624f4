//! Manhattan road grid: geometry, corridor line-of-sight rule, and
//! grid-following vehicle motion.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Bearing from `self` to `other` in degrees, 0 = +x, counterclockwise.
    pub fn bearing_deg(&self, other: &Position) -> f64 {
        (other.y - self.y).atan2(other.x - self.x).to_degrees()
    }
}

/// Distance from a street centerline within which a position still counts as
/// being inside that street's corridor.
pub const CORRIDOR_TOL_M: f64 = 0.5;

/// Square block grid. Streets run along `x = k * block_size` and
/// `y = k * block_size` for `k in 0..=blocks`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoadGrid {
    pub blocks: u32,
    pub block_size: f64,
}

impl RoadGrid {
    pub fn extent(&self) -> f64 {
        self.blocks as f64 * self.block_size
    }

    pub fn num_streets(&self) -> u32 {
        self.blocks + 1
    }

    pub fn street_coord(&self, index: u32) -> f64 {
        index as f64 * self.block_size
    }

    pub fn contains(&self, p: &Position) -> bool {
        let e = self.extent();
        p.x >= -CORRIDOR_TOL_M
            && p.y >= -CORRIDOR_TOL_M
            && p.x <= e + CORRIDOR_TOL_M
            && p.y <= e + CORRIDOR_TOL_M
    }

    /// Street index whose centerline the coordinate lies on, if any.
    fn corridor_index(&self, coord: f64) -> Option<u32> {
        let k = (coord / self.block_size).round();
        if k < 0.0 || k > self.blocks as f64 {
            return None;
        }
        if (coord - k * self.block_size).abs() <= CORRIDOR_TOL_M {
            Some(k as u32)
        } else {
            None
        }
    }

    /// Manhattan-corridor LOS rule: two positions see each other iff they
    /// share a horizontal or vertical street corridor. Everything else is
    /// assumed blocked by the intervening block buildings.
    pub fn los(&self, a: &Position, b: &Position) -> bool {
        let shared_row = match (self.corridor_index(a.y), self.corridor_index(b.y)) {
            (Some(i), Some(j)) => i == j,
            _ => false,
        };
        let shared_col = match (self.corridor_index(a.x), self.corridor_index(b.x)) {
            (Some(i), Some(j)) => i == j,
            _ => false,
        };
        shared_row || shared_col
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Grid-following motion state. Vehicles sit exactly on a street centerline:
/// `line` is the street index of the fixed coordinate, `offset` the position
/// along the moving coordinate, `dir` the travel sense.
#[derive(Debug, Clone)]
pub struct MotionState {
    pub axis: Axis,
    pub line: u32,
    pub offset: f64,
    pub dir: f64, // +1.0 or -1.0
    pub speed: f64,
}

impl MotionState {
    pub fn position(&self, grid: &RoadGrid) -> Position {
        let fixed = grid.street_coord(self.line);
        match self.axis {
            Axis::Horizontal => Position::new(self.offset, fixed),
            Axis::Vertical => Position::new(fixed, self.offset),
        }
    }

    pub fn heading_deg(&self) -> f64 {
        match (self.axis, self.dir > 0.0) {
            (Axis::Horizontal, true) => 0.0,
            (Axis::Horizontal, false) => 180.0,
            (Axis::Vertical, true) => 90.0,
            (Axis::Vertical, false) => 270.0,
        }
    }

    /// Place a vehicle uniformly on the grid: random street, random offset,
    /// random travel sense.
    pub fn random(grid: &RoadGrid, speed: f64, rng: &mut ChaCha12Rng) -> Self {
        let axis = if rng.random_range(0..2) == 0 {
            Axis::Horizontal
        } else {
            Axis::Vertical
        };
        let line = rng.random_range(0..grid.num_streets());
        let offset = rng.random_range(0.0..grid.extent());
        let dir = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
        Self { axis, line, offset, dir, speed }
    }

    /// Advance by `dt` seconds, turning uniformly at intersections. Reversing
    /// is only allowed when no other exit exists (grid corner dead ends).
    pub fn advance(&mut self, grid: &RoadGrid, dt: f64, rng: &mut ChaCha12Rng) {
        let mut remaining = self.speed * dt;
        // A vehicle crosses at most a handful of intersections per tick; loop
        // until the travel budget is spent.
        while remaining > 0.0 {
            let next_node = self.next_intersection(grid);
            let dist_to_node = (next_node - self.offset) * self.dir;
            if dist_to_node > remaining {
                self.offset += self.dir * remaining;
                break;
            }
            self.offset = next_node;
            remaining -= dist_to_node;
            self.turn_at_intersection(grid, rng);
        }
    }

    fn next_intersection(&self, grid: &RoadGrid) -> f64 {
        let b = grid.block_size;
        let k = self.offset / b;
        let next = if self.dir > 0.0 {
            (k + 1e-9).floor() + 1.0
        } else {
            (k - 1e-9).ceil() - 1.0
        };
        let clamped = next.clamp(0.0, grid.blocks as f64);
        clamped * b
    }

    fn turn_at_intersection(&mut self, grid: &RoadGrid, rng: &mut ChaCha12Rng) {
        let node_along = (self.offset / grid.block_size).round() as i64;
        let node_cross = self.line as i64;
        let max = grid.blocks as i64;

        // Candidate exits as (axis, dir), excluding the reverse of the
        // arrival direction.
        let mut exits: Vec<(Axis, f64)> = Vec::with_capacity(3);
        let (along_axis, cross_axis) = match self.axis {
            Axis::Horizontal => (Axis::Horizontal, Axis::Vertical),
            Axis::Vertical => (Axis::Vertical, Axis::Horizontal),
        };
        if (self.dir > 0.0 && node_along < max) || (self.dir < 0.0 && node_along > 0) {
            exits.push((along_axis, self.dir)); // continue straight
        }
        if node_cross < max {
            exits.push((cross_axis, 1.0));
        }
        if node_cross > 0 {
            exits.push((cross_axis, -1.0));
        }

        let (axis, dir) = if exits.is_empty() {
            (along_axis, -self.dir) // dead end: reverse
        } else {
            exits[rng.random_range(0..exits.len())]
        };

        if axis == self.axis {
            self.dir = dir;
        } else {
            // Swap roles: the along-coordinate becomes the new fixed line.
            self.line = node_along as u32;
            self.offset = grid.street_coord(node_cross as u32);
            self.axis = axis;
            self.dir = dir;
        }
    }
}
