//! Deterministic tank-drive world with a ray-cast depth sensor, a scripted
//! expert driver and a closed-loop runner.
//!
//! Angles are radians with heading measured counter-clockwise from +x.
//! Positive steering turns the robot right (clockwise).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{ControlCommand, FloatModel};
use crate::pipeline::{preprocess_pixels, Recording, Rotation, Sample, WindowRing, FRAME_SIDE};
use crate::protocol::{DepthFrame, SensorConfig};
use crate::quant::QuantModel;

/// Distance between the two tracks.
pub const TRACK_WIDTH: f64 = 0.15;
pub const BODY_RADIUS: f64 = 0.09;
pub const V_MAX: f64 = 0.6;
/// Steering-to-differential gain of the tank mixer.
pub const MIX_GAIN: f64 = 0.5;
pub const SENSOR_HEIGHT: f64 = 0.15;
pub const DEFAULT_WALL_HEIGHT: f64 = 0.30;
pub const PHYSICS_DT: f64 = 0.01;
pub const SUBSTEPS: usize = 5;
pub const CONTROL_HZ: f64 = 20.0;
pub const TICK_US: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Segment {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn length(&self) -> f64 {
        math::hypot(self.x2 - self.x1, self.y2 - self.y1)
    }

    fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    /// Euclidean distance from a point to the segment.
    pub fn distance_to(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (self.x2 - self.x1, self.y2 - self.y1);
        let len2 = dx * dx + dy * dy;
        let u = if len2 > 0.0 { (((px - self.x1) * dx + (py - self.y1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        math::hypot(px - (self.x1 + u * dx), py - (self.y1 + u * dy))
    }

    /// Ray parameter `t >= 0` at which `o + t*d` meets the segment.
    pub fn ray_hit(&self, ox: f64, oy: f64, dx: f64, dy: f64) -> Option<f64> {
        let (ex, ey) = (self.x2 - self.x1, self.y2 - self.y1);
        let denom = dx * ey - dy * ex;
        if denom == 0.0 {
            return None;
        }
        let (wx, wy) = (self.x1 - ox, self.y1 - oy);
        let t = (wx * ey - wy * ex) / denom;
        let u = (wx * dy - wy * dx) / denom;
        (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
    }

    /// Proper or touching intersection with another segment.
    pub fn intersects(&self, other: &Segment) -> bool {
        let orient =
            |ax: f64, ay: f64, bx: f64, by: f64, cx: f64, cy: f64| (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        let d1 = orient(other.x1, other.y1, other.x2, other.y2, self.x1, self.y1);
        let d2 = orient(other.x1, other.y1, other.x2, other.y2, self.x2, self.y2);
        let d3 = orient(self.x1, self.y1, self.x2, self.y2, other.x1, other.y1);
        let d4 = orient(self.x1, self.y1, self.x2, self.y2, other.x2, other.y2);
        (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0) && !(d1 == 0.0 && d2 == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub name: String,
    pub walls: Vec<Segment>,
    pub spawn: Pose,
    /// Gates that must be crossed in order; crossing the last one closes a lap.
    pub checkpoints: Vec<Segment>,
    pub wall_height: f64,
    pub seed: u64,
}

impl SimWorld {
    pub fn validate(&self) -> Result<()> {
        if self.walls.len() < 3 {
            return Err(Error::InvalidWorld(format!("{} walls, need at least 3", self.walls.len())));
        }
        if let Some(i) = self.walls.iter().position(|w| !w.is_finite() || w.length() == 0.0) {
            return Err(Error::InvalidWorld(format!("wall {i} is degenerate")));
        }
        if let Some(i) = self.checkpoints.iter().position(|w| !w.is_finite() || w.length() == 0.0) {
            return Err(Error::InvalidWorld(format!("checkpoint {i} is degenerate")));
        }
        if !(self.wall_height.is_finite() && self.wall_height > 0.0) {
            return Err(Error::InvalidWorld(format!("wall height {}", self.wall_height)));
        }
        let s = self.spawn;
        if !(s.x.is_finite() && s.y.is_finite() && s.heading.is_finite()) {
            return Err(Error::InvalidWorld("spawn is not finite".into()));
        }
        if body_hits_wall(self, s.x, s.y) {
            return Err(Error::InvalidWorld("spawn overlaps a wall".into()));
        }
        Ok(())
    }

    pub fn spawn_state(&self) -> RobotState {
        RobotState { pose: self.spawn, v_left: 0.0, v_right: 0.0 }
    }

    /// Reflects the world across the line through `pose` along its heading.
    pub fn mirrored_about(&self, pose: Pose) -> SimWorld {
        let (ux, uy) = (math::cos(pose.heading), math::sin(pose.heading));
        let reflect = |x: f64, y: f64| {
            let (px, py) = (x - pose.x, y - pose.y);
            let along = px * ux + py * uy;
            (pose.x + 2.0 * along * ux - px, pose.y + 2.0 * along * uy - py)
        };
        let seg = |s: &Segment| {
            let (x1, y1) = reflect(s.x1, s.y1);
            let (x2, y2) = reflect(s.x2, s.y2);
            Segment::new(x1, y1, x2, y2)
        };
        let (sx, sy) = reflect(self.spawn.x, self.spawn.y);
        SimWorld {
            name: format!("{}-mirrored", self.name),
            walls: self.walls.iter().map(seg).collect(),
            spawn: Pose::new(sx, sy, 2.0 * pose.heading - self.spawn.heading),
            checkpoints: self.checkpoints.iter().map(seg).collect(),
            wall_height: self.wall_height,
            seed: self.seed,
        }
    }

    /// Whether a point lies in the drivable region, by ray-crossing parity.
    /// Holds for a single closed room and for a corridor between two closed
    /// wall loops.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        // An irrational-ish direction avoids grazing wall endpoints.
        let (dx, dy) = (0.8191520442889918, 0.5735764363510462);
        let crossings = self.walls.iter().filter(|w| w.ray_hit(x, y, dx, dy).is_some()).count();
        crossings % 2 == 1
    }

    /// Axis-aligned bounds of the walls: `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.walls.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |(a, b, c, d), w| {
            (a.min(w.x1).min(w.x2), b.min(w.y1).min(w.y2), c.max(w.x1).max(w.x2), d.max(w.y1).max(w.y2))
        })
    }

    /// Uniform random pose inside the track with at least `clearance`
    /// between the body and every wall.
    pub fn sample_pose<R: Rng>(&self, rng: &mut R, clearance: f64) -> Option<Pose> {
        let (x0, y0, x1, y1) = self.bounds();
        for _ in 0..10_000 {
            let (x, y) = (rng.random_range(x0..x1), rng.random_range(y0..y1));
            if self.contains(x, y) && self.walls.iter().all(|w| w.distance_to(x, y) > BODY_RADIUS + clearance) {
                return Some(Pose::new(x, y, rng.random_range(-PI..PI)));
            }
        }
        None
    }

    pub fn builtin(name: &str) -> Option<SimWorld> {
        match name {
            "oval" => Some(oval_world()),
            "maze" => Some(maze_world()),
            "deadend" => Some(deadend_world()),
            _ => None,
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["oval", "maze", "deadend"];
}

fn body_hits_wall(world: &SimWorld, x: f64, y: f64) -> bool {
    world.walls.iter().any(|w| w.distance_to(x, y) <= BODY_RADIUS)
}

/// Walls on both sides of a closed centreline, mitred at the vertices.
/// Returns the walls and one gate across the corridor at each edge midpoint.
pub fn corridor_loop(centre: &[(f64, f64)], half_width: f64) -> (Vec<Segment>, Vec<Segment>) {
    let n = centre.len();
    let normal = |i: usize| {
        let (a, b) = (centre[i], centre[(i + 1) % n]);
        let len = math::hypot(b.0 - a.0, b.1 - a.1);
        (-(b.1 - a.1) / len, (b.0 - a.0) / len)
    };
    let offsets: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (p, q) = (normal((i + n - 1) % n), normal(i));
            let (mx, my) = (p.0 + q.0, p.1 + q.1);
            let dot = mx * q.0 + my * q.1;
            (mx * half_width / dot, my * half_width / dot)
        })
        .collect();
    let mut walls = Vec::with_capacity(2 * n);
    for sign in [1.0, -1.0] {
        for i in 0..n {
            let j = (i + 1) % n;
            walls.push(Segment::new(
                centre[i].0 + sign * offsets[i].0,
                centre[i].1 + sign * offsets[i].1,
                centre[j].0 + sign * offsets[j].0,
                centre[j].1 + sign * offsets[j].1,
            ));
        }
    }
    let gates = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            let (mx, my) = ((centre[i].0 + centre[j].0) / 2.0, (centre[i].1 + centre[j].1) / 2.0);
            let (nx, ny) = normal(i);
            let h = half_width * 1.05;
            Segment::new(mx + nx * h, my + ny * h, mx - nx * h, my - ny * h)
        })
        .collect();
    (walls, gates)
}

/// Rounded-rectangle circuit, 6 m by 4 m on the centreline and 1.3 m wide,
/// driven counter-clockwise.
pub fn oval_world() -> SimWorld {
    let corners = [(0.0, 0.0), (6.0, 0.0), (6.0, 4.0), (0.0, 4.0)];
    let (walls, gates) = chamfered_ring(&corners, 0.65, 1.0, 0.3);
    SimWorld {
        name: "oval".into(),
        walls,
        spawn: Pose::new(1.5, 0.0, 0.0),
        checkpoints: gates_near(&gates, &[(6.0, 2.0), (3.0, 4.0), (0.0, 2.0), (3.0, 0.0)]),
        wall_height: DEFAULT_WALL_HEIGHT,
        seed: 1,
    }
}

/// Corridor walls around a closed polygonal centreline whose corners are
/// chamfered: by `inner_cut` on the side the path turns towards and by
/// `outer_cut` on the far side. Gates come from the edge midpoints as in
/// [`corridor_loop`].
pub fn chamfered_ring(
    corners: &[(f64, f64)],
    half_width: f64,
    inner_cut: f64,
    outer_cut: f64,
) -> (Vec<Segment>, Vec<Segment>) {
    let n = corners.len();
    let dir = |i: usize| {
        let (a, b) = (corners[i], corners[(i + 1) % n]);
        let len = math::hypot(b.0 - a.0, b.1 - a.1);
        ((b.0 - a.0) / len, (b.1 - a.1) / len)
    };
    let mut walls = Vec::new();
    for side in [1.0, -1.0] {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(2 * n);
        for (i, &corner) in corners.iter().enumerate() {
            let (a, b) = (dir((i + n - 1) % n), dir(i));
            let (na, nb) = ((-a.1, a.0), (-b.1, b.0));
            let (mx, my) = (na.0 + nb.0, na.1 + nb.1);
            let dot = mx * nb.0 + my * nb.1;
            let v = (corner.0 + side * mx * half_width / dot, corner.1 + side * my * half_width / dot);
            let turn = a.0 * b.1 - a.1 * b.0;
            // Left turns put the inside of the bend on the left (+normal) wall.
            let cut = if (turn > 0.0) == (side > 0.0) { inner_cut } else { outer_cut };
            if cut > 0.0 && turn != 0.0 {
                pts.push((v.0 - a.0 * cut, v.1 - a.1 * cut));
                pts.push((v.0 + b.0 * cut, v.1 + b.1 * cut));
            } else {
                pts.push(v);
            }
        }
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            if math::hypot(q.0 - p.0, q.1 - p.1) > 1e-9 {
                walls.push(Segment::new(p.0, p.1, q.0, q.1));
            }
        }
    }
    let (_, gates) = corridor_loop(corners, half_width);
    (walls, gates)
}

/// Gates whose midpoints are closest to the given points, in order.
fn gates_near(gates: &[Segment], points: &[(f64, f64)]) -> Vec<Segment> {
    points
        .iter()
        .map(|&(x, y)| {
            let d = |g: &Segment| math::hypot((g.x1 + g.x2) / 2.0 - x, (g.y1 + g.y2) / 2.0 - y);
            *gates.iter().min_by(|a, b| d(a).total_cmp(&d(b))).expect("loop has edges")
        })
        .collect()
}

/// Larger irregular circuit with five left-hand corners and one right-hand
/// corner, 1.5 m wide, driven counter-clockwise.
pub fn maze_world() -> SimWorld {
    let corners = [(0.0, 0.0), (7.0, 0.0), (7.0, 4.0), (4.0, 4.0), (4.0, 7.5), (-1.5, 7.5), (-1.5, 0.0)];
    let (walls, gates) = chamfered_ring(&corners, 0.75, 1.0, 0.3);
    SimWorld {
        name: "maze".into(),
        walls,
        spawn: Pose::new(1.5, 0.0, 0.0),
        checkpoints: gates_near(&gates, &[(7.0, 2.0), (4.0, 5.7), (1.2, 7.5), (-1.5, 3.7), (3.5, 0.0)]),
        wall_height: DEFAULT_WALL_HEIGHT,
        seed: 2,
    }
}

/// Straight 5 m corridor closed at both ends.
pub fn deadend_world() -> SimWorld {
    let (len, w) = (5.0, 0.35);
    SimWorld {
        name: "deadend".into(),
        walls: alloc::vec![
            Segment::new(0.0, -w, len, -w),
            Segment::new(len, -w, len, w),
            Segment::new(len, w, 0.0, w),
            Segment::new(0.0, w, 0.0, -w),
        ],
        spawn: Pose::new(0.4, 0.0, 0.0),
        checkpoints: Vec::new(),
        wall_height: DEFAULT_WALL_HEIGHT,
        seed: 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobotState {
    pub pose: Pose,
    pub v_left: f64,
    pub v_right: f64,
}

impl RobotState {
    /// Forward speed and yaw rate.
    pub fn body_velocity(&self) -> (f64, f64) {
        ((self.v_left + self.v_right) / 2.0, (self.v_right - self.v_left) / TRACK_WIDTH)
    }
}

/// Left and right track speeds for a command.
pub fn mix_tank(cmd: ControlCommand) -> (f64, f64) {
    let (s, t) = (cmd.steering, cmd.throttle);
    ((V_MAX * (t + MIX_GAIN * s)).clamp(-V_MAX, V_MAX), (V_MAX * (t - MIX_GAIN * s)).clamp(-V_MAX, V_MAX))
}

fn wrap_angle(h: f64) -> f64 {
    let mut h = libm::fmod(h, 2.0 * PI);
    if h > PI {
        h -= 2.0 * PI;
    } else if h <= -PI {
        h += 2.0 * PI;
    }
    h
}

/// One Euler step. On contact the pose is left unchanged, the tracks stop
/// and the flag is raised.
pub fn step_physics(world: &SimWorld, state: &RobotState, cmd: ControlCommand, dt: f64) -> (RobotState, bool) {
    let (v_left, v_right) = mix_tank(cmd);
    let next = RobotState { v_left, v_right, ..*state };
    let (v, w) = next.body_velocity();
    let p = state.pose;
    let pose = Pose::new(
        p.x + v * math::cos(p.heading) * dt,
        p.y + v * math::sin(p.heading) * dt,
        wrap_angle(p.heading + w * dt),
    );
    let moved = pose.x != p.x || pose.y != p.y;
    if moved && body_hits_wall(world, pose.x, pose.y) {
        return (RobotState { pose: p, v_left: 0.0, v_right: 0.0 }, true);
    }
    (RobotState { pose, ..next }, false)
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Azimuth of column `j`; negative looks left.
pub fn azimuth(j: usize, cfg: &SensorConfig) -> f64 {
    let half = cfg.fov_azimuth_deg / 2.0;
    deg(-half + cfg.fov_azimuth_deg * j as f64 / (FRAME_SIDE - 1) as f64)
}

/// Elevation of row `i`; positive looks up.
pub fn elevation(i: usize, cfg: &SensorConfig) -> f64 {
    let half = cfg.fov_elevation_deg / 2.0;
    deg(half - cfg.fov_elevation_deg * i as f64 / (FRAME_SIDE - 1) as f64)
}

/// Pixel value for a Euclidean range; `None` means no return.
pub fn range_to_pixel(dist_m: Option<f64>, cfg: &SensorConfig) -> u8 {
    let Some(d) = dist_m else { return 255 };
    let mm = d * 1000.0;
    if mm < cfg.min_range_mm as f64 {
        0
    } else if mm > cfg.max_representable_mm() as f64 {
        255
    } else {
        math::round(mm / cfg.unit_mm as f64).clamp(1.0, 255.0) as u8
    }
}

/// Renders the 25x25 depth frame seen from `state`.
pub fn render_depth(world: &SimWorld, state: &RobotState, cfg: &SensorConfig) -> DepthFrame {
    let p = state.pose;
    let elevations: Vec<(f64, f64, f64)> = (0..FRAME_SIDE)
        .map(|i| {
            let th = elevation(i, cfg);
            (math::cos(th), math::sin(th), math::tan(th))
        })
        .collect();
    let mut pixels = alloc::vec![0u8; FRAME_SIDE * FRAME_SIDE];
    for j in 0..FRAME_SIDE {
        let a = p.heading - azimuth(j, cfg);
        let (dx, dy) = (math::cos(a), math::sin(a));
        let horizontal = world
            .walls
            .iter()
            .filter_map(|w| w.ray_hit(p.x, p.y, dx, dy))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))));
        for (i, &(c, s, tn)) in elevations.iter().enumerate() {
            let wall = horizontal.and_then(|r| {
                let z = SENSOR_HEIGHT + r * tn;
                (0.0..=world.wall_height).contains(&z).then(|| r / c)
            });
            let floor = (s < 0.0).then(|| SENSOR_HEIGHT / -s);
            let dist = match (wall, floor) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            pixels[i * FRAME_SIDE + j] = range_to_pixel(dist, cfg);
        }
    }
    DepthFrame { frame_id: 0, rows: FRAME_SIDE, cols: FRAME_SIDE, pixels, timestamp_us: 0 }
}

/// Rows and column bands the expert looks at.
const EXPERT_ROWS: core::ops::Range<usize> = 10..15;
const SIDE_COLS: usize = 8;
const PIVOT_MM: f64 = 300.0;

/// Scripted corridor-following driver.
pub fn expert_policy(frame: &DepthFrame, cfg: &SensorConfig) -> Result<ControlCommand> {
    if frame.rows != FRAME_SIDE || frame.cols != FRAME_SIDE || frame.pixels.len() != FRAME_SIDE * FRAME_SIDE {
        return Err(Error::DimensionMismatch {
            expected: "25x25".into(),
            found: format!("{}x{}", frame.rows, frame.cols),
        });
    }
    let far = cfg.max_representable_mm() as f64;
    let mm = |p: u8| crate::protocol::depth_mm(p, cfg).map(|v| v as f64);
    let side_mean = |cols: core::ops::Range<usize>| {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in EXPERT_ROWS {
            for c in cols.clone() {
                if let Some(d) = mm(frame.get(r, c)) {
                    sum += d;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let d_l = side_mean(0..SIDE_COLS);
    let d_r = side_mean(FRAME_SIDE - SIDE_COLS..FRAME_SIDE);
    let mut d_c = far;
    for r in EXPERT_ROWS {
        for c in SIDE_COLS..FRAME_SIDE - SIDE_COLS {
            if let Some(d) = mm(frame.get(r, c)) {
                d_c = d_c.min(d);
            }
        }
    }
    if d_c < PIVOT_MM {
        let s = if d_r - d_l >= 0.0 { 1.0 } else { -1.0 };
        return Ok(ControlCommand::new(s, 0.15));
    }
    Ok(ControlCommand::new((2.0 * (d_r - d_l) / far).clamp(-1.0, 1.0), ((d_c - 250.0) / far * 3.0).clamp(0.15, 1.0)))
}

/// Anything that maps the newest depth frame to a command.
pub trait Policy {
    fn act(&mut self, frame: &DepthFrame) -> Result<ControlCommand>;

    fn reset(&mut self) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertPolicy {
    pub sensor: SensorConfig,
}

impl Policy for ExpertPolicy {
    fn act(&mut self, frame: &DepthFrame) -> Result<ControlCommand> {
        expert_policy(frame, &self.sensor)
    }
}

/// Always stopped.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, _: &DepthFrame) -> Result<ControlCommand> {
        Ok(ControlCommand::STOP)
    }
}

/// An inference backend over a raw `24 x 24 x 20` pixel window.
pub trait InferenceEngine {
    fn infer(&self, window: &[u8]) -> Result<ControlCommand>;
}

impl InferenceEngine for FloatModel {
    fn infer(&self, window: &[u8]) -> Result<ControlCommand> {
        self.forward_pixels(window)
    }
}

impl InferenceEngine for QuantModel {
    fn infer(&self, window: &[u8]) -> Result<ControlCommand> {
        self.forward_pixels(window)
    }
}

impl<E: InferenceEngine + ?Sized> InferenceEngine for &E {
    fn infer(&self, window: &[u8]) -> Result<ControlCommand> {
        (**self).infer(window)
    }
}

/// Runs a model on the last 20 frames; stopped until the ring is full.
#[derive(Debug, Clone)]
pub struct ModelPolicy<E> {
    engine: E,
    ring: WindowRing<Vec<u8>>,
    rotation: Rotation,
}

impl<E: InferenceEngine> ModelPolicy<E> {
    pub fn new(engine: E) -> Self {
        Self::with_rotation(engine, Rotation::R0)
    }

    pub fn with_rotation(engine: E, rotation: Rotation) -> Self {
        Self { engine, ring: WindowRing::new(), rotation }
    }

    pub fn engine(&self) -> &E {
        &self.engine
    }
}

impl<E: InferenceEngine> Policy for ModelPolicy<E> {
    fn act(&mut self, frame: &DepthFrame) -> Result<ControlCommand> {
        self.ring.push(preprocess_pixels(frame, self.rotation)?);
        if !self.ring.is_ready() {
            return Ok(ControlCommand::STOP);
        }
        Ok(self.engine.infer(&self.ring.window_pixels()?)?.clamped())
    }

    fn reset(&mut self) {
        self.ring.clear();
    }
}

impl<P: Policy + ?Sized> Policy for alloc::boxed::Box<P> {
    fn act(&mut self, frame: &DepthFrame) -> Result<ControlCommand> {
        (**self).act(frame)
    }

    fn reset(&mut self) {
        (**self).reset()
    }
}

/// Perturbations used when generating training drives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    /// Uniform +-1 count on every pixel that carries a return.
    pub pixel: bool,
    /// Amplitude of a piecewise-constant steering offset added to the
    /// applied command; the logged label stays clean.
    pub steering: f64,
    /// Ticks each steering offset is held.
    pub hold_ticks: u32,
}

impl NoiseConfig {
    pub const NONE: Self = Self { pixel: false, steering: 0.0, hold_ticks: 1 };
    pub const DATASET: Self = Self { pixel: true, steering: 0.5, hold_ticks: 10 };
}

/// Owns the world, the robot and every counter. Advanced one control tick
/// at a time by the closed-loop runner and the teleop service.
#[derive(Debug, Clone)]
pub struct Simulation {
    world: SimWorld,
    sensor: SensorConfig,
    state: RobotState,
    tick: u64,
    laps: u32,
    collisions: u32,
    distance: f64,
    next_gate: usize,
    in_contact: bool,
    noise: NoiseConfig,
    seed: u64,
    rng: ChaCha8Rng,
    steer_offset: f64,
}

/// What happened during one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickOutcome {
    pub contact: bool,
    pub lap_completed: bool,
}

impl Simulation {
    pub fn new(world: SimWorld, seed: u64) -> Result<Self> {
        Self::with_noise(world, seed, NoiseConfig::NONE)
    }

    pub fn with_noise(world: SimWorld, seed: u64, noise: NoiseConfig) -> Result<Self> {
        world.validate()?;
        let state = world.spawn_state();
        let rng = ChaCha8Rng::seed_from_u64(seed ^ world.seed.rotate_left(32));
        Ok(Self {
            world,
            sensor: SensorConfig::default(),
            state,
            tick: 0,
            laps: 0,
            collisions: 0,
            distance: 0.0,
            next_gate: 0,
            in_contact: false,
            noise,
            seed,
            rng,
            steer_offset: 0.0,
        })
    }

    /// Back to spawn with counters zeroed and the noise stream restarted.
    pub fn reset(&mut self) {
        let fresh =
            Self::with_noise(self.world.clone(), self.seed, self.noise).expect("world validated at construction");
        *self = Self { sensor: self.sensor, ..fresh };
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn laps(&self) -> u32 {
        self.laps
    }

    pub fn collisions(&self) -> u32 {
        self.collisions
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn timestamp_us(&self) -> u64 {
        self.tick * TICK_US
    }

    /// Depth frame for the current tick, with pixel noise when enabled.
    pub fn sense(&mut self) -> DepthFrame {
        let mut frame = render_depth(&self.world, &self.state, &self.sensor);
        frame.frame_id = self.tick as u8;
        frame.timestamp_us = self.timestamp_us();
        if self.noise.pixel {
            for p in frame.pixels.iter_mut() {
                if (1..255).contains(p) {
                    let d: i16 = self.rng.random_range(-1..=1);
                    *p = (*p as i16 + d).clamp(1, 254) as u8;
                }
            }
        }
        frame
    }

    /// Command actually sent to the tracks after steering noise.
    pub fn perturb(&mut self, cmd: ControlCommand) -> ControlCommand {
        if self.noise.steering <= 0.0 {
            return cmd;
        }
        if self.tick % self.noise.hold_ticks.max(1) as u64 == 0 {
            self.steer_offset = self.rng.random_range(-self.noise.steering..=self.noise.steering);
        }
        ControlCommand::new(cmd.steering + self.steer_offset, cmd.throttle).clamped()
    }

    /// Runs the physics substeps of one control tick.
    pub fn advance(&mut self, cmd: ControlCommand) -> TickOutcome {
        let cmd = cmd.clamped();
        let mut out = TickOutcome::default();
        for _ in 0..SUBSTEPS {
            let before = self.state.pose;
            let (next, contact) = step_physics(&self.world, &self.state, cmd, PHYSICS_DT);
            self.state = next;
            if contact {
                out.contact = true;
                if !self.in_contact {
                    self.collisions += 1;
                }
            }
            self.in_contact = contact;
            let after = self.state.pose;
            self.distance += math::hypot(after.x - before.x, after.y - before.y);
            if !self.world.checkpoints.is_empty() {
                let path = Segment::new(before.x, before.y, after.x, after.y);
                if (before.x != after.x || before.y != after.y)
                    && path.intersects(&self.world.checkpoints[self.next_gate])
                {
                    self.next_gate += 1;
                    if self.next_gate == self.world.checkpoints.len() {
                        self.next_gate = 0;
                        self.laps += 1;
                        out.lap_completed = true;
                    }
                }
            }
        }
        self.tick += 1;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub tick: u64,
    /// Pose at the moment the frame was taken.
    pub pose: Pose,
    pub frame: DepthFrame,
    /// Policy output; the training label.
    pub command: ControlCommand,
    /// Command sent to the tracks.
    pub applied: ControlCommand,
    pub contact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub world: String,
    pub laps: u32,
    pub collisions: u32,
    pub distance: f64,
    pub ticks: u64,
    pub log: Vec<LogEntry>,
}

impl RunResult {
    pub fn seconds(&self) -> f64 {
        self.ticks as f64 / CONTROL_HZ
    }

    /// Frames paired with policy labels.
    pub fn to_recording(&self) -> Recording {
        let mut rec = Recording::new(self.world.clone());
        rec.samples = self
            .log
            .iter()
            .map(|e| Sample { frame: e.frame.clone(), command: e.command, timestamp_us: e.frame.timestamp_us })
            .collect();
        rec
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub seconds: f64,
    /// Stop early once this many laps are complete.
    pub laps_target: Option<u32>,
    pub seed: u64,
    pub noise: NoiseConfig,
    /// Start here instead of the world's spawn.
    pub start: Option<Pose>,
    /// End the run on the first wall contact; that tick is still logged.
    pub stop_on_contact: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seconds: 60.0,
            laps_target: None,
            seed: 0,
            noise: NoiseConfig::NONE,
            start: None,
            stop_on_contact: false,
        }
    }
}

/// Drives `policy` in `world` at the control rate until time runs out or
/// the lap target is met. Deterministic in (world, policy, config).
pub fn run_closed_loop<P: Policy + ?Sized>(world: &SimWorld, policy: &mut P, cfg: &RunConfig) -> Result<RunResult> {
    if !(cfg.seconds.is_finite() && cfg.seconds >= 0.0) {
        return Err(Error::InvalidConfig("run length must be a non-negative number of seconds"));
    }
    if cfg.laps_target.is_some() && world.checkpoints.is_empty() {
        return Err(Error::InvalidWorld("lap target needs checkpoints".into()));
    }
    let mut world = world.clone();
    if let Some(start) = cfg.start {
        world.spawn = start;
    }
    let name = world.name.clone();
    let mut sim = Simulation::with_noise(world, cfg.seed, cfg.noise)?;
    policy.reset();
    let ticks = math::round(cfg.seconds * CONTROL_HZ) as u64;
    let mut log = Vec::with_capacity(ticks as usize);
    while sim.tick() < ticks {
        if cfg.laps_target.is_some_and(|n| sim.laps() >= n) {
            break;
        }
        let pose = sim.state().pose;
        let frame = sim.sense();
        let command = policy.act(&frame)?.clamped();
        let applied = sim.perturb(command);
        let tick = sim.tick();
        let out = sim.advance(applied);
        log.push(LogEntry { tick, pose, frame, command, applied, contact: out.contact });
        if out.contact && cfg.stop_on_contact {
            break;
        }
    }
    Ok(RunResult {
        world: name,
        laps: sim.laps(),
        collisions: sim.collisions(),
        distance: sim.distance(),
        ticks: sim.tick(),
        log,
    })
}
