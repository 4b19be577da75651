//! Social-force pedestrian simulator.
//!
//! Agents relax toward their desired velocity and are pushed apart by
//! exponential repulsion from neighbours and obstacles. All randomness comes
//! from a seeded ChaCha8 stream (a 64-bit-seeded, counter-based generator),
//! so a run is a pure function of `(scene, config, seed, duration)`.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: u64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub desired_speed: f64,
    pub goal: Vec2,
    pub radius: f64,
}

impl Agent {
    pub fn validate(&self) -> Result<()> {
        let ok = self.desired_speed > 0.0
            && self.radius > 0.0
            && self.desired_speed.is_finite()
            && self.radius.is_finite()
            && self.position.is_finite()
            && self.velocity.is_finite()
            && self.goal.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!("agent {} has an invalid state", self.id)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Obstacle {
    Segment { a: Vec2, b: Vec2 },
    Circle { center: Vec2, radius: f64 },
}

impl Obstacle {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Obstacle::Segment { a, b } => a.is_finite() && b.is_finite() && (*b - *a).norm() > 0.0,
            Obstacle::Circle { center, radius } => center.is_finite() && *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!("degenerate obstacle {self:?}")))
        }
    }

    /// Distance from `p` to the obstacle surface and the unit direction
    /// pointing from the obstacle toward `p`.
    fn distance_and_normal(&self, p: Vec2) -> (f64, Vec2) {
        match *self {
            Obstacle::Segment { a, b } => {
                let ab = b - a;
                let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
                let diff = p - (a + ab * t);
                let d = diff.norm();
                if d > 0.0 {
                    (d, diff * (1.0 / d))
                } else {
                    // On the segment: push along the segment normal.
                    let n = Vec2::new(-ab.y, ab.x);
                    (0.0, n * (1.0 / n.norm()))
                }
            }
            Obstacle::Circle { center, radius } => {
                let diff = p - center;
                let d = diff.norm();
                let n = if d > 0.0 { diff * (1.0 / d) } else { Vec2::new(1.0, 0.0) };
                (d - radius, n)
            }
        }
    }

    fn reflected_y(&self) -> Obstacle {
        let m = |v: Vec2| Vec2::new(v.x, -v.y);
        match *self {
            Obstacle::Segment { a, b } => Obstacle::Segment { a: m(a), b: m(b) },
            Obstacle::Circle { center, radius } => Obstacle::Circle { center: m(center), radius },
        }
    }
}

/// Axis-aligned rectangle stored as a corner plus a signed extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub origin: Vec2,
    pub extent: Vec2,
}

#[derive(Serialize, Deserialize)]
struct RegionDoc {
    min: Vec2,
    max: Vec2,
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let far = self.origin + self.extent;
        RegionDoc {
            min: Vec2::new(self.origin.x.min(far.x), self.origin.y.min(far.y)),
            max: Vec2::new(self.origin.x.max(far.x), self.origin.y.max(far.y)),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = RegionDoc::deserialize(d)?;
        Ok(Region::new(doc.min, doc.max))
    }
}

impl Region {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self {
            origin: min,
            extent: max - min,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec2 {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        Vec2::new(self.origin.x + u * self.extent.x, self.origin.y + v * self.extent.y)
    }

    fn reflected_y(&self) -> Region {
        Region {
            origin: Vec2::new(self.origin.x, -self.origin.y),
            extent: Vec2::new(self.extent.x, -self.extent.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl WorldBounds {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Relaxation time (s).
    pub tau: f64,
    /// Agent-agent interaction strength (m/s^2).
    pub interaction_strength: f64,
    /// Agent-agent interaction range (m).
    pub interaction_range: f64,
    pub wall_strength: f64,
    pub wall_range: f64,
    pub dt: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub speed_cap_factor: f64,
    pub arrival_radius: f64,
    /// Poisson arrival rate per spawn region (agents/s).
    pub spawn_rate: f64,
    pub agent_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            interaction_strength: 2.0,
            interaction_range: 0.3,
            wall_strength: 5.0,
            wall_range: 0.1,
            dt: 0.1,
            speed_mean: 1.34,
            speed_std: 0.26,
            speed_cap_factor: 1.3,
            arrival_radius: 0.3,
            spawn_rate: 0.5,
            agent_radius: 0.25,
        }
    }
}

pub const MIN_DESIRED_SPEED: f64 = 0.5;
pub const MAX_DESIRED_SPEED: f64 = 2.5;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("interaction_strength", self.interaction_strength),
            ("interaction_range", self.interaction_range),
            ("wall_strength", self.wall_strength),
            ("wall_range", self.wall_range),
            ("dt", self.dt),
            ("speed_mean", self.speed_mean),
            ("speed_cap_factor", self.speed_cap_factor),
            ("arrival_radius", self.arrival_radius),
            ("agent_radius", self.agent_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.speed_std >= 0.0) || !(self.spawn_rate >= 0.0) {
            return Err(Error::Config("speed_std and spawn_rate must be non-negative".into()));
        }
        if self.dt > self.tau {
            return Err(Error::Config(format!("dt ({}) must not exceed tau ({})", self.dt, self.tau)));
        }
        Ok(())
    }
}

/// Ground-plane layout plus the camera mapping used for density synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub world: WorldBounds,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub spawn_regions: Vec<Region>,
    pub goal_regions: Vec<Region>,
    /// Agents placed at t = 0 in addition to Poisson arrivals.
    #[serde(default)]
    pub initial_agents: usize,
    pub homography: Homography,
    pub image: ImageSize,
    #[serde(default)]
    pub config: SimConfig,
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for o in &self.obstacles {
            o.validate()?;
        }
        if self.image.height == 0 || self.image.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    /// The same scene mirrored about the world x-axis (y -> -y).
    pub fn reflected_y(&self) -> Scene {
        Scene {
            world: WorldBounds {
                min: Vec2::new(self.world.min.x, -self.world.max.y),
                max: Vec2::new(self.world.max.x, -self.world.min.y),
            },
            obstacles: self.obstacles.iter().map(Obstacle::reflected_y).collect(),
            spawn_regions: self.spawn_regions.iter().map(Region::reflected_y).collect(),
            goal_regions: self.goal_regions.iter().map(Region::reflected_y).collect(),
            initial_agents: self.initial_agents,
            homography: self.homography.clone(),
            image: self.image,
            config: self.config.clone(),
        }
    }
}

/// Direction used when two centres coincide exactly. Antisymmetric in the
/// pair so the two forces still cancel.
fn tie_break(a: u64, b: u64) -> Vec2 {
    if a < b {
        Vec2::new(-1.0, 0.0)
    } else {
        Vec2::new(1.0, 0.0)
    }
}

/// Advances every agent by one time step and drops agents that arrive at
/// their goal or leave `bounds` (when given).
pub fn step(agents: &[Agent], obstacles: &[Obstacle], config: &SimConfig) -> Vec<Agent> {
    step_within(agents, obstacles, config, None)
}

fn step_within(agents: &[Agent], obstacles: &[Obstacle], config: &SimConfig, bounds: Option<&WorldBounds>) -> Vec<Agent> {
    let decay = (-config.dt / config.tau).exp();
    let mut next = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        let to_goal = a.goal - a.position;
        let dist_goal = to_goal.norm();
        let desired = if dist_goal > 0.0 {
            to_goal * (a.desired_speed / dist_goal)
        } else {
            Vec2::ZERO
        };

        let mut force = Vec2::ZERO;
        for (j, b) in agents.iter().enumerate() {
            if i == j {
                continue;
            }
            let diff = a.position - b.position;
            let d = diff.norm();
            let n = if d > 0.0 { diff * (1.0 / d) } else { tie_break(a.id, b.id) };
            let reach = a.radius + b.radius;
            force += n * (config.interaction_strength * ((reach - d) / config.interaction_range).exp());
        }
        for o in obstacles {
            let (d, n) = o.distance_and_normal(a.position);
            force += n * (config.wall_strength * ((a.radius - d) / config.wall_range).exp());
        }

        // Exact solution of dv/dt = (desired - v)/tau over one step, plus the
        // interaction impulse.
        let mut v = desired + (a.velocity - desired) * decay + force * config.dt;
        let cap = config.speed_cap_factor * a.desired_speed;
        let speed = v.norm();
        if speed > cap {
            v = v * (cap / speed);
        }
        let position = a.position + v * config.dt;

        if (a.goal - position).norm() <= config.arrival_radius {
            continue;
        }
        if bounds.is_some_and(|bw| !bw.contains(position)) {
            continue;
        }
        next.push(Agent {
            id: a.id,
            position,
            velocity: v,
            desired_speed: a.desired_speed,
            goal: a.goal,
            radius: a.radius,
        });
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    /// Simulator time step the log was produced with.
    pub dt: f64,
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryLog {
    pub fn new(dt: f64) -> Self {
        Self { dt, records: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn agent_ids(&self) -> std::collections::BTreeSet<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Positions logged at step index `k` (time `k * dt`).
    pub fn positions_at_step(&self, k: u64) -> Vec<(u64, Vec2)> {
        self.records
            .iter()
            .filter(|r| (r.t / self.dt).round() as u64 == k)
            .map(|r| (r.id, Vec2::new(r.x, r.y)))
            .collect()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.records.last().map(|r| (r.t / self.dt).round() as u64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,id,x,y\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.t, r.id, r.x, r.y);
        }
        out
    }

    /// Parses `t,id,x,y` CSV. The time step is inferred from the smallest
    /// positive gap between timestamps unless `dt` is given.
    pub fn from_csv(text: &str, dt: Option<f64>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "t,id,x,y" => {}
            _ => return Err(Error::Format("trajectory CSV must start with `t,id,x,y`".into())),
        }
        let mut records = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("trajectory CSV line {}: `{line}`", lineno + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let rec = TrajectoryRecord {
                t: f[0].trim().parse().map_err(|_| bad())?,
                id: f[1].trim().parse().map_err(|_| bad())?,
                x: f[2].trim().parse().map_err(|_| bad())?,
                y: f[3].trim().parse().map_err(|_| bad())?,
            };
            if let Some(prev) = records.last() {
                let prev: &TrajectoryRecord = prev;
                if rec.t < prev.t {
                    return Err(Error::Format(format!("timestamps decrease at line {}", lineno + 1)));
                }
            }
            records.push(rec);
        }
        let dt = match dt {
            Some(dt) => dt,
            None => {
                let mut best = f64::INFINITY;
                for w in records.windows(2) {
                    let gap = w[1].t - w[0].t;
                    if gap > 1e-9 && gap < best {
                        best = gap;
                    }
                }
                if best.is_finite() {
                    best
                } else {
                    SimConfig::default().dt
                }
            }
        };
        Ok(Self { dt, records })
    }
}

fn spawn_agent(id: u64, scene: &Scene, existing: &[Agent], rng: &mut ChaCha8Rng, region: &Region, speed: &Normal<f64>) -> Option<Agent> {
    let cfg = &scene.config;
    let desired_speed = speed.sample(rng).clamp(MIN_DESIRED_SPEED, MAX_DESIRED_SPEED);
    let goal_region = &scene.goal_regions[rng.random_range(0..scene.goal_regions.len())];
    let goal = goal_region.sample(rng);
    // A few attempts to find a free spot; otherwise the arrival is skipped.
    for _ in 0..8 {
        let position = region.sample(rng);
        let free = existing
            .iter()
            .all(|o| (o.position - position).norm() > o.radius + cfg.agent_radius);
        if free && scene.world.contains(position) {
            return Some(Agent {
                id,
                position,
                velocity: Vec2::ZERO,
                desired_speed,
                goal,
                radius: cfg.agent_radius,
            });
        }
    }
    None
}

/// Runs the simulation for `duration` seconds, logging every agent at every
/// step (including t = 0).
pub fn run(scene: &Scene, seed: u64, duration: f64) -> Result<TrajectoryLog> {
    scene.validate()?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidValue(format!("duration must be positive, got {duration}")));
    }
    if scene.spawn_regions.is_empty() || scene.goal_regions.is_empty() {
        return Err(Error::Config("scene needs at least one spawn region and one goal region".into()));
    }
    let cfg = &scene.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = Normal::new(cfg.speed_mean, cfg.speed_std).map_err(|e| Error::Config(e.to_string()))?;
    let arrivals = if cfg.spawn_rate > 0.0 {
        Some(Poisson::new(cfg.spawn_rate * cfg.dt).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut next_id = 0u64;
    let mut agents: Vec<Agent> = Vec::new();
    for i in 0..scene.initial_agents {
        let region = scene.spawn_regions[i % scene.spawn_regions.len()];
        if let Some(a) = spawn_agent(next_id, scene, &agents, &mut rng, &region, &speed) {
            agents.push(a);
        }
        next_id += 1;
    }

    let steps = (duration / cfg.dt).round() as u64;
    let mut log = TrajectoryLog::new(cfg.dt);
    let mut record = |k: u64, agents: &[Agent]| {
        let t = k as f64 * cfg.dt;
        for a in agents {
            log.records.push(TrajectoryRecord {
                t,
                id: a.id,
                x: a.position.x,
                y: a.position.y,
            });
        }
    };
    record(0, &agents);
    for k in 1..=steps {
        agents = step_within(&agents, &scene.obstacles, cfg, Some(&scene.world));
        if let Some(poisson) = &arrivals {
            for region in &scene.spawn_regions {
                let n = poisson.sample(&mut rng) as u64;
                for _ in 0..n {
                    if let Some(a) = spawn_agent(next_id, scene, &agents, &mut rng, region, &speed) {
                        agents.push(a);
                    }
                    next_id += 1;
                }
            }
        }
        record(k, &agents);
    }
    Ok(log)
}

/// A straight corridor, the default demo scene: 20 m x 8 m walled corridor
/// walked left to right, imaged by a slightly oblique camera.
pub fn corridor_scene(image: usize) -> Scene {
    let s = image as f64;
    // Ground (0..20, 0..8) onto the image with mild perspective.
    let homography = Homography::new([
        [s / 20.0, 0.0, 0.0],
        [0.0, s / 8.0 * 0.9, s * 0.05],
        [0.0, 0.004, 1.0],
    ])
    .expect("corridor homography is invertible");
    Scene {
        world: WorldBounds {
            min: Vec2::new(-2.0, 0.0),
            max: Vec2::new(22.0, 8.0),
        },
        obstacles: vec![
            Obstacle::Segment {
                a: Vec2::new(-2.0, 0.0),
                b: Vec2::new(22.0, 0.0),
            },
            Obstacle::Segment {
                a: Vec2::new(-2.0, 8.0),
                b: Vec2::new(22.0, 8.0),
            },
            Obstacle::Circle {
                center: Vec2::new(10.0, 4.0),
                radius: 0.6,
            },
        ],
        spawn_regions: vec![Region::new(Vec2::new(-1.5, 0.6), Vec2::new(0.5, 7.4))],
        goal_regions: vec![Region::new(Vec2::new(20.5, 0.6), Vec2::new(21.5, 7.4))],
        initial_agents: 0,
        homography,
        image: ImageSize {
            height: image,
            width: image,
        },
        config: SimConfig {
            spawn_rate: 1.0,
            ..SimConfig::default()
        },
    }
}
