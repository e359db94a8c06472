//! A coverage robot in a rectangular cell room with two front bump sensors.
//!
//! The robot drives straight until the next cell is blocked. The bump is
//! reported by the left or right sensor depending on which front diagonal is
//! obstructed; head-on hits (both or neither diagonal blocked) alternate
//! between the sensors. The robot then reacts with decision 0 (back up, turn
//! left 90°) or 1 (back up, turn right 90°).
//!
//! Mapped onto the two-state, two-decision chain, each bump is one step:
//! state = sensor that fired, decision = reaction, next state = sensor of
//! the following bump. The episode payoff is the number of newly scanned
//! cells. Dynamics are deterministic.

use std::collections::BTreeSet;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::simulate::{episode_rng, Episode, Policy, Step};

/// Sensor index doubles as the chain state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Left = 0,
    Right = 1,
}

impl Sensor {
    pub fn state(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BumpEvent {
    pub sensor: Sensor,
}

/// Compass headings, clockwise from north. `y` grows downwards (row order
/// of the ASCII form), so north is `(0, -1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

const HEADINGS: [Heading; 8] = [
    Heading::N,
    Heading::NE,
    Heading::E,
    Heading::SE,
    Heading::S,
    Heading::SW,
    Heading::W,
    Heading::NW,
];

impl Heading {
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::N => (0, -1),
            Heading::NE => (1, -1),
            Heading::E => (1, 0),
            Heading::SE => (1, 1),
            Heading::S => (0, 1),
            Heading::SW => (-1, 1),
            Heading::W => (-1, 0),
            Heading::NW => (-1, -1),
        }
    }

    /// Rotates by `eighths` × 45°, positive is clockwise.
    pub fn rotate(self, eighths: i32) -> Heading {
        HEADINGS[(self as i32 + eighths).rem_euclid(8) as usize]
    }

    pub fn all() -> [Heading; 8] {
        HEADINGS
    }
}

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotPose {
    pub cell: Cell,
    pub heading: Heading,
}

/// Room file contents: `{width, height, obstacles: [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<[usize; 2]>,
}

impl RoomSpec {
    pub fn empty(width: usize, height: usize) -> Self {
        RoomSpec {
            width,
            height,
            obstacles: Vec::new(),
        }
    }

    /// Parses `#` (obstacle) / `.` (free) art, one line per row.
    pub fn from_ascii(art: &str) -> Result<Self> {
        let rows: Vec<&str> = art
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut obstacles = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidRoom(format!("row {y} has a different width")));
            }
            for (x, c) in row.chars().enumerate() {
                match c {
                    '#' => obstacles.push([x, y]),
                    '.' => {}
                    other => {
                        return Err(Error::InvalidRoom(format!(
                            "unexpected character {other:?} at ({x}, {y})"
                        )))
                    }
                }
            }
        }
        Ok(RoomSpec {
            width,
            height,
            obstacles,
        })
    }

    pub fn to_ascii(&self) -> String {
        let blocked: BTreeSet<[usize; 2]> = self.obstacles.iter().copied().collect();
        let mut out = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if blocked.contains(&[x, y]) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Obstacle layout plus the set of scanned cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Room {
    width: usize,
    height: usize,
    blocked: Vec<bool>,
    visited: Vec<bool>,
    visited_count: usize,
}

impl Room {
    pub fn new(spec: &RoomSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(Error::InvalidRoom(
                "width and height must be positive".into(),
            ));
        }
        let mut blocked = vec![false; spec.width * spec.height];
        for &[x, y] in &spec.obstacles {
            if x >= spec.width || y >= spec.height {
                return Err(Error::InvalidRoom(format!(
                    "obstacle ({x}, {y}) outside the {}x{} room",
                    spec.width, spec.height
                )));
            }
            blocked[y * spec.width + x] = true;
        }
        Ok(Room {
            width: spec.width,
            height: spec.height,
            visited: vec![false; blocked.len()],
            blocked,
            visited_count: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn free_cells(&self) -> usize {
        self.blocked.iter().filter(|&&b| !b).count()
    }

    pub fn visited_count(&self) -> usize {
        self.visited_count
    }

    pub fn is_visited(&self, cell: Cell) -> bool {
        self.visited[cell.1 * self.width + cell.0]
    }

    pub fn visited_cells(&self) -> Vec<Cell> {
        (0..self.visited.len())
            .filter(|&n| self.visited[n])
            .map(|n| (n % self.width, n / self.width))
            .collect()
    }

    pub fn clear_visited(&mut self) {
        self.visited.iter_mut().for_each(|v| *v = false);
        self.visited_count = 0;
    }

    /// True for obstacles and anything outside the room.
    pub fn is_blocked(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.blocked[y as usize * self.width + x as usize]
    }

    fn neighbor(&self, cell: Cell, heading: Heading) -> Option<Cell> {
        let (dx, dy) = heading.delta();
        let (x, y) = (cell.0 as i64 + dx, cell.1 as i64 + dy);
        (!self.is_blocked(x, y)).then_some((x as usize, y as usize))
    }

    /// Marks `cell` scanned; returns whether it was new.
    fn visit(&mut self, cell: Cell) -> bool {
        let n = cell.1 * self.width + cell.0;
        if self.visited[n] {
            false
        } else {
            self.visited[n] = true;
            self.visited_count += 1;
            true
        }
    }

    pub fn is_boxed_in(&self, cell: Cell) -> bool {
        HEADINGS.iter().all(|&h| self.neighbor(cell, h).is_none())
    }

    pub fn check_pose(&self, pose: &RobotPose) -> Result<()> {
        let (x, y) = pose.cell;
        if self.is_blocked(x as i64, y as i64) {
            return Err(Error::InvalidRoom(format!(
                "pose cell ({x}, {y}) is blocked or outside the room"
            )));
        }
        Ok(())
    }
}

/// Room, robot pose and the head-on collision parity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridWorld {
    pub room: Room,
    pub pose: RobotPose,
    /// Next head-on collision reports `Right` when set.
    head_on_parity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advance {
    pub new_cells: usize,
    pub bump: BumpEvent,
}

impl GridWorld {
    pub fn new(room: Room, pose: RobotPose) -> Result<Self> {
        room.check_pose(&pose)?;
        Ok(GridWorld {
            room,
            pose,
            head_on_parity: false,
        })
    }

    /// Drives forward until the next cell is blocked, scanning every cell on
    /// the way including the current one.
    pub fn advance_until_bump(&mut self) -> Result<Advance> {
        let mut new_cells = usize::from(self.room.visit(self.pose.cell));
        if self.room.is_boxed_in(self.pose.cell) {
            return Err(Error::Stuck);
        }
        while let Some(next) = self.room.neighbor(self.pose.cell, self.pose.heading) {
            self.pose.cell = next;
            new_cells += usize::from(self.room.visit(next));
        }
        let h = self.pose.heading;
        let left = self.room.neighbor(self.pose.cell, h.rotate(-1)).is_none();
        let right = self.room.neighbor(self.pose.cell, h.rotate(1)).is_none();
        let sensor = match (left, right) {
            (true, false) => Sensor::Left,
            (false, true) => Sensor::Right,
            _ => {
                let s = if self.head_on_parity {
                    Sensor::Right
                } else {
                    Sensor::Left
                };
                self.head_on_parity = !self.head_on_parity;
                s
            }
        };
        Ok(Advance {
            new_cells,
            bump: BumpEvent { sensor },
        })
    }

    /// Decision 0: one cell back then turn left 90°; decision 1: back then
    /// turn right. A blocked backward cell leaves only the rotation.
    pub fn apply_reaction(&mut self, decision: usize) -> Result<()> {
        let turn = match decision {
            0 => -2,
            1 => 2,
            _ => {
                return Err(Error::DecisionOutOfRange {
                    state: 0,
                    decision,
                    num_decisions: 2,
                })
            }
        };
        if let Some(back) = self
            .room
            .neighbor(self.pose.cell, self.pose.heading.rotate(4))
        {
            self.pose.cell = back;
            self.room.visit(back);
        }
        self.pose.heading = self.pose.heading.rotate(turn);
        Ok(())
    }
}

/// Free function form of [`GridWorld::advance_until_bump`].
pub fn advance_until_bump(world: &mut GridWorld) -> Result<Advance> {
    world.advance_until_bump()
}

/// Pure pose update for a reaction (ignores scanning).
pub fn apply_reaction(room: &Room, pose: RobotPose, decision: usize) -> Result<RobotPose> {
    let mut world = GridWorld::new(room.clone(), pose)?;
    world.apply_reaction(decision)?;
    Ok(world.pose)
}

/// Bump-driven episode under construction; the interactive counterpart of
/// [`run_gridworld_episode`].
#[derive(Debug, Clone)]
pub struct GridCursor {
    world: GridWorld,
    state: Sensor,
    steps: Vec<Step>,
    initial_visited: usize,
}

impl GridCursor {
    /// Places the robot and drives to the first bump. Fails with
    /// [`Error::Stuck`] if there is no first bump to react to.
    pub fn start(world: GridWorld) -> Result<Self> {
        let mut world = world;
        let initial_visited = world.room.visited_count();
        let first = world.advance_until_bump()?;
        Ok(GridCursor {
            world,
            state: first.bump.sensor,
            steps: Vec::new(),
            initial_visited,
        })
    }

    pub fn state(&self) -> usize {
        self.state.state()
    }

    pub fn world(&self) -> &GridWorld {
        &self.world
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn payoff_so_far(&self) -> usize {
        self.world.room.visited_count() - self.initial_visited
    }

    pub fn step(&mut self, decision: usize) -> Result<&Step> {
        self.world.apply_reaction(decision)?;
        let next = self.world.advance_until_bump()?;
        self.steps.push(Step {
            state: self.state.state(),
            decision,
            next_state: next.bump.sensor.state(),
            step_payoff: None,
        });
        self.state = next.bump.sensor;
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn finish(self) -> Episode {
        Episode {
            total_payoff: self.payoff_so_far() as f64,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEpisode {
    pub episode: Episode,
    /// Ended early because the robot was boxed in.
    pub stuck: bool,
    pub scanned_cells: usize,
    pub free_cells: usize,
    pub final_pose: RobotPose,
}

/// Runs up to `max_bumps` reactions from `start` in a freshly cleared room.
pub fn run_gridworld_episode<P: Policy + ?Sized>(
    spec: &RoomSpec,
    start: RobotPose,
    policy: &mut P,
    max_bumps: usize,
) -> Result<GridEpisode> {
    if max_bumps == 0 {
        return Err(Error::InvalidParameter(
            "max_bumps must be at least 1".into(),
        ));
    }
    let room = Room::new(spec)?;
    let free_cells = room.free_cells();
    let mut world = GridWorld::new(room, start)?;
    let mut cursor = match GridCursor::start(world.clone()) {
        Ok(c) => c,
        Err(Error::Stuck) => {
            // Nothing to react to: only the starting cell was scanned.
            world.room.visit(start.cell);
            return Ok(GridEpisode {
                episode: Episode {
                    steps: Vec::new(),
                    total_payoff: world.room.visited_count() as f64,
                },
                stuck: true,
                scanned_cells: world.room.visited_count(),
                free_cells,
                final_pose: start,
            });
        }
        Err(e) => return Err(e),
    };
    let mut stuck = false;
    for _ in 0..max_bumps {
        let decision = policy.decide(cursor.state());
        match cursor.step(decision) {
            Ok(_) => {}
            Err(Error::Stuck) => {
                stuck = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let final_pose = cursor.world.pose;
    let scanned_cells = cursor.world.room.visited_count();
    Ok(GridEpisode {
        episode: cursor.finish(),
        stuck,
        scanned_cells,
        free_cells,
        final_pose,
    })
}

/// Uniform random start among free cells that are not boxed in.
pub fn random_start_pose<R: RngCore + ?Sized>(spec: &RoomSpec, rng: &mut R) -> Result<RobotPose> {
    let room = Room::new(spec)?;
    let candidates: Vec<Cell> = (0..room.height)
        .flat_map(|y| (0..room.width).map(move |x| (x, y)))
        .filter(|&(x, y)| !room.is_blocked(x as i64, y as i64) && !room.is_boxed_in((x, y)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidRoom("no free cell with room to move".into()));
    }
    let cell = candidates[rng.random_range(0..candidates.len())];
    let heading = HEADINGS[rng.random_range(0..8)];
    Ok(RobotPose { cell, heading })
}

/// Random obstacle layout: each cell blocked with probability `density`.
pub fn random_room<R: RngCore + ?Sized>(
    width: usize,
    height: usize,
    density: f64,
    rng: &mut R,
) -> RoomSpec {
    let mut obstacles = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if rng.random::<f64>() < density {
                obstacles.push([x, y]);
            }
        }
    }
    RoomSpec {
        width,
        height,
        obstacles,
    }
}

/// `episodes` runs of `policy`, episode `n` starting from a pose drawn with
/// the generator for `seed + n`.
pub fn run_gridworld_batch<P>(
    spec: &RoomSpec,
    policy: &P,
    max_bumps: usize,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<GridEpisode>>
where
    P: Policy + Clone + Sync,
{
    Room::new(spec)?;
    exec.map_range(episodes, |n| {
        let mut rng = episode_rng(seed, n as u64);
        let start = random_start_pose(spec, &mut rng)?;
        run_gridworld_episode(spec, start, &mut policy.clone(), max_bumps)
    })
    .into_iter()
    .collect()
}
