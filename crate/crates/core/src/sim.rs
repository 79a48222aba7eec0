//! Deterministic kinematic tabletop world: end-effector integration, grasp and
//! release, task stage tracking and the joystick pause detector.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{angle_diff, Pose6, RobotAction, UserAction};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("pause threshold must be a positive integer multiple of the tick duration")]
    InvalidClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    BottleCap,
    Bottle,
    Bowl,
    Book,
    Shelf,
}

impl ObjectKind {
    /// Name used in prompts and as the object id.
    pub fn display_name(self) -> &'static str {
        match self {
            ObjectKind::BottleCap => "bottle cap",
            ObjectKind::Bottle => "bottle",
            ObjectKind::Bowl => "bowl",
            ObjectKind::Book => "book",
            ObjectKind::Shelf => "shelf",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            ObjectKind::BottleCap => "bottle_cap",
            ObjectKind::Bottle => "bottle",
            ObjectKind::Bowl => "bowl",
            ObjectKind::Book => "book",
            ObjectKind::Shelf => "shelf",
        }
    }

    pub fn graspable(self) -> bool {
        !matches!(self, ObjectKind::Bowl | ObjectKind::Shelf)
    }

    /// Resting height on the table, used when a dropped object settles.
    pub fn table_height(self) -> f64 {
        match self {
            ObjectKind::BottleCap => 0.02,
            ObjectKind::Bottle => 0.10,
            ObjectKind::Bowl => 0.05,
            ObjectKind::Book => 0.03,
            ObjectKind::Shelf => 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub kind: ObjectKind,
    pub pose: Pose6,
    pub initial_pose: Pose6,
    pub held: bool,
    pub dropped: bool,
    /// Object pose minus end-effector pose at grasp time (angles as
    /// shortest-arc differences). Present iff `held`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_offset: Option<Pose6>,
}

impl ObjectState {
    pub fn new(kind: ObjectKind, pose: Pose6) -> Self {
        Self {
            id: kind.id().to_string(),
            kind,
            pose,
            initial_pose: pose,
            held: false,
            dropped: false,
            grasp_offset: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    pub fn as_str(self) -> &'static str {
        match self {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        }
    }
}

pub const GRIPPER_CLOSED_BELOW: f64 = 0.5;

pub fn gripper_state_of(aperture: f64) -> GripperState {
    if aperture < GRIPPER_CLOSED_BELOW {
        GripperState::Closed
    } else {
        GripperState::Open
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ee_pose: Pose6,
    pub gripper_aperture: f64,
    pub objects: Vec<ObjectState>,
    pub tick: u64,
    pub task_layout_seed: u64,
    /// Set when the last step clipped the end-effector to the workspace box.
    #[serde(default)]
    pub clipped: bool,
}

impl WorldState {
    pub fn gripper_state(&self) -> GripperState {
        gripper_state_of(self.gripper_aperture)
    }

    pub fn object(&self, kind: ObjectKind) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.kind == kind)
    }

    pub fn held_object(&self) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.held)
    }

    /// Canonical serialized form, used for determinism checks and logs.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world state serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    /// meters
    pub grasp_position_tol: f64,
    /// degrees, compared per angle on the shortest arc
    pub grasp_angle_tol: f64,
    /// meters from the initial pose beyond which a released object is dropped
    pub drop_displacement: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workspace_min: [0.0, -0.4, 0.0],
            workspace_max: [0.8, 0.4, 0.8],
            grasp_position_tol: 0.03,
            grasp_angle_tol: 20.0,
            drop_displacement: 0.10,
        }
    }
}

/// Integrates one robot action. Pure: the input world is not modified.
pub fn step(world: &WorldState, a_r: &RobotAction, cfg: &SimConfig) -> WorldState {
    let mut next = world.clone();
    let prev_aperture = world.gripper_aperture;

    let raw = [
        world.ee_pose.x + a_r.dx,
        world.ee_pose.y + a_r.dy,
        world.ee_pose.z + a_r.dz,
    ];
    let mut pos = raw;
    for i in 0..3 {
        pos[i] = raw[i].clamp(cfg.workspace_min[i], cfg.workspace_max[i]);
    }
    next.clipped = pos != raw;
    next.ee_pose = Pose6::new(
        pos[0],
        pos[1],
        pos[2],
        world.ee_pose.roll + a_r.droll,
        world.ee_pose.pitch + a_r.dpitch,
        world.ee_pose.yaw + a_r.dyaw,
    );
    next.gripper_aperture = (world.gripper_aperture + a_r.dgripper).clamp(0.0, 1.0);

    let ee = next.ee_pose;
    for obj in next.objects.iter_mut().filter(|o| o.held) {
        if let Some(off) = obj.grasp_offset {
            obj.pose = follow(&ee, &off);
        }
    }

    grasp_release_rules(prev_aperture, &mut next, cfg);
    next.tick = world.tick + 1;
    next
}

fn follow(ee: &Pose6, off: &Pose6) -> Pose6 {
    Pose6::new(
        ee.x + off.x,
        ee.y + off.y,
        ee.z + off.z,
        ee.roll + off.roll,
        ee.pitch + off.pitch,
        ee.yaw + off.yaw,
    )
}

fn offset_of(obj: &Pose6, ee: &Pose6) -> Pose6 {
    Pose6 {
        x: obj.x - ee.x,
        y: obj.y - ee.y,
        z: obj.z - ee.z,
        roll: angle_diff(obj.roll, ee.roll),
        pitch: angle_diff(obj.pitch, ee.pitch),
        yaw: angle_diff(obj.yaw, ee.yaw),
    }
}

/// Applies grasp on a closing transition and release on an opening one.
pub fn grasp_release_rules(prev_aperture: f64, world: &mut WorldState, cfg: &SimConfig) {
    let was_closed = prev_aperture < GRIPPER_CLOSED_BELOW;
    let is_closed = world.gripper_aperture < GRIPPER_CLOSED_BELOW;
    let ee = world.ee_pose;

    if !was_closed && is_closed && world.held_object().is_none() {
        let candidate = world
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.kind.graspable() && !o.held)
            .filter(|(_, o)| {
                o.pose.distance_to(&ee) <= cfg.grasp_position_tol
                    && o.pose.max_angle_diff(&ee) <= cfg.grasp_angle_tol
            })
            .min_by(|(_, a), (_, b)| {
                a.pose
                    .distance_to(&ee)
                    .total_cmp(&b.pose.distance_to(&ee))
            })
            .map(|(i, _)| i);
        if let Some(i) = candidate {
            let obj = &mut world.objects[i];
            obj.held = true;
            obj.dropped = false;
            obj.grasp_offset = Some(offset_of(&obj.pose, &ee));
        }
    } else if was_closed && !is_closed {
        for obj in world.objects.iter_mut().filter(|o| o.held) {
            obj.held = false;
            obj.grasp_offset = None;
            if obj.pose.distance_to(&obj.initial_pose) > cfg.drop_displacement {
                obj.dropped = true;
                obj.pose.z = obj.kind.table_height();
            } else {
                obj.pose.z = obj.initial_pose.z;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    WaterPouring,
    BookStorage,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::WaterPouring, TaskKind::BookStorage];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::WaterPouring => "water_pouring",
            TaskKind::BookStorage => "book_storage",
        }
    }

    /// Task sentence placed in the pose section of every prompt.
    pub fn task_line(self) -> &'static str {
        match self {
            TaskKind::WaterPouring => {
                "Open the cap of a bottle, then pick up the bottle and pour what's inside into a bowl."
            }
            TaskKind::BookStorage => {
                "Pick up the book lying on the table with its spine facing up, then place it upright on the shelf."
            }
        }
    }

    /// Objects described in prompts, in rendering order.
    pub fn objects(self) -> &'static [ObjectKind] {
        match self {
            TaskKind::WaterPouring => &[ObjectKind::BottleCap, ObjectKind::Bottle, ObjectKind::Bowl],
            TaskKind::BookStorage => &[ObjectKind::Book, ObjectKind::Shelf],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "water_pouring" => Ok(TaskKind::WaterPouring),
            "book_storage" => Ok(TaskKind::BookStorage),
            other => Err(SimError::UnknownTask(other.to_string())),
        }
    }
}

pub const EE_START: Pose6 = Pose6 {
    x: 0.40,
    y: 0.0,
    z: 0.40,
    roll: 180.0,
    pitch: 0.0,
    yaw: 90.0,
};

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Initial world for a task, with object poses sampled from `seed`.
pub fn initial_world(task: TaskKind, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = match task {
        TaskKind::WaterPouring => {
            let bx = uniform(&mut rng, 0.45, 0.60);
            let by = uniform(&mut rng, -0.25, 0.25);
            let roll = 180.0 + uniform(&mut rng, -40.0, 40.0);
            let pitch = uniform(&mut rng, -30.0, 30.0);
            let yaw = 90.0 + uniform(&mut rng, -45.0, 45.0);
            let (wx, wy) = loop {
                let wx = uniform(&mut rng, 0.40, 0.65);
                let wy = uniform(&mut rng, -0.30, 0.30);
                if ((wx - bx).powi(2) + (wy - by).powi(2)).sqrt() >= 0.15 {
                    break (wx, wy);
                }
            };
            vec![
                ObjectState::new(ObjectKind::BottleCap, Pose6::new(bx, by, 0.22, roll, pitch, yaw)),
                ObjectState::new(ObjectKind::Bottle, Pose6::new(bx, by, 0.10, roll, pitch, yaw)),
                ObjectState::new(ObjectKind::Bowl, Pose6::new(wx, wy, 0.05, 0.0, 0.0, 0.0)),
            ]
        }
        TaskKind::BookStorage => {
            let bx = uniform(&mut rng, 0.35, 0.55);
            let by = uniform(&mut rng, -0.25, 0.0);
            let roll = 180.0 + uniform(&mut rng, -10.0, 10.0);
            let pitch = -uniform(&mut rng, 30.0, 60.0);
            let yaw = 90.0 + uniform(&mut rng, -30.0, 30.0);
            let sx = uniform(&mut rng, 0.58, 0.66);
            let sy = uniform(&mut rng, 0.05, 0.30);
            let sz = uniform(&mut rng, 0.25, 0.40);
            let syaw = 90.0 + uniform(&mut rng, -30.0, 30.0);
            vec![
                ObjectState::new(ObjectKind::Book, Pose6::new(bx, by, 0.03, roll, pitch, yaw)),
                ObjectState::new(ObjectKind::Shelf, Pose6::new(sx, sy, sz, 0.0, 0.0, syaw)),
            ]
        }
    };
    WorldState {
        ee_pose: EE_START,
        gripper_aperture: 1.0,
        objects,
        tick: 0,
        task_layout_seed: seed,
        clipped: false,
    }
}

/// Tolerances for stage predicates. Lengths in meters, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTolerances {
    pub align_position: f64,
    pub align_angle: f64,
    pub lift_height: f64,
    pub above_lateral: f64,
    pub bowl_rim: f64,
    pub pour_roll: f64,
    pub slot_position: f64,
    pub slot_yaw: f64,
    /// distance in front of the shelf at which a book counts as aligned
    pub slot_entry: f64,
    pub insert_depth: f64,
}

impl Default for StageTolerances {
    fn default() -> Self {
        Self {
            align_position: 0.03,
            align_angle: 20.0,
            lift_height: 0.10,
            above_lateral: 0.05,
            bowl_rim: 0.10,
            pour_roll: 60.0,
            slot_position: 0.04,
            slot_yaw: 15.0,
            slot_entry: 0.05,
            insert_depth: 0.08,
        }
    }
}

/// Checkpoint predicates. Each one also holds once the world has moved past
/// it, so a fresh evaluation of a mid-task world reports the right prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "check", content = "object")]
pub enum StageCheck {
    Aligned(ObjectKind),
    Grasped(ObjectKind),
    Lifted(ObjectKind),
    Released(ObjectKind),
    AboveBowl(ObjectKind),
    Poured(ObjectKind),
    AtSlot(ObjectKind),
    Inserted(ObjectKind),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage {
    pub name: &'static str,
    pub check: StageCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub stages: Vec<Stage>,
    pub tolerances: StageTolerances,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        use ObjectKind::*;
        use StageCheck::*;
        let stages = match kind {
            TaskKind::WaterPouring => vec![
                Stage { name: "align_cap", check: Aligned(BottleCap) },
                Stage { name: "grasp_cap", check: Grasped(BottleCap) },
                Stage { name: "lift_cap", check: Lifted(BottleCap) },
                Stage { name: "release_cap", check: Released(BottleCap) },
                Stage { name: "align_bottle", check: Aligned(Bottle) },
                Stage { name: "grasp_bottle", check: Grasped(Bottle) },
                Stage { name: "above_bowl", check: AboveBowl(Bottle) },
                Stage { name: "pour", check: Poured(Bottle) },
            ],
            TaskKind::BookStorage => vec![
                Stage { name: "align_book", check: Aligned(Book) },
                Stage { name: "grasp_book", check: Grasped(Book) },
                Stage { name: "lift_book", check: Lifted(Book) },
                Stage { name: "align_slot", check: AtSlot(Book) },
                Stage { name: "insert_book", check: Inserted(Book) },
            ],
        };
        Self {
            kind,
            stages,
            tolerances: StageTolerances::default(),
        }
    }

    pub fn satisfied(&self, check: StageCheck, world: &WorldState) -> bool {
        let t = &self.tolerances;
        let obj = |k: ObjectKind| world.object(k);
        match check {
            StageCheck::Aligned(k) => obj(k).is_some_and(|o| {
                o.held
                    || o.dropped
                    || (o.pose.distance_to(&world.ee_pose) <= t.align_position
                        && o.pose.max_angle_diff(&world.ee_pose) <= t.align_angle)
            }),
            StageCheck::Grasped(k) => obj(k).is_some_and(|o| o.held || o.dropped),
            StageCheck::Lifted(k) => obj(k).is_some_and(|o| {
                o.dropped || (o.held && o.pose.z >= o.initial_pose.z + t.lift_height)
            }),
            StageCheck::Released(k) => obj(k).is_some_and(|o| o.dropped),
            StageCheck::AboveBowl(k) => self.above_bowl(k, world),
            StageCheck::Poured(k) => {
                self.above_bowl(k, world)
                    && obj(k).is_some_and(|o| {
                        angle_diff(o.pose.roll, o.initial_pose.roll).abs() >= t.pour_roll
                    })
            }
            StageCheck::AtSlot(k) => {
                self.inserted(k, world)
                    || (self.slot_aligned(k, world)
                        && match (obj(k), obj(ObjectKind::Shelf)) {
                            (Some(o), Some(shelf)) => {
                                (o.pose.x - (shelf.pose.x - t.slot_entry)).abs() <= t.slot_position
                            }
                            _ => false,
                        })
            }
            StageCheck::Inserted(k) => self.inserted(k, world),
        }
    }

    fn above_bowl(&self, k: ObjectKind, world: &WorldState) -> bool {
        let t = &self.tolerances;
        match (world.object(k), world.object(ObjectKind::Bowl)) {
            (Some(o), Some(bowl)) => {
                let lateral = ((o.pose.x - bowl.pose.x).powi(2) + (o.pose.y - bowl.pose.y).powi(2)).sqrt();
                o.held && lateral <= t.above_lateral && o.pose.z >= bowl.pose.z + t.bowl_rim
            }
            _ => false,
        }
    }

    /// Held object within the slot's y/z tolerance and yaw-aligned with it.
    fn slot_aligned(&self, k: ObjectKind, world: &WorldState) -> bool {
        let t = &self.tolerances;
        match (world.object(k), world.object(ObjectKind::Shelf)) {
            (Some(o), Some(shelf)) if o.held => {
                angle_diff(o.pose.yaw, shelf.pose.yaw).abs() <= t.slot_yaw
                    && (o.pose.y - shelf.pose.y).abs() <= t.slot_position
                    && (o.pose.z - shelf.pose.z).abs() <= t.slot_position
            }
            _ => false,
        }
    }

    fn inserted(&self, k: ObjectKind, world: &WorldState) -> bool {
        self.slot_aligned(k, world)
            && match (world.object(k), world.object(ObjectKind::Shelf)) {
                (Some(o), Some(shelf)) => o.pose.x >= shelf.pose.x + self.tolerances.insert_depth,
                _ => false,
            }
    }
}

/// Highest contiguous prefix of satisfied stage predicates, and whether all pass.
pub fn task_progress(world: &WorldState, spec: &TaskSpec) -> (usize, bool) {
    let n = spec
        .stages
        .iter()
        .take_while(|s| spec.satisfied(s.check, world))
        .count();
    (n, n == spec.stages.len())
}

/// Keeps stage progress monotone across a trial.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTracker {
    pub reached: usize,
}

impl StageTracker {
    /// Advances past every next stage whose predicate now holds. Returns the
    /// indices of stages newly reached.
    pub fn update(&mut self, world: &WorldState, spec: &TaskSpec) -> Vec<usize> {
        let mut newly = Vec::new();
        while self.reached < spec.stages.len() && spec.satisfied(spec.stages[self.reached].check, world) {
            newly.push(self.reached);
            self.reached += 1;
        }
        newly
    }

    pub fn completed(&self, spec: &TaskSpec) -> bool {
        self.reached == spec.stages.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionClock {
    /// seconds
    pub tick_duration: f64,
    /// seconds
    pub pause_threshold: f64,
}

impl Default for SessionClock {
    fn default() -> Self {
        Self {
            tick_duration: 0.1,
            pause_threshold: 1.5,
        }
    }
}

impl SessionClock {
    pub fn new(tick_duration: f64, pause_threshold: f64) -> Result<Self, SimError> {
        let clock = Self {
            tick_duration,
            pause_threshold,
        };
        clock.window()?;
        Ok(clock)
    }

    /// Number of ticks in the pause window.
    pub fn window(&self) -> Result<usize, SimError> {
        if !(self.tick_duration > 0.0 && self.pause_threshold > 0.0) {
            return Err(SimError::InvalidClock);
        }
        let ratio = self.pause_threshold / self.tick_duration;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::InvalidClock);
        }
        Ok(n as usize)
    }
}

/// Pure edge-triggered pause check over an input history (oldest first):
/// fires at exactly the tick the trailing run of zero inputs reaches the
/// window length.
pub fn detect_pause(history: &[UserAction], window: usize) -> bool {
    let run = history.iter().rev().take_while(|a| a.is_zero()).count();
    run == window
}

/// Streaming form of [`detect_pause`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseDetector {
    window: usize,
    zero_run: usize,
}

impl PauseDetector {
    pub fn new(window: usize) -> Self {
        Self { window, zero_run: 0 }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn zero_run(&self) -> usize {
        self.zero_run
    }

    /// Feeds one tick's input; true on the tick a pause is detected.
    pub fn observe(&mut self, input: &UserAction) -> bool {
        if input.is_zero() {
            self.zero_run += 1;
            self.zero_run == self.window
        } else {
            self.zero_run = 0;
            false
        }
    }

    /// Restarts the zero run, e.g. after a button press counts as activity.
    pub fn reset(&mut self) {
        self.zero_run = 0;
    }
}
