//! Deterministic stand-in for a participant: follows a waypoint plan derived
//! from the task's stage table and reacts to the mapping it is offered.

use lams_core::model::{angle_diff, ActionDirection, Component, DirectionGroup, ModeMapping, UserAction, VelocityProfile};
use lams_core::sim::{ObjectKind, TaskKind, WorldState};
use lams_core::switcher::GroupedState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserConfig {
    /// meters
    pub position_tol: f64,
    /// degrees
    pub angle_tol: f64,
    /// Extra idle ticks after the pause window before switching by hand.
    pub patience: u64,
    /// margin above the lift threshold, meters
    pub lift_margin: f64,
    /// roll beyond the pour threshold, degrees
    pub pour_margin: f64,
}

impl Default for UserConfig {
    fn default() -> Self {
        Self {
            position_tol: 0.005,
            angle_tol: 2.0,
            patience: 0,
            lift_margin: 0.02,
            pour_margin: 15.0,
        }
    }
}

/// What the tracked body should reach. Targets are in the frame of either
/// the end-effector or the held object (which moves rigidly with it).
#[derive(Debug, Clone, PartialEq)]
pub enum Waypoint {
    Pose {
        body: Option<ObjectKind>,
        /// x, y, z, roll, pitch, yaw; `None` is unconstrained
        target: [Option<f64>; 6],
    },
    Gripper {
        close: bool,
    },
}

const POSE_COMPONENTS: [Component; 6] = [
    Component::X,
    Component::Y,
    Component::Z,
    Component::Roll,
    Component::Pitch,
    Component::Yaw,
];

fn pose_values(p: &lams_core::model::Pose6) -> [f64; 6] {
    [p.x, p.y, p.z, p.roll, p.pitch, p.yaw]
}

/// Waypoint for the next unreached stage, or `None` when done.
pub fn waypoint(task: TaskKind, stage: usize, world: &WorldState, cfg: &UserConfig) -> Option<Waypoint> {
    let obj = |k: ObjectKind| world.object(k).expect("task object present");
    let full = |k: ObjectKind| {
        let v = pose_values(&obj(k).pose);
        Waypoint::Pose {
            body: None,
            target: v.map(Some),
        }
    };
    let lift = |k: ObjectKind| {
        let mut target = [None; 6];
        target[2] = Some(obj(k).initial_pose.z + 0.10 + cfg.lift_margin);
        Waypoint::Pose { body: Some(k), target }
    };
    use ObjectKind::*;
    let wp = match (task, stage) {
        (TaskKind::WaterPouring, 0) => full(BottleCap),
        (TaskKind::WaterPouring, 1) => Waypoint::Gripper { close: true },
        (TaskKind::WaterPouring, 2) => lift(BottleCap),
        (TaskKind::WaterPouring, 3) => Waypoint::Gripper { close: false },
        (TaskKind::WaterPouring, 4) => full(Bottle),
        (TaskKind::WaterPouring, 5) => Waypoint::Gripper { close: true },
        (TaskKind::WaterPouring, 6) => {
            let bowl = obj(Bowl).pose;
            Waypoint::Pose {
                body: Some(Bottle),
                target: [Some(bowl.x), Some(bowl.y), Some(bowl.z + 0.15), None, None, None],
            }
        }
        (TaskKind::WaterPouring, 7) => {
            let b = obj(Bottle);
            let mut target = [None; 6];
            target[3] = Some(b.initial_pose.roll + 60.0 + cfg.pour_margin);
            Waypoint::Pose { body: Some(Bottle), target }
        }
        (TaskKind::BookStorage, 0) => full(Book),
        (TaskKind::BookStorage, 1) => Waypoint::Gripper { close: true },
        (TaskKind::BookStorage, 2) => lift(Book),
        (TaskKind::BookStorage, 3) => {
            let s = obj(Shelf).pose;
            Waypoint::Pose {
                body: Some(Book),
                target: [Some(s.x - 0.05), Some(s.y), Some(s.z), None, None, Some(s.yaw)],
            }
        }
        (TaskKind::BookStorage, 4) => {
            let s = obj(Shelf).pose;
            Waypoint::Pose {
                body: Some(Book),
                target: [Some(s.x + 0.10), Some(s.y), Some(s.z), None, None, Some(s.yaw)],
            }
        }
        _ => return None,
    };
    Some(wp)
}

/// The direction the user wants next and how hard to push it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Need {
    pub direction: ActionDirection,
    pub magnitude: f64,
}

/// Out-of-tolerance error per pose component of a waypoint.
fn pose_errors(world: &WorldState, body: Option<ObjectKind>, target: &[Option<f64>; 6]) -> [Option<f64>; 6] {
    let current = match body {
        Some(k) => world.object(k).map(|o| o.pose).unwrap_or(world.ee_pose),
        None => world.ee_pose,
    };
    let cur = pose_values(&current);
    let mut out = [None; 6];
    for i in 0..6 {
        if let Some(t) = target[i] {
            out[i] = Some(if i < 3 { t - cur[i] } else { angle_diff(t, cur[i]) });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Drive(UserAction),
    /// Hold still so the pause detector fires.
    Pause,
    ManualSwitch(DirectionGroup),
    GroupedCycle,
    /// Nothing left to do at this waypoint but the stage has not registered.
    Idle,
    Done,
}

#[derive(Debug, Clone)]
pub struct ScriptedUser {
    pub task: TaskKind,
    pub cfg: UserConfig,
    velocity: VelocityProfile,
    pause_window: u64,
    need: Option<(usize, ActionDirection)>,
    paused: u64,
    paused_for: Option<ActionDirection>,
}

impl ScriptedUser {
    pub fn new(task: TaskKind, cfg: UserConfig, velocity: VelocityProfile, pause_window: u64) -> Self {
        Self {
            task,
            cfg,
            velocity,
            pause_window,
            need: None,
            paused: 0,
            paused_for: None,
        }
    }

    /// Current need. A need sticks until its own error is within tolerance
    /// (or flips sign); then the largest remaining error is chosen, position
    /// before orientation before gripper.
    pub fn need(&mut self, world: &WorldState, stage: usize) -> Option<Need> {
        let wp = waypoint(self.task, stage, world, &self.cfg)?;
        let next = match &wp {
            Waypoint::Gripper { close } => {
                let open_enough = world.gripper_aperture >= 1.0;
                let closed_enough = world.gripper_aperture <= 0.0;
                match close {
                    true if !closed_enough => Some((6, ActionDirection::CloseGripper, 1.0)),
                    false if !open_enough => Some((6, ActionDirection::OpenGripper, 1.0)),
                    _ => None,
                }
            }
            Waypoint::Pose { body, target } => {
                let errs = pose_errors(world, *body, target);
                let tol = |i: usize| if i < 3 { self.cfg.position_tol } else { self.cfg.angle_tol };
                let speed = |i: usize| self.velocity.scale_for(POSE_COMPONENTS[i]);
                let as_need = |i: usize, e: f64| {
                    (
                        i,
                        ActionDirection::for_component(POSE_COMPONENTS[i], e > 0.0),
                        (e.abs() / speed(i)).min(1.0),
                    )
                };
                let sticky = self.need.and_then(|(i, d)| {
                    let e = errs.get(i).copied().flatten()?;
                    let still = e.abs() > tol(i) && ActionDirection::for_component(POSE_COMPONENTS[i], e > 0.0) == d;
                    still.then(|| as_need(i, e))
                });
                sticky.or_else(|| {
                    [0..3, 3..6].into_iter().find_map(|range| {
                        range
                            .filter_map(|i| errs[i].filter(|e| e.abs() > tol(i)).map(|e| (i, e)))
                            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                            .map(|(i, e)| as_need(i, e))
                    })
                })
            }
        };
        let prev = self.need.map(|(_, d)| d);
        self.need = next.map(|(i, d, _)| (i, d));
        if self.need.map(|(_, d)| d) != prev {
            self.paused = 0;
            self.paused_for = None;
        }
        next.map(|(_, direction, magnitude)| Need { direction, magnitude })
    }

    /// One decision per tick. `llm` tells whether pausing can summon an
    /// automatic switch; `grouped` is the cycle state for the grouped baseline.
    pub fn decide(
        &mut self,
        world: &WorldState,
        mode: &ModeMapping,
        stage: usize,
        stages_total: usize,
        llm: bool,
        grouped: Option<GroupedState>,
    ) -> Decision {
        if stage >= stages_total {
            return Decision::Done;
        }
        let Some(need) = self.need(world, stage) else {
            return Decision::Idle;
        };
        let slot = need.direction.group();
        if mode.get(slot) == Some(need.direction) {
            return Decision::Drive(UserAction::along(slot, need.magnitude));
        }
        if grouped.is_some() {
            return Decision::GroupedCycle;
        }
        if llm && self.paused_for != Some(need.direction) {
            self.paused += 1;
            if self.paused >= self.pause_window + self.cfg.patience {
                self.paused_for = Some(need.direction);
            }
            return Decision::Pause;
        }
        Decision::ManualSwitch(slot)
    }
}
