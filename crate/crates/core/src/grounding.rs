//! Natural-language grounding of the world state and prompt assembly.
//!
//! Poses are discretized to 5 cm / 15° and objects are described relative to
//! the end-effector with a closed vocabulary. The rendered layout is
//! byte-stable: key order, indentation and trailing whitespace are fixed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::learning::LearningStores;
use crate::model::{angle_diff, wrap_degrees, Pose6};
use crate::sim::{GripperState, ObjectKind, ObjectState, TaskKind, WorldState};

pub const MODE_SWITCH_PREFIX: &str = include_str!("../assets/mode_switch_prefix.txt");
pub const RULE_PREAMBLE: &str = include_str!("../assets/rule_preamble.txt");

pub const POSITION_QUANTUM_CM: i32 = 5;
pub const ANGLE_QUANTUM_DEG: i32 = 15;
/// Closeness thresholds for relative statements (meters, degrees).
pub const CLOSE_POSITION_M: f64 = 0.05;
pub const CLOSE_ANGLE_DEG: f64 = 15.0;

/// Rounds to the nearest multiple of `quantum`, ties away from zero.
fn quantize(v: f64, quantum: f64) -> i32 {
    ((v / quantum).round() * quantum) as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretePose {
    /// centimeters
    pub x: i32,
    pub y: i32,
    pub z: i32,
    /// degrees in [0, 360)
    pub roll: i32,
    pub pitch: i32,
    pub yaw: i32,
}

impl DiscretePose {
    pub fn to_pose6(&self) -> Pose6 {
        Pose6::new(
            self.x as f64 / 100.0,
            self.y as f64 / 100.0,
            self.z as f64 / 100.0,
            self.roll as f64,
            self.pitch as f64,
            self.yaw as f64,
        )
    }
}

pub fn discretize_pose(p: &Pose6) -> DiscretePose {
    // meters * 20 = centimeters / 5, exact for the common decimal grid
    let pos = |v: f64| quantize(v * 20.0, 1.0) * POSITION_QUANTUM_CM;
    let ang = |v: f64| {
        let q = quantize(v, ANGLE_QUANTUM_DEG as f64);
        wrap_degrees(q as f64) as i32
    };
    DiscretePose {
        x: pos(p.x),
        y: pos(p.y),
        z: pos(p.z),
        roll: ang(p.roll),
        pitch: ang(p.pitch),
        yaw: ang(p.yaw),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    X,
    Y,
    Z,
    Pitch,
    Roll,
    Yaw,
}

impl Dimension {
    /// Rendering order inside an object block.
    pub const ORDER: [Dimension; 6] = [
        Dimension::X,
        Dimension::Y,
        Dimension::Z,
        Dimension::Pitch,
        Dimension::Roll,
        Dimension::Yaw,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Dimension::X => "x_relation",
            Dimension::Y => "y_relation",
            Dimension::Z => "z_relation",
            Dimension::Pitch => "pitch_relation",
            Dimension::Roll => "roll_relation",
            Dimension::Yaw => "yaw_relation",
        }
    }

    /// `[positive delta, negative delta, close]` statements.
    pub fn vocabulary(self) -> [&'static str; 3] {
        match self {
            Dimension::X => [
                "to the forward of the robot arm",
                "to the backward of the robot arm",
                "close to the robot arm along the x-axis",
            ],
            Dimension::Y => [
                "to the left of the robot arm",
                "to the right of the robot arm",
                "close to the robot arm along the y-axis",
            ],
            Dimension::Z => [
                "above the robot arm",
                "below the robot arm",
                "close to the robot arm along the z-axis",
            ],
            Dimension::Pitch => [
                "pitched more up compared to the robot arm",
                "pitched more down compared to the robot arm",
                "pitch orientation is close to the robot arm's pitch orientation",
            ],
            // RollLeft decreases roll, so a smaller object roll reads "more left"
            Dimension::Roll => [
                "rolled more right compared to the robot arm",
                "rolled more left compared to the robot arm",
                "roll orientation is close to the robot arm's roll orientation",
            ],
            Dimension::Yaw => [
                "yawed more left compared to the robot arm",
                "yawed more right compared to the robot arm",
                "yaw orientation is close to the robot arm's roll orientation",
            ],
        }
    }

    fn is_angle(self) -> bool {
        matches!(self, Dimension::Pitch | Dimension::Roll | Dimension::Yaw)
    }

    /// Signed continuous delta object − end-effector (meters or degrees).
    fn delta(self, ee: &Pose6, obj: &Pose6) -> f64 {
        match self {
            Dimension::X => obj.x - ee.x,
            Dimension::Y => obj.y - ee.y,
            Dimension::Z => obj.z - ee.z,
            Dimension::Pitch => angle_diff(obj.pitch, ee.pitch),
            Dimension::Roll => angle_diff(obj.roll, ee.roll),
            Dimension::Yaw => angle_diff(obj.yaw, ee.yaw),
        }
    }

    fn is_close(self, delta: f64) -> bool {
        if self.is_angle() {
            delta.abs() <= CLOSE_ANGLE_DEG
        } else {
            delta.abs() <= CLOSE_POSITION_M
        }
    }
}

/// Every statement the grounding can emit for the six dimensions.
pub fn vocabulary() -> Vec<&'static str> {
    Dimension::ORDER.iter().flat_map(|d| d.vocabulary()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeStatement {
    pub dimension: Dimension,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectRelation {
    Holding,
    Dropped,
    Statements { statements: Vec<RelativeStatement> },
    /// Signed integer deltas in cm / degrees, in [`Dimension::ORDER`].
    Numeric { deltas: Vec<i64> },
}

fn holding_or_dropped(ee: &Pose6, obj: &ObjectState) -> Option<ObjectRelation> {
    let all_close = Dimension::ORDER
        .iter()
        .all(|d| d.is_close(d.delta(ee, &obj.pose)));
    if obj.held || all_close {
        Some(ObjectRelation::Holding)
    } else if obj.dropped {
        Some(ObjectRelation::Dropped)
    } else {
        None
    }
}

pub fn relative_statements(ee: &Pose6, obj: &ObjectState) -> ObjectRelation {
    if let Some(r) = holding_or_dropped(ee, obj) {
        return r;
    }
    let statements = Dimension::ORDER
        .iter()
        .map(|&d| {
            let delta = d.delta(ee, &obj.pose);
            let [pos, neg, close] = d.vocabulary();
            let text = if d.is_close(delta) {
                close
            } else if delta > 0.0 {
                pos
            } else {
                neg
            };
            RelativeStatement {
                dimension: d,
                text: text.to_string(),
            }
        })
        .collect();
    ObjectRelation::Statements { statements }
}

/// Numeric ablation encoding: same collapse rules, integer deltas otherwise.
pub fn relative_numeric(ee: &Pose6, obj: &ObjectState) -> ObjectRelation {
    if let Some(r) = holding_or_dropped(ee, obj) {
        return r;
    }
    let deltas = Dimension::ORDER
        .iter()
        .map(|&d| {
            let delta = d.delta(ee, &obj.pose);
            if d.is_angle() {
                delta.round() as i64
            } else {
                (delta * 100.0).round() as i64
            }
        })
        .collect();
    ObjectRelation::Numeric { deltas }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBlock {
    pub name: String,
    pub relation: ObjectRelation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotBlock {
    pub pose: DiscretePose,
    pub gripper: GripperState,
}

/// Everything in a pose description except the trailing output reminder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseDescription {
    pub task_line: String,
    pub robot: RobotBlock,
    pub objects: Vec<ObjectBlock>,
}

pub fn describe_world(world: &WorldState, task: TaskKind, numeric: bool) -> PoseDescription {
    describe_objects(world, task.task_line(), task.objects(), numeric)
}

pub fn describe_objects(
    world: &WorldState,
    task_line: &str,
    kinds: &[ObjectKind],
    numeric: bool,
) -> PoseDescription {
    let ee = world.ee_pose;
    let objects = kinds
        .iter()
        .filter_map(|k| world.object(*k))
        .map(|o| ObjectBlock {
            name: o.kind.display_name().to_string(),
            relation: if numeric {
                relative_numeric(&ee, o)
            } else {
                relative_statements(&ee, o)
            },
        })
        .collect();
    PoseDescription {
        task_line: task_line.to_string(),
        robot: RobotBlock {
            pose: discretize_pose(&ee),
            gripper: world.gripper_state(),
        },
        objects,
    }
}

const POSE_HEADER: &str = "### Current Task, Robot Arm State, and Object Information:   \n";
const OUTPUT_REMINDER: &str = "- **Output (do not output any additional analysis):**  \n\
{\n\
\"Group 1\": \"A/B/C/D: {corresponding most likely action from group 1}\",\n\
\"Group 2\": \"A/B/C/D: {corresponding most likely action from group 2}\",\n\
\"Group 3\": \"A/B/C: {corresponding most likely action from group 3}\",\n\
\"Group 4\": \"A/B/C: {corresponding most likely action from group 4}\",\n\
}\n";

impl PoseDescription {
    /// From the task line through the object block, shared by the pose
    /// section and rendered examples.
    pub fn render_body(&self) -> String {
        let mut s = String::new();
        let p = &self.robot.pose;
        let _ = write!(
            s,
            "- **Current Task:** {task}\n\
             \n\
             - **Current State of the Robot Arm:**  \n\
             {{\n    \"position\": {{\n        \"x\": {x},         \n        \"y\": {y},\n        \"z\": {z}\n    }},\n    \
             \"orientation\": {{\n        \"theta x\": {roll},\n        \"theta y\": {pitch},\n        \"theta z\": {yaw}\n    }}\n    \
             \"gripper\": {gripper}\n}}\n\
             \n\
             - **Current Object Information:**  \n{{\n",
            task = self.task_line,
            x = p.x,
            y = p.y,
            z = p.z,
            roll = p.roll,
            pitch = p.pitch,
            yaw = p.yaw,
            gripper = self.robot.gripper.as_str(),
        );
        for obj in &self.objects {
            let _ = writeln!(s, "    \"{}\": {{", obj.name);
            match &obj.relation {
                ObjectRelation::Holding => {
                    let _ = writeln!(
                        s,
                        "        \"relative_pos\":\"The robot arm is holding the {}.\",    ",
                        obj.name
                    );
                }
                ObjectRelation::Dropped => {
                    let _ = writeln!(
                        s,
                        "        \"relative_pos\":\"The {} has been dropped.\",    ",
                        obj.name
                    );
                }
                ObjectRelation::Statements { statements } => {
                    let values: Vec<String> = statements.iter().map(|st| format!("\"{}\"", st.text)).collect();
                    render_relations(&mut s, &values);
                }
                ObjectRelation::Numeric { deltas } => {
                    let values: Vec<String> = deltas.iter().map(|d| d.to_string()).collect();
                    render_relations(&mut s, &values);
                }
            }
            s.push_str("    },\n");
        }
        s.push_str("}\n");
        s
    }

    /// The full pose section, including the output-format reminder.
    pub fn render_pose_section(&self) -> String {
        format!("{POSE_HEADER}\n{}\n{OUTPUT_REMINDER}", self.render_body())
    }
}

fn render_relations(s: &mut String, values: &[String]) {
    s.push_str("        \"relative_pos\":{\n            \"relative_position\":{\n");
    for (d, v) in Dimension::ORDER[..3].iter().zip(values) {
        let _ = writeln!(s, "                \"{}\": {v},", d.key());
    }
    s.push_str("            },\n            \"relative_orientation\":{\n");
    for (d, v) in Dimension::ORDER[3..].iter().zip(&values[3..]) {
        let _ = writeln!(s, "                \"{}\": {v},", d.key());
    }
    s.push_str("            },\n        }\n");
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Lams,
    Static,
    NumState,
    DirectExamples,
}

/// The instruction sent to the model: prefix, rules (or examples), pose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub prefix: String,
    pub rules_section: String,
    pub pose_section: String,
    pub mode: PromptMode,
}

impl PromptBundle {
    pub fn text(&self) -> String {
        [&self.prefix, &self.rules_section, &self.pose_section]
            .into_iter()
            .filter(|p| !p.is_empty())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Assembles a mode-switch prompt. `shuffle_seed` fixes the order of rules
/// (or examples, for [`PromptMode::DirectExamples`]).
pub fn assemble_prompt(
    stores: &LearningStores,
    world: &WorldState,
    task: TaskKind,
    mode: PromptMode,
    shuffle_seed: u64,
) -> PromptBundle {
    let numeric = mode == PromptMode::NumState;
    let rules_section = match mode {
        PromptMode::Static => String::new(),
        PromptMode::Lams | PromptMode::NumState => stores.compose_rule_section(shuffle_seed),
        PromptMode::DirectExamples => stores.compose_examples_section(shuffle_seed),
    };
    PromptBundle {
        prefix: MODE_SWITCH_PREFIX.to_string(),
        rules_section,
        pose_section: describe_world(world, task, numeric).render_pose_section(),
        mode,
    }
}

/// Pose section of a rendered prompt (from its header to the end).
pub fn pose_section_of(prompt: &str) -> &str {
    prompt
        .rfind(POSE_HEADER.trim_end())
        .map(|i| &prompt[i..])
        .unwrap_or(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EE_START;
    use proptest::prelude::*;

    fn oracle_cm(v_m: f64) -> i32 {
        // independent path: go through centimeters
        let cm = v_m * 100.0;
        ((cm / 5.0).round() * 5.0) as i32
    }

    #[test]
    fn discretization_examples() {
        assert_eq!(discretize_pose(&Pose6::new(0.412, 0.0, 0.0, 0.0, 0.0, 0.0)).x, 40);
        let z = discretize_pose(&Pose6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(z, DiscretePose { x: 0, y: 0, z: 0, roll: 0, pitch: 0, yaw: 0 });
        let d = discretize_pose(&Pose6::new(0.40, 0.35, 0.20, 180.0, 0.0, 90.0));
        assert_eq!(d, DiscretePose { x: 40, y: 35, z: 20, roll: 180, pitch: 0, yaw: 90 });
        assert_eq!(discretize_pose(&Pose6::new(-0.375, 0.375, 0.0, 352.5, 7.5, 359.0)),
            DiscretePose { x: -40, y: 40, z: 0, roll: 0, pitch: 15, yaw: 0 });
    }

    #[test]
    fn discretization_matches_oracle_on_grid() {
        for i in -400..=400 {
            let v = i as f64 * 0.001 + 0.0003;
            assert_eq!(discretize_pose(&Pose6::new(v, 0.0, 0.0, 0.0, 0.0, 0.0)).x, oracle_cm(v), "{v}");
        }
    }

    fn obj_at(dx: f64, dy: f64, dz: f64, droll: f64, dpitch: f64, dyaw: f64) -> ObjectState {
        let e = EE_START;
        ObjectState::new(
            ObjectKind::Bottle,
            Pose6::new(e.x + dx, e.y + dy, e.z + dz, e.roll + droll, e.pitch + dpitch, e.yaw + dyaw),
        )
    }

    fn texts(r: &ObjectRelation) -> Vec<&str> {
        match r {
            ObjectRelation::Statements { statements } => statements.iter().map(|s| s.text.as_str()).collect(),
            other => panic!("expected statements, got {other:?}"),
        }
    }

    #[test]
    fn statement_examples() {
        let r = relative_statements(&EE_START, &obj_at(0.0, 0.12, 0.0, 30.0, 0.0, 0.0));
        assert_eq!(texts(&r)[1], "to the left of the robot arm");
        let r = relative_statements(&EE_START, &obj_at(0.0, 0.03, 0.2, 0.0, 0.0, 0.0));
        assert_eq!(texts(&r)[1], "close to the robot arm along the y-axis");
        let mut held = obj_at(0.3, 0.3, 0.3, 90.0, 90.0, 90.0);
        held.held = true;
        assert_eq!(relative_statements(&EE_START, &held), ObjectRelation::Holding);
        let r = relative_statements(&EE_START, &obj_at(-0.1, -0.1, -0.1, -30.0, -30.0, -30.0));
        assert_eq!(
            texts(&r),
            vec![
                "to the backward of the robot arm",
                "to the right of the robot arm",
                "below the robot arm",
                "pitched more down compared to the robot arm",
                "rolled more left compared to the robot arm",
                "yawed more right compared to the robot arm",
            ]
        );
    }

    #[test]
    fn angles_compare_on_shortest_arc() {
        let mut e = EE_START;
        e.yaw = 350.0;
        let mut o = obj_at(0.3, 0.0, 0.0, 0.0, 0.0, 0.0);
        o.pose.yaw = 0.0;
        assert_eq!(texts(&relative_statements(&e, &o))[5], "yaw orientation is close to the robot arm's roll orientation");
        o.pose.yaw = 30.0;
        assert_eq!(texts(&relative_statements(&e, &o))[5], "yawed more left compared to the robot arm");
    }

    #[test]
    fn numeric_encoding() {
        let r = relative_numeric(&EE_START, &obj_at(0.0, 0.12, -0.2, 0.0, 0.0, 31.0));
        assert_eq!(r, ObjectRelation::Numeric { deltas: vec![0, 12, -20, 0, 0, 31] });
        let desc = PoseDescription {
            task_line: "t".into(),
            robot: RobotBlock { pose: discretize_pose(&EE_START), gripper: GripperState::Open },
            objects: vec![ObjectBlock { name: "bottle".into(), relation: r }],
        };
        assert!(desc.render_body().contains("\"y_relation\": 12,\n"));
    }

    #[test]
    fn dropped_rendering() {
        let mut o = obj_at(0.3, 0.0, 0.0, 0.0, 0.0, 0.0);
        o.kind = ObjectKind::BottleCap;
        o.dropped = true;
        assert_eq!(relative_statements(&EE_START, &o), ObjectRelation::Dropped);
        let desc = PoseDescription {
            task_line: "t".into(),
            robot: RobotBlock { pose: discretize_pose(&EE_START), gripper: GripperState::Closed },
            objects: vec![ObjectBlock { name: "bottle cap".into(), relation: ObjectRelation::Dropped }],
        };
        let body = desc.render_body();
        assert!(body.contains("\"relative_pos\":\"The bottle cap has been dropped.\","));
        assert!(body.contains("\"gripper\": closed\n"));
    }

    #[test]
    fn prompt_concatenation_order() {
        let b = PromptBundle {
            prefix: "P\n".into(),
            rules_section: "R\n".into(),
            pose_section: "S\n".into(),
            mode: PromptMode::Lams,
        };
        assert_eq!(b.text(), "P\n\nR\n\nS\n");
        let b = PromptBundle { rules_section: String::new(), mode: PromptMode::Static, ..b };
        assert_eq!(b.text(), "P\n\nS\n");
    }

    #[test]
    fn pose_section_lookup_skips_prefix() {
        let stores = LearningStores::new(TaskKind::WaterPouring, "t");
        let w = crate::sim::initial_world(TaskKind::WaterPouring, 4);
        let b = assemble_prompt(&stores, &w, TaskKind::WaterPouring, PromptMode::Lams, 0);
        assert_eq!(pose_section_of(&b.text()), b.pose_section);
        assert!(b.rules_section.is_empty());
    }

    fn any_pose() -> impl Strategy<Value = Pose6> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -720.0f64..720.0, -720.0f64..720.0, -720.0f64..720.0)
            .prop_map(|(x, y, z, r, p, w)| Pose6::new(x, y, z, r, p, w))
    }

    proptest! {
        #[test]
        fn discretization_quanta_and_idempotence(p in any_pose()) {
            let d = discretize_pose(&p);
            for v in [d.x, d.y, d.z] { prop_assert_eq!(v % POSITION_QUANTUM_CM, 0); }
            for a in [d.roll, d.pitch, d.yaw] {
                prop_assert_eq!(a % ANGLE_QUANTUM_DEG, 0);
                prop_assert!((0..360).contains(&a));
            }
            prop_assert_eq!(discretize_pose(&d.to_pose6()), d);
        }

        #[test]
        fn vocabulary_closure(ee in any_pose(), o in any_pose(), held in any::<bool>(), dropped in any::<bool>()) {
            let mut obj = ObjectState::new(ObjectKind::Bowl, o);
            obj.held = held;
            obj.dropped = dropped && !held;
            let vocab = vocabulary();
            match relative_statements(&ee, &obj) {
                ObjectRelation::Statements { statements } => {
                    prop_assert!(!held);
                    prop_assert_eq!(statements.len(), 6);
                    for (s, d) in statements.iter().zip(Dimension::ORDER) {
                        prop_assert_eq!(s.dimension, d);
                        prop_assert!(vocab.contains(&s.text.as_str()));
                        prop_assert!(d.vocabulary().contains(&s.text.as_str()));
                    }
                }
                ObjectRelation::Holding => {}
                ObjectRelation::Dropped => prop_assert!(obj.dropped && !held),
                ObjectRelation::Numeric { .. } => prop_assert!(false),
            }
        }

        #[test]
        fn rendering_is_deterministic(seed in 0u64..500) {
            let w = crate::sim::initial_world(TaskKind::BookStorage, seed);
            let a = describe_world(&w, TaskKind::BookStorage, false).render_pose_section();
            let b = describe_world(&w, TaskKind::BookStorage, false).render_pose_section();
            prop_assert_eq!(a, b);
        }
    }
}
