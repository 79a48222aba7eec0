//! Byte-level checks of rendered prompt sections against the checked-in
//! instances, and content hashes of the verbatim prompt assets.

use lams_core::grounding::{describe_world, MODE_SWITCH_PREFIX, RULE_PREAMBLE};
use lams_core::learning::{ExampleRecord, RULE_GEN_PREFIX};
use lams_core::model::{ActionDirection, DirectionGroup, Pose6};
use lams_core::sim::{ObjectKind, ObjectState, TaskKind, WorldState};
use sha2::{Digest, Sha256};

const POSE_INSTANCE: &str = include_str!("../assets/pose_instance.txt");
const EXAMPLE_INSTANCE: &str = include_str!("../assets/example_instance.txt");

fn sha256_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn world(ee: Pose6, objects: Vec<ObjectState>) -> WorldState {
    WorldState {
        ee_pose: ee,
        gripper_aperture: 1.0,
        objects,
        tick: 0,
        task_layout_seed: 0,
        clipped: false,
    }
}

#[test]
fn pose_section_matches_instance() {
    let ee = Pose6::new(0.40, 0.35, 0.20, 180.0, 0.0, 90.0);
    let mut cap = ObjectState::new(ObjectKind::BottleCap, ee);
    // the instance shows an open gripper with the cap reported as held
    cap.held = true;
    let bottle = ObjectState::new(ObjectKind::Bottle, Pose6::new(0.50, 0.20, 0.10, 180.0, -30.0, 90.0));
    let bowl = ObjectState::new(ObjectKind::Bowl, Pose6::new(0.55, 0.15, 0.05, 175.0, -45.0, 95.0));
    let w = world(ee, vec![cap, bottle, bowl]);
    let rendered = describe_world(&w, TaskKind::WaterPouring, false).render_pose_section();
    assert_eq!(rendered, POSE_INSTANCE);
}

#[test]
fn example_matches_instance() {
    let ee = Pose6::new(0.50, 0.30, 0.15, 120.0, 0.0, 90.0);
    let cap = ObjectState::new(ObjectKind::BottleCap, Pose6::new(0.51, 0.31, 0.16, 150.0, 30.0, 90.0));
    let bottle = ObjectState::new(ObjectKind::Bottle, Pose6::new(0.50, 0.30, 0.05, 150.0, -30.0, 90.0));
    let bowl = ObjectState::new(ObjectKind::Bowl, Pose6::new(0.65, 0.45, 0.05, 150.0, -30.0, 90.0));
    let w = world(ee, vec![cap, bottle, bowl]);
    let record = ExampleRecord {
        tick: 0,
        pose: describe_world(&w, TaskKind::WaterPouring, false),
        slot: DirectionGroup::Up,
        direction: ActionDirection::PitchUp,
    };
    assert_eq!(record.render(0), EXAMPLE_INSTANCE);
}

#[test]
fn asset_hashes() {
    assert_eq!(
        sha256_hex(MODE_SWITCH_PREFIX),
        "24d7f82145ff217cdc889245be2505989cbdeedec2278cc56803f3dc0e29f045"
    );
    assert_eq!(
        sha256_hex(RULE_GEN_PREFIX),
        "03bf85abf0b96928e74e9b5669fd17f378d39e9cda4267256396f9e96c5af214"
    );
    assert_eq!(
        sha256_hex(RULE_PREAMBLE),
        "94fd8175360dd7460316b19875b862d82b522dd9a1398b8d7cf20f68f319ed0f"
    );
    assert_eq!(
        sha256_hex(POSE_INSTANCE),
        "884575f7cd514bb2432783a7953e1e8fe281bf29865fee65f80ac9df09b1be4e"
    );
    assert_eq!(
        sha256_hex(EXAMPLE_INSTANCE),
        "0f2296af8eee33f611c5be0dc16b104c8f8ea1d3d5937b0121a172fd28ecaf67"
    );
}

#[test]
fn prefix_carries_quirky_yaw_wording() {
    assert!(MODE_SWITCH_PREFIX.contains("\"yaw orientation is close to the robot arm's roll orientation\""));
}
