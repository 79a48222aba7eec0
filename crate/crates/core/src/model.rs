//! Action-space algebra: direction groups, joystick mode mappings and the
//! mapping from a two-axis joystick deflection to a 7-D robot action.
//!
//! Units are meters and degrees throughout. Every sign convention is read
//! from [`SIGN_TABLE`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("letter {letter:?} is not valid for group {group}")]
    InvalidLetter { group: DirectionGroup, letter: Letter },
    #[error("{direction} does not belong to the {slot} slot")]
    SlotMismatch {
        slot: DirectionGroup,
        direction: ActionDirection,
    },
    #[error("group number must be 1..=4, got {0}")]
    InvalidGroupNumber(u8),
    #[error("velocity scale must be finite and strictly positive")]
    InvalidVelocity,
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 360.0 {
        0.0
    } else {
        wrapped
    }
}

/// Signed shortest-arc difference `to - from`, in `(-180, 180]`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// End-effector or object pose. Position in meters, Euler angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6 {
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            roll: wrap_degrees(roll),
            pitch: wrap_degrees(pitch),
            yaw: wrap_degrees(yaw),
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn distance_to(&self, other: &Pose6) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Largest shortest-arc angle difference over roll, pitch and yaw.
    pub fn max_angle_diff(&self, other: &Pose6) -> f64 {
        [
            angle_diff(self.roll, other.roll),
            angle_diff(self.pitch, other.pitch),
            angle_diff(self.yaw, other.yaw),
        ]
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One of the seven robot action components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    X,
    Y,
    Z,
    Roll,
    Pitch,
    Yaw,
    Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Translation,
    Rotation,
    Gripper,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::X,
        Component::Y,
        Component::Z,
        Component::Roll,
        Component::Pitch,
        Component::Yaw,
        Component::Gripper,
    ];

    pub fn kind(self) -> ComponentKind {
        match self {
            Component::X | Component::Y | Component::Z => ComponentKind::Translation,
            Component::Roll | Component::Pitch | Component::Yaw => ComponentKind::Rotation,
            Component::Gripper => ComponentKind::Gripper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDirection {
    MoveForward,
    MoveBackward,
    MoveUp,
    MoveDown,
    MoveLeft,
    MoveRight,
    PitchUp,
    PitchDown,
    RollLeft,
    RollRight,
    YawLeft,
    YawRight,
    OpenGripper,
    CloseGripper,
}

/// Direction → (component, sign). Left is +y in a right-handed frame with x
/// forward and z up; roll and yaw follow the same left/right reading used by
/// the grounding vocabulary.
pub const SIGN_TABLE: [(ActionDirection, Component, f64); 14] = [
    (ActionDirection::MoveForward, Component::X, 1.0),
    (ActionDirection::MoveBackward, Component::X, -1.0),
    (ActionDirection::MoveLeft, Component::Y, 1.0),
    (ActionDirection::MoveRight, Component::Y, -1.0),
    (ActionDirection::MoveUp, Component::Z, 1.0),
    (ActionDirection::MoveDown, Component::Z, -1.0),
    (ActionDirection::RollLeft, Component::Roll, -1.0),
    (ActionDirection::RollRight, Component::Roll, 1.0),
    (ActionDirection::PitchUp, Component::Pitch, 1.0),
    (ActionDirection::PitchDown, Component::Pitch, -1.0),
    (ActionDirection::YawLeft, Component::Yaw, 1.0),
    (ActionDirection::YawRight, Component::Yaw, -1.0),
    (ActionDirection::OpenGripper, Component::Gripper, 1.0),
    (ActionDirection::CloseGripper, Component::Gripper, -1.0),
];

impl ActionDirection {
    pub const ALL: [ActionDirection; 14] = [
        ActionDirection::MoveForward,
        ActionDirection::MoveBackward,
        ActionDirection::MoveUp,
        ActionDirection::MoveDown,
        ActionDirection::MoveLeft,
        ActionDirection::MoveRight,
        ActionDirection::PitchUp,
        ActionDirection::PitchDown,
        ActionDirection::RollLeft,
        ActionDirection::RollRight,
        ActionDirection::YawLeft,
        ActionDirection::YawRight,
        ActionDirection::OpenGripper,
        ActionDirection::CloseGripper,
    ];

    pub fn group(self) -> DirectionGroup {
        group_of(self)
    }

    /// The component this direction drives and the sign of its delta.
    pub fn effect(self) -> (Component, f64) {
        let (_, component, sign) = SIGN_TABLE
            .iter()
            .find(|(d, _, _)| *d == self)
            .expect("every direction has a sign-table row");
        (*component, *sign)
    }

    /// The direction driving `component` with the given sign.
    pub fn for_component(component: Component, positive: bool) -> ActionDirection {
        let sign = if positive { 1.0 } else { -1.0 };
        SIGN_TABLE
            .iter()
            .find(|(_, c, s)| *c == component && *s == sign)
            .map(|(d, _, _)| *d)
            .expect("every component has both signs in the sign table")
    }

    /// Human-facing name, as written in correction examples ("Pitch up").
    pub fn display_name(self) -> &'static str {
        match self {
            ActionDirection::MoveForward => "Move forward",
            ActionDirection::MoveBackward => "Move backward",
            ActionDirection::MoveUp => "Move up",
            ActionDirection::MoveDown => "Move down",
            ActionDirection::MoveLeft => "Move left",
            ActionDirection::MoveRight => "Move right",
            ActionDirection::PitchUp => "Pitch up",
            ActionDirection::PitchDown => "Pitch down",
            ActionDirection::RollLeft => "Roll left",
            ActionDirection::RollRight => "Roll right",
            ActionDirection::YawLeft => "Yaw left",
            ActionDirection::YawRight => "Yaw right",
            ActionDirection::OpenGripper => "Open gripper",
            ActionDirection::CloseGripper => "Close gripper",
        }
    }

    pub fn is_gripper(self) -> bool {
        matches!(self, ActionDirection::OpenGripper | ActionDirection::CloseGripper)
    }

    pub fn is_rotation(self) -> bool {
        self.effect().0.kind() == ComponentKind::Rotation
    }
}

impl fmt::Display for ActionDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Joystick direction and the group of robot directions it can be mapped to.
/// A mode mapping has exactly one slot per group, so the two terms coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionGroup {
    Up,
    Down,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Lateral,
    Longitudinal,
}

const UP_MEMBERS: [ActionDirection; 4] = [
    ActionDirection::MoveForward,
    ActionDirection::MoveUp,
    ActionDirection::PitchUp,
    ActionDirection::OpenGripper,
];
const DOWN_MEMBERS: [ActionDirection; 4] = [
    ActionDirection::MoveBackward,
    ActionDirection::MoveDown,
    ActionDirection::PitchDown,
    ActionDirection::CloseGripper,
];
const LEFT_MEMBERS: [ActionDirection; 3] = [
    ActionDirection::MoveLeft,
    ActionDirection::RollLeft,
    ActionDirection::YawLeft,
];
const RIGHT_MEMBERS: [ActionDirection; 3] = [
    ActionDirection::MoveRight,
    ActionDirection::RollRight,
    ActionDirection::YawRight,
];

impl DirectionGroup {
    pub const ALL: [DirectionGroup; 4] = [
        DirectionGroup::Up,
        DirectionGroup::Down,
        DirectionGroup::Left,
        DirectionGroup::Right,
    ];

    /// Members in letter order (A, B, C[, D]).
    pub fn members(self) -> &'static [ActionDirection] {
        match self {
            DirectionGroup::Up => &UP_MEMBERS,
            DirectionGroup::Down => &DOWN_MEMBERS,
            DirectionGroup::Left => &LEFT_MEMBERS,
            DirectionGroup::Right => &RIGHT_MEMBERS,
        }
    }

    pub fn contains(self, d: ActionDirection) -> bool {
        self.members().contains(&d)
    }

    /// Group number used in prompts: Up=1, Down=2, Left=3, Right=4.
    pub fn number(self) -> u8 {
        match self {
            DirectionGroup::Up => 1,
            DirectionGroup::Down => 2,
            DirectionGroup::Left => 3,
            DirectionGroup::Right => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self, ModelError> {
        match n {
            1 => Ok(DirectionGroup::Up),
            2 => Ok(DirectionGroup::Down),
            3 => Ok(DirectionGroup::Left),
            4 => Ok(DirectionGroup::Right),
            other => Err(ModelError::InvalidGroupNumber(other)),
        }
    }

    pub fn index(self) -> usize {
        self.number() as usize - 1
    }

    pub fn axis(self) -> Axis {
        match self {
            DirectionGroup::Up | DirectionGroup::Down => Axis::Longitudinal,
            DirectionGroup::Left | DirectionGroup::Right => Axis::Lateral,
        }
    }

    /// Sign of the joystick component that engages this slot.
    pub fn joystick_sign(self) -> f64 {
        match self {
            DirectionGroup::Up | DirectionGroup::Right => 1.0,
            DirectionGroup::Down | DirectionGroup::Left => -1.0,
        }
    }

    pub fn letters(self) -> &'static [Letter] {
        &Letter::ALL[..self.members().len()]
    }
}

impl fmt::Display for DirectionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Group {}", self.number())
    }
}

pub fn group_of(d: ActionDirection) -> DirectionGroup {
    DirectionGroup::ALL
        .into_iter()
        .find(|g| g.contains(d))
        .expect("direction groups cover every direction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn as_char(self) -> char {
        match self {
            Letter::A => 'A',
            Letter::B => 'B',
            Letter::C => 'C',
            Letter::D => 'D',
        }
    }

    pub fn from_char(c: char) -> Option<Letter> {
        match c {
            'A' => Some(Letter::A),
            'B' => Some(Letter::B),
            'C' => Some(Letter::C),
            'D' => Some(Letter::D),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// The `(group, letter, text)` under which a direction is offered in the
/// mode-switching prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CanonicalLabel {
    pub group: DirectionGroup,
    pub letter: Letter,
    pub text: &'static str,
}

fn prompt_text(d: ActionDirection) -> &'static str {
    match d {
        ActionDirection::MoveForward => "Move forward",
        ActionDirection::MoveUp => "Move up",
        ActionDirection::PitchUp => "Rotate up",
        ActionDirection::OpenGripper => "Open gripper",
        ActionDirection::MoveBackward => "Move backward",
        ActionDirection::MoveDown => "Move down",
        ActionDirection::PitchDown => "Rotate down",
        ActionDirection::CloseGripper => "Close gripper",
        ActionDirection::MoveLeft => "Move left",
        ActionDirection::RollLeft => "Roll left",
        ActionDirection::YawLeft => "Rotate left",
        ActionDirection::MoveRight => "Move right",
        ActionDirection::RollRight => "Roll right",
        ActionDirection::YawRight => "Rotate right",
    }
}

pub fn label_of(d: ActionDirection) -> CanonicalLabel {
    let group = group_of(d);
    let pos = group
        .members()
        .iter()
        .position(|m| *m == d)
        .expect("direction is a member of its own group");
    CanonicalLabel {
        group,
        letter: Letter::ALL[pos],
        text: prompt_text(d),
    }
}

pub fn direction_of(group: DirectionGroup, letter: Letter) -> Result<ActionDirection, ModelError> {
    group
        .members()
        .get(letter.index())
        .copied()
        .ok_or(ModelError::InvalidLetter { group, letter })
}

/// Assignment of the four joystick directions to robot action directions.
///
/// A slot may be empty (the fourth grouped-mapping group has no lateral
/// mapping); an empty slot produces no motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMapping")]
pub struct ModeMapping {
    up: Option<ActionDirection>,
    down: Option<ActionDirection>,
    left: Option<ActionDirection>,
    right: Option<ActionDirection>,
}

#[derive(Deserialize)]
struct RawMapping {
    up: Option<ActionDirection>,
    down: Option<ActionDirection>,
    left: Option<ActionDirection>,
    right: Option<ActionDirection>,
}

impl TryFrom<RawMapping> for ModeMapping {
    type Error = ModelError;

    fn try_from(raw: RawMapping) -> Result<Self, Self::Error> {
        let mut m = ModeMapping::EMPTY;
        for (slot, d) in [
            (DirectionGroup::Up, raw.up),
            (DirectionGroup::Down, raw.down),
            (DirectionGroup::Left, raw.left),
            (DirectionGroup::Right, raw.right),
        ] {
            if let Some(d) = d {
                m.set(slot, d)?;
            }
        }
        Ok(m)
    }
}

impl Default for ModeMapping {
    /// Every slot on its "A" direction: plain Cartesian translation.
    fn default() -> Self {
        Self {
            up: Some(ActionDirection::MoveForward),
            down: Some(ActionDirection::MoveBackward),
            left: Some(ActionDirection::MoveLeft),
            right: Some(ActionDirection::MoveRight),
        }
    }
}

impl ModeMapping {
    const EMPTY: ModeMapping = ModeMapping {
        up: None,
        down: None,
        left: None,
        right: None,
    };

    pub fn new(
        up: ActionDirection,
        down: ActionDirection,
        left: ActionDirection,
        right: ActionDirection,
    ) -> Result<Self, ModelError> {
        let mut m = Self::EMPTY;
        m.set(DirectionGroup::Up, up)?;
        m.set(DirectionGroup::Down, down)?;
        m.set(DirectionGroup::Left, left)?;
        m.set(DirectionGroup::Right, right)?;
        Ok(m)
    }

    /// Mapping with only the longitudinal slots populated.
    pub fn longitudinal_only(up: ActionDirection, down: ActionDirection) -> Result<Self, ModelError> {
        let mut m = Self::EMPTY;
        m.set(DirectionGroup::Up, up)?;
        m.set(DirectionGroup::Down, down)?;
        Ok(m)
    }

    pub fn get(&self, slot: DirectionGroup) -> Option<ActionDirection> {
        match slot {
            DirectionGroup::Up => self.up,
            DirectionGroup::Down => self.down,
            DirectionGroup::Left => self.left,
            DirectionGroup::Right => self.right,
        }
    }

    fn slot_mut(&mut self, slot: DirectionGroup) -> &mut Option<ActionDirection> {
        match slot {
            DirectionGroup::Up => &mut self.up,
            DirectionGroup::Down => &mut self.down,
            DirectionGroup::Left => &mut self.left,
            DirectionGroup::Right => &mut self.right,
        }
    }

    pub fn set(&mut self, slot: DirectionGroup, d: ActionDirection) -> Result<(), ModelError> {
        if !slot.contains(d) {
            return Err(ModelError::SlotMismatch { slot, direction: d });
        }
        *self.slot_mut(slot) = Some(d);
        Ok(())
    }

    /// Advances one slot to the next direction in its group's letter order
    /// (A→B→C[→D]→A) and returns the new direction. An empty slot becomes A.
    pub fn cycle(&mut self, slot: DirectionGroup) -> ActionDirection {
        let members = slot.members();
        let next = match self.get(slot) {
            Some(cur) => {
                let pos = members.iter().position(|m| *m == cur).unwrap_or(0);
                members[(pos + 1) % members.len()]
            }
            None => members[0],
        };
        *self.slot_mut(slot) = Some(next);
        next
    }

    /// True when some slot currently maps to `d`.
    pub fn exposes(&self, d: ActionDirection) -> bool {
        self.get(group_of(d)) == Some(d)
    }

    pub fn slots(&self) -> [(DirectionGroup, Option<ActionDirection>); 4] {
        DirectionGroup::ALL.map(|g| (g, self.get(g)))
    }

    /// Slots whose contents differ between `self` and `other`.
    pub fn changed_slots(&self, other: &ModeMapping) -> Vec<DirectionGroup> {
        DirectionGroup::ALL
            .into_iter()
            .filter(|g| self.get(*g) != other.get(*g))
            .collect()
    }
}

/// Number of single-slot presses needed to cycle `from` to `to`.
pub fn cycle_distance(from: Option<ActionDirection>, to: ActionDirection) -> usize {
    let group = group_of(to);
    let members = group.members();
    let target = members.iter().position(|m| *m == to).expect("member");
    match from {
        Some(f) if group.contains(f) => {
            let start = members.iter().position(|m| *m == f).expect("member");
            (target + members.len() - start) % members.len()
        }
        _ => target + 1,
    }
}

/// Joystick deflection. Both components are clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UserAction {
    pub lateral: f64,
    pub longitudinal: f64,
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

impl UserAction {
    pub const ZERO: UserAction = UserAction {
        lateral: 0.0,
        longitudinal: 0.0,
    };

    pub fn new(lateral: f64, longitudinal: f64) -> Self {
        Self {
            lateral: clamp_unit(lateral),
            longitudinal: clamp_unit(longitudinal),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lateral == 0.0 && self.longitudinal == 0.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.lateral * c, self.longitudinal * c)
    }

    /// Slots engaged by this deflection, with the magnitude on each.
    pub fn engaged_slots(&self) -> Vec<(DirectionGroup, f64)> {
        let mut out = Vec::with_capacity(2);
        if self.longitudinal > 0.0 {
            out.push((DirectionGroup::Up, self.longitudinal));
        } else if self.longitudinal < 0.0 {
            out.push((DirectionGroup::Down, -self.longitudinal));
        }
        if self.lateral > 0.0 {
            out.push((DirectionGroup::Right, self.lateral));
        } else if self.lateral < 0.0 {
            out.push((DirectionGroup::Left, -self.lateral));
        }
        out
    }

    /// Deflection that drives `slot` at `magnitude` and nothing else.
    pub fn along(slot: DirectionGroup, magnitude: f64) -> Self {
        let v = slot.joystick_sign() * magnitude;
        match slot.axis() {
            Axis::Longitudinal => Self::new(0.0, v),
            Axis::Lateral => Self::new(v, 0.0),
        }
    }
}

/// Per-tick robot action deltas: meters, degrees and aperture fraction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotAction {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
    pub dgripper: f64,
}

impl RobotAction {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::X => self.dx,
            Component::Y => self.dy,
            Component::Z => self.dz,
            Component::Roll => self.droll,
            Component::Pitch => self.dpitch,
            Component::Yaw => self.dyaw,
            Component::Gripper => self.dgripper,
        }
    }

    fn get_mut(&mut self, c: Component) -> &mut f64 {
        match c {
            Component::X => &mut self.dx,
            Component::Y => &mut self.dy,
            Component::Z => &mut self.dz,
            Component::Roll => &mut self.droll,
            Component::Pitch => &mut self.dpitch,
            Component::Yaw => &mut self.dyaw,
            Component::Gripper => &mut self.dgripper,
        }
    }

    pub fn is_zero(&self) -> bool {
        Component::ALL.iter().all(|c| self.get(*c) == 0.0)
    }

    pub fn nonzero_components(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| self.get(*c) != 0.0)
            .collect()
    }
}

/// Full-deflection speeds per tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    /// meters per tick
    pub translation: f64,
    /// degrees per tick
    pub rotation: f64,
    /// aperture fraction per tick
    pub gripper: f64,
}

impl Default for VelocityProfile {
    fn default() -> Self {
        Self {
            translation: 0.01,
            rotation: 3.0,
            gripper: 0.1,
        }
    }
}

impl VelocityProfile {
    pub fn new(translation: f64, rotation: f64, gripper: f64) -> Result<Self, ModelError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(translation) && ok(rotation) && ok(gripper) {
            Ok(Self {
                translation,
                rotation,
                gripper,
            })
        } else {
            Err(ModelError::InvalidVelocity)
        }
    }

    pub fn scale_for(&self, c: Component) -> f64 {
        match c.kind() {
            ComponentKind::Translation => self.translation,
            ComponentKind::Rotation => self.rotation,
            ComponentKind::Gripper => self.gripper,
        }
    }
}

/// Maps a joystick deflection through the active mode to a robot action.
/// Each engaged slot writes `sign * |deflection| * velocity` into its
/// component; both axes may engage at once.
pub fn apply_mode(mode: &ModeMapping, input: &UserAction, v: &VelocityProfile) -> RobotAction {
    let mut action = RobotAction::default();
    for (slot, magnitude) in input.engaged_slots() {
        if let Some(d) = mode.get(slot) {
            let (component, sign) = d.effect();
            *action.get_mut(component) += sign * magnitude * v.scale_for(component);
        }
    }
    action
}

/// Directions driven by `input` under `mode`, with their magnitudes.
pub fn engaged_directions(mode: &ModeMapping, input: &UserAction) -> Vec<(DirectionGroup, ActionDirection, f64)> {
    input
        .engaged_slots()
        .into_iter()
        .filter_map(|(slot, m)| mode.get(slot).map(|d| (slot, d, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn group_membership_matches_listing() {
        assert_eq!(group_of(ActionDirection::PitchUp), DirectionGroup::Up);
        assert_eq!(group_of(ActionDirection::CloseGripper), DirectionGroup::Down);
        assert_eq!(group_of(ActionDirection::RollRight), DirectionGroup::Right);
        let sizes: Vec<usize> = DirectionGroup::ALL.iter().map(|g| g.members().len()).collect();
        assert_eq!(sizes, vec![4, 4, 3, 3]);
        for d in ActionDirection::ALL {
            let owners = DirectionGroup::ALL.iter().filter(|g| g.contains(d)).count();
            assert_eq!(owners, 1, "{d:?}");
        }
    }

    #[test]
    fn labels_follow_prompt_tables() {
        let l = label_of(ActionDirection::PitchUp);
        assert_eq!((l.group.number(), l.letter, l.text), (1, Letter::C, "Rotate up"));
        let l = label_of(ActionDirection::OpenGripper);
        assert_eq!((l.group.number(), l.letter, l.text), (1, Letter::D, "Open gripper"));
        assert_eq!(
            direction_of(DirectionGroup::Left, Letter::A).unwrap(),
            ActionDirection::MoveLeft
        );
        assert_eq!(label_of(ActionDirection::YawRight).text, "Rotate right");
        assert_eq!(label_of(ActionDirection::RollLeft).letter, Letter::B);
    }

    #[test]
    fn letter_d_is_invalid_for_lateral_groups() {
        for g in [DirectionGroup::Left, DirectionGroup::Right] {
            assert_eq!(
                direction_of(g, Letter::D),
                Err(ModelError::InvalidLetter {
                    group: g,
                    letter: Letter::D
                })
            );
        }
    }

    #[test]
    fn label_round_trip() {
        for d in ActionDirection::ALL {
            let l = label_of(d);
            assert_eq!(direction_of(l.group, l.letter).unwrap(), d);
        }
    }

    #[test]
    fn apply_mode_examples() {
        let v = VelocityProfile::new(0.05, 3.0, 0.1).unwrap();
        let mut mode = ModeMapping::default();
        mode.set(DirectionGroup::Up, ActionDirection::MoveUp).unwrap();
        let a = apply_mode(&mode, &UserAction::new(0.0, 1.0), &v);
        assert_eq!(a, RobotAction { dz: 0.05, ..Default::default() });

        assert!(apply_mode(&mode, &UserAction::ZERO, &v).is_zero());

        let mode = ModeMapping::new(
            ActionDirection::MoveForward,
            ActionDirection::CloseGripper,
            ActionDirection::YawLeft,
            ActionDirection::MoveRight,
        )
        .unwrap();
        let a = apply_mode(&mode, &UserAction::new(-0.5, -1.0), &v);
        assert_eq!(
            a,
            RobotAction {
                dyaw: 1.5,
                dgripper: -0.1,
                ..Default::default()
            }
        );
    }

    #[test]
    fn empty_lateral_slots_produce_no_motion() {
        let mode =
            ModeMapping::longitudinal_only(ActionDirection::OpenGripper, ActionDirection::CloseGripper)
                .unwrap();
        let a = apply_mode(&mode, &UserAction::new(1.0, 0.0), &VelocityProfile::default());
        assert!(a.is_zero());
    }

    #[test]
    fn set_rejects_out_of_group_direction() {
        let mut m = ModeMapping::default();
        assert!(m.set(DirectionGroup::Left, ActionDirection::PitchUp).is_err());
        assert_eq!(m, ModeMapping::default());
    }

    #[test]
    fn cycle_order_and_distance() {
        let mut m = ModeMapping::default();
        m.set(DirectionGroup::Up, ActionDirection::OpenGripper).unwrap();
        assert_eq!(m.cycle(DirectionGroup::Up), ActionDirection::MoveForward);
        assert_eq!(m.cycle(DirectionGroup::Up), ActionDirection::MoveUp);
        assert_eq!(m.cycle(DirectionGroup::Up), ActionDirection::PitchUp);
        assert_eq!(
            cycle_distance(Some(ActionDirection::OpenGripper), ActionDirection::PitchUp),
            3
        );
        assert_eq!(cycle_distance(Some(ActionDirection::YawLeft), ActionDirection::MoveLeft), 1);
        assert_eq!(cycle_distance(Some(ActionDirection::MoveLeft), ActionDirection::MoveLeft), 0);
    }

    #[test]
    fn mapping_serde_validates_slots() {
        let m = ModeMapping::default();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ModeMapping>(&json).unwrap(), m);
        let bad = r#"{"up":"yaw_left","down":null,"left":null,"right":null}"#;
        assert!(serde_json::from_str::<ModeMapping>(bad).is_err());
    }

    #[test]
    fn angle_helpers() {
        assert_eq!(wrap_degrees(-15.0), 345.0);
        assert_eq!(wrap_degrees(360.0), 0.0);
        assert_eq!(wrap_degrees(-1e-20), 0.0);
        assert_eq!(angle_diff(10.0, 350.0), 20.0);
        assert_eq!(angle_diff(350.0, 10.0), -20.0);
        assert_eq!(angle_diff(180.0, 0.0), 180.0);
    }

    fn any_mapping() -> impl Strategy<Value = ModeMapping> {
        (0..4usize, 0..4usize, 0..3usize, 0..3usize).prop_map(|(u, d, l, r)| {
            ModeMapping::new(
                DirectionGroup::Up.members()[u],
                DirectionGroup::Down.members()[d],
                DirectionGroup::Left.members()[l],
                DirectionGroup::Right.members()[r],
            )
            .unwrap()
        })
    }

    /// Mappings whose opposite slots hold opposite directions (same letter).
    fn paired_mapping() -> impl Strategy<Value = ModeMapping> {
        (0..4usize, 0..3usize).prop_map(|(l, t)| {
            ModeMapping::new(
                DirectionGroup::Up.members()[l],
                DirectionGroup::Down.members()[l],
                DirectionGroup::Left.members()[t],
                DirectionGroup::Right.members()[t],
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn at_most_two_components_and_only_engaged_ones(
            m in any_mapping(), lat in -1.0f64..=1.0, lon in -1.0f64..=1.0
        ) {
            let input = UserAction::new(lat, lon);
            let a = apply_mode(&m, &input, &VelocityProfile::default());
            let nz = a.nonzero_components();
            prop_assert!(nz.len() <= 2);
            let allowed: Vec<Component> = engaged_directions(&m, &input)
                .into_iter().map(|(_, d, _)| d.effect().0).collect();
            for c in nz { prop_assert!(allowed.contains(&c)); }
        }

        #[test]
        fn output_is_proportional_to_deflection(
            m in any_mapping(), lat in -1.0f64..=1.0, lon in -1.0f64..=1.0, c in 0.001f64..=1.0
        ) {
            let v = VelocityProfile::default();
            let full = apply_mode(&m, &UserAction::new(lat, lon), &v);
            let part = apply_mode(&m, &UserAction::new(lat * c, lon * c), &v);
            for comp in Component::ALL {
                let expected = full.get(comp) * c;
                prop_assert!((part.get(comp) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }

        #[test]
        fn opposite_inputs_cancel_on_paired_mappings(
            m in paired_mapping(), lat in -1.0f64..=1.0, lon in -1.0f64..=1.0
        ) {
            let v = VelocityProfile::default();
            let a = apply_mode(&m, &UserAction::new(lat, lon), &v);
            let b = apply_mode(&m, &UserAction::new(-lat, -lon), &v);
            for comp in Component::ALL {
                prop_assert_eq!(a.get(comp) + b.get(comp), 0.0);
            }
        }
    }
}
