//! GUI action space: typed actions `(u, z)`, the coordinate / non-coordinate
//! partition, and the `<action>{json}</action>` wire format.
//!
//! Coordinates on the wire are raw pixels measured from the left and top
//! edges of the screen. Normalization happens in [`crate::geometry`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

const OPEN_TAG: &str = "<action>";
const CLOSE_TAG: &str = "</action>";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ActionError {
    /// Missing or malformed `<action>` wrapper, or the body is not a JSON object.
    #[error("format error: {0}")]
    Format(String),
    /// The JSON is well formed but the payload does not match the action type.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown action type `{0}`")]
    UnknownActionType(String),
}

/// Action type tag `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionType {
    Key,
    Click,
    LongPress,
    Swipe,
    TypeText,
    Answer,
    SystemButton,
    Open,
    Wait,
    Terminate,
    Hover,
    Select,
    Scroll,
}

impl ActionType {
    pub const ALL: [ActionType; 13] = [
        ActionType::Key,
        ActionType::Click,
        ActionType::LongPress,
        ActionType::Swipe,
        ActionType::TypeText,
        ActionType::Answer,
        ActionType::SystemButton,
        ActionType::Open,
        ActionType::Wait,
        ActionType::Terminate,
        ActionType::Hover,
        ActionType::Select,
        ActionType::Scroll,
    ];

    /// Wire name.
    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Key => "key",
            ActionType::Click => "click",
            ActionType::LongPress => "long_press",
            ActionType::Swipe => "swipe",
            ActionType::TypeText => "type",
            ActionType::Answer => "answer",
            ActionType::SystemButton => "system_button",
            ActionType::Open => "open",
            ActionType::Wait => "wait",
            ActionType::Terminate => "terminate",
            ActionType::Hover => "hover",
            ActionType::Select => "select",
            ActionType::Scroll => "scroll",
        }
    }

    fn schema(self) -> Schema {
        use Field::*;
        let (required, optional): (&[Field], &[Field]) = match self {
            ActionType::Key | ActionType::TypeText | ActionType::Answer | ActionType::Open => (&[Text], &[]),
            ActionType::Click | ActionType::Hover => (&[Coordinate], &[]),
            ActionType::LongPress => (&[Coordinate], &[Time]),
            ActionType::Swipe | ActionType::Scroll => (&[Coordinate, Coordinate2], &[]),
            ActionType::SystemButton => (&[Button], &[]),
            ActionType::Wait => (&[Time], &[]),
            ActionType::Terminate => (&[Status], &[]),
            ActionType::Select => (&[Coordinate], &[Text]),
        };
        Schema { required, optional }
    }

    /// Whether the wire schema demands a coordinate for this type.
    pub fn carries_coordinate(self) -> bool {
        self.schema().required.contains(&Field::Coordinate)
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ActionError::UnknownActionType(s.to_string()))
    }
}

impl Serialize for ActionType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ActionType {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Coordinate,
    Coordinate2,
    Text,
    Time,
    Button,
    Status,
}

impl Field {
    const ALL: [Field; 6] = [
        Field::Coordinate,
        Field::Coordinate2,
        Field::Text,
        Field::Time,
        Field::Button,
        Field::Status,
    ];

    fn key(self) -> &'static str {
        match self {
            Field::Coordinate => "coordinate",
            Field::Coordinate2 => "coordinate2",
            Field::Text => "text",
            Field::Time => "time",
            Field::Button => "button",
            Field::Status => "status",
        }
    }
}

struct Schema {
    required: &'static [Field],
    optional: &'static [Field],
}

/// Raw pixel position as it appears on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for PixelPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<PixelPoint> for [f64; 2] {
    fn from(p: PixelPoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Button {
    Back,
    Home,
    Menu,
    Enter,
}

impl Button {
    pub const ALL: [Button; 4] = [Button::Back, Button::Home, Button::Menu, Button::Enter];

    fn as_str(self) -> &'static str {
        match self {
            Button::Back => "Back",
            Button::Home => "Home",
            Button::Menu => "Menu",
            Button::Enter => "Enter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Failure,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Failure => "failure",
        }
    }
}

/// A GUI action: type tag plus the auxiliary payload the tag demands.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub action_type: ActionType,
    pub coordinate: Option<PixelPoint>,
    pub coordinate2: Option<PixelPoint>,
    pub text: Option<String>,
    pub time_s: Option<f64>,
    pub button: Option<Button>,
    pub status: Option<Status>,
}

impl Action {
    /// An action with no payload; only useful as a starting point for builders.
    fn bare(action_type: ActionType) -> Self {
        Self {
            action_type,
            coordinate: None,
            coordinate2: None,
            text: None,
            time_s: None,
            button: None,
            status: None,
        }
    }

    pub fn click(x: f64, y: f64) -> Self {
        Self::pointed(ActionType::Click, x, y)
    }

    /// Single-coordinate action of the given type (click, hover, long_press, select).
    pub fn pointed(action_type: ActionType, x: f64, y: f64) -> Self {
        Self {
            coordinate: Some(PixelPoint::new(x, y)),
            ..Self::bare(action_type)
        }
    }

    pub fn swipe(from: PixelPoint, to: PixelPoint) -> Self {
        Self::dragged(ActionType::Swipe, from, to)
    }

    pub fn scroll(from: PixelPoint, to: PixelPoint) -> Self {
        Self::dragged(ActionType::Scroll, from, to)
    }

    fn dragged(action_type: ActionType, from: PixelPoint, to: PixelPoint) -> Self {
        Self {
            coordinate: Some(from),
            coordinate2: Some(to),
            ..Self::bare(action_type)
        }
    }

    /// Text-payload action (type, key, answer, open).
    pub fn with_text(action_type: ActionType, text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::bare(action_type)
        }
    }

    pub fn wait(seconds: f64) -> Self {
        Self {
            time_s: Some(seconds),
            ..Self::bare(ActionType::Wait)
        }
    }

    pub fn system_button(button: Button) -> Self {
        Self {
            button: Some(button),
            ..Self::bare(ActionType::SystemButton)
        }
    }

    pub fn terminate(status: Status) -> Self {
        Self {
            status: Some(status),
            ..Self::bare(ActionType::Terminate)
        }
    }

    fn has(&self, field: Field) -> bool {
        match field {
            Field::Coordinate => self.coordinate.is_some(),
            Field::Coordinate2 => self.coordinate2.is_some(),
            Field::Text => self.text.is_some(),
            Field::Time => self.time_s.is_some(),
            Field::Button => self.button.is_some(),
            Field::Status => self.status.is_some(),
        }
    }

    /// Checks that exactly the payload fields demanded by the type are present.
    pub fn validate(&self) -> Result<(), ActionError> {
        let schema = self.action_type.schema();
        for field in Field::ALL {
            let required = schema.required.contains(&field);
            let allowed = required || schema.optional.contains(&field);
            if required && !self.has(field) {
                return Err(ActionError::Schema(format!(
                    "`{}` requires `{}`",
                    self.action_type,
                    field.key()
                )));
            }
            if !allowed && self.has(field) {
                return Err(ActionError::Schema(format!(
                    "`{}` does not take `{}`",
                    self.action_type,
                    field.key()
                )));
            }
        }
        for p in [self.coordinate, self.coordinate2].into_iter().flatten() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(ActionError::Schema("coordinates must be finite".into()));
            }
        }
        if let Some(t) = self.time_s {
            if !t.is_finite() || t < 0.0 {
                return Err(ActionError::Schema(format!("time must be nonnegative, got {t}")));
            }
        }
        Ok(())
    }

    /// Every coordinate carried on the wire, in order.
    pub fn points(&self) -> impl Iterator<Item = PixelPoint> {
        [self.coordinate, self.coordinate2].into_iter().flatten()
    }

    /// JSON object body, keys in fixed order.
    pub fn to_json(&self) -> String {
        let mut out = String::with_capacity(64);
        out.push('{');
        push_key(&mut out, "action");
        push_str(&mut out, self.action_type.as_str());
        if let Some(p) = self.coordinate {
            push_point(&mut out, "coordinate", p);
        }
        if let Some(p) = self.coordinate2 {
            push_point(&mut out, "coordinate2", p);
        }
        if let Some(text) = &self.text {
            out.push(',');
            push_key(&mut out, "text");
            push_str(&mut out, text);
        }
        if let Some(t) = self.time_s {
            out.push(',');
            push_key(&mut out, "time");
            push_number(&mut out, t);
        }
        if let Some(b) = self.button {
            out.push(',');
            push_key(&mut out, "button");
            push_str(&mut out, b.as_str());
        }
        if let Some(s) = self.status {
            out.push(',');
            push_key(&mut out, "status");
            push_str(&mut out, s.as_str());
        }
        out.push('}');
        out
    }

    /// Decodes the JSON object body (without the `<action>` wrapper).
    pub fn from_json(body: &str) -> Result<Self, ActionError> {
        let value: Value = serde_json::from_str(body).map_err(|e| ActionError::Format(format!("invalid JSON: {e}")))?;
        Self::from_json_value(&value)
    }

    pub fn from_json_value(value: &Value) -> Result<Self, ActionError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ActionError::Format("action body must be a JSON object".into()))?;
        decode_object(obj)
    }
}

fn decode_object(obj: &Map<String, Value>) -> Result<Action, ActionError> {
    let tag = obj
        .get("action")
        .ok_or_else(|| ActionError::Format("missing key `action`".into()))?
        .as_str()
        .ok_or_else(|| ActionError::Schema("`action` must be a string".into()))?;
    let mut action = Action::bare(tag.parse()?);
    for (key, value) in obj {
        match key.as_str() {
            "action" => {}
            "coordinate" => action.coordinate = Some(decode_point(key, value)?),
            "coordinate2" => action.coordinate2 = Some(decode_point(key, value)?),
            "text" => action.text = Some(decode_str(key, value)?.to_string()),
            "time" => {
                action.time_s = Some(
                    value
                        .as_f64()
                        .ok_or_else(|| ActionError::Schema("`time` must be a number".into()))?,
                )
            }
            "button" => {
                let s = decode_str(key, value)?;
                action.button = Some(
                    Button::ALL
                        .into_iter()
                        .find(|b| b.as_str() == s)
                        .ok_or_else(|| ActionError::Schema(format!("unknown button `{s}`")))?,
                );
            }
            "status" => {
                action.status = Some(match decode_str(key, value)? {
                    "success" => Status::Success,
                    "failure" => Status::Failure,
                    other => return Err(ActionError::Schema(format!("unknown status `{other}`"))),
                })
            }
            other => return Err(ActionError::Schema(format!("unexpected key `{other}`"))),
        }
    }
    action.validate()?;
    Ok(action)
}

fn decode_str<'a>(key: &str, value: &'a Value) -> Result<&'a str, ActionError> {
    value
        .as_str()
        .ok_or_else(|| ActionError::Schema(format!("`{key}` must be a string")))
}

fn decode_point(key: &str, value: &Value) -> Result<PixelPoint, ActionError> {
    let bad = || ActionError::Schema(format!("`{key}` must be an [x, y] pair of numbers"));
    let arr = value.as_array().ok_or_else(bad)?;
    if arr.len() != 2 {
        return Err(bad());
    }
    let x = arr[0].as_f64().ok_or_else(bad)?;
    let y = arr[1].as_f64().ok_or_else(bad)?;
    Ok(PixelPoint::new(x, y))
}

fn push_key(out: &mut String, key: &str) {
    push_str(out, key);
    out.push(':');
}

// `<` is escaped so payload text can never be mistaken for a tag.
fn push_str(out: &mut String, s: &str) {
    let json = serde_json::to_string(s).expect("string serialization is infallible");
    out.push_str(&json.replace('<', "\\u003c"));
}

fn push_point(out: &mut String, key: &str, p: PixelPoint) {
    out.push(',');
    push_key(out, key);
    out.push('[');
    push_number(out, p.x);
    out.push(',');
    push_number(out, p.y);
    out.push(']');
}

/// Integral values print without a fractional part; everything else uses the
/// shortest representation that round-trips.
fn push_number(out: &mut String, v: f64) {
    use fmt::Write;
    if v.fract() == 0.0 && v.abs() < 9.007_199_254_740_992e15 {
        let _ = write!(out, "{}", v as i64);
    } else {
        let _ = write!(out, "{v}");
    }
}

/// Parses a model response holding exactly one `<action>…</action>` block.
pub fn parse_action(text: &str) -> Result<Action, ActionError> {
    let start = text
        .find(OPEN_TAG)
        .ok_or_else(|| ActionError::Format("missing <action> tag".into()))?;
    let body_start = start + OPEN_TAG.len();
    let rel_end = text[body_start..]
        .find(CLOSE_TAG)
        .ok_or_else(|| ActionError::Format("missing </action> tag".into()))?;
    let body_end = body_start + rel_end;
    let rest = &text[body_end + CLOSE_TAG.len()..];
    if rest.contains(OPEN_TAG) || text[body_start..body_end].contains(OPEN_TAG) {
        return Err(ActionError::Format("more than one <action> block".into()));
    }
    if rest.contains(CLOSE_TAG) {
        return Err(ActionError::Format("unbalanced </action> tag".into()));
    }
    Action::from_json(text[body_start..body_end].trim())
}

/// Inverse of [`parse_action`].
pub fn emit_action(action: &Action) -> String {
    format!("{OPEN_TAG}{}{CLOSE_TAG}", action.to_json())
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let value: Value = serde_json::from_str(&self.to_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Action::from_json_value(&value).map_err(serde::de::Error::custom)
    }
}

/// Coordinate-related (`WC`) or non-coordinate (`NC`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionClass {
    #[serde(rename = "WC")]
    Wc,
    #[serde(rename = "NC")]
    Nc,
}

/// Per-dataset partition of action types into coordinate and non-coordinate sets.
///
/// `aliases` maps a tag onto the canonical tag it is treated as (the prompt's
/// `swipe` is this crate's `scroll` for the Android presets).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionTaxonomy {
    pub name: String,
    pub wc: BTreeSet<ActionType>,
    pub nc: BTreeSet<ActionType>,
    #[serde(default)]
    pub aliases: BTreeMap<ActionType, ActionType>,
}

pub const PRESETS: [&str; 4] = ["android_control", "gui_odyssey", "aitw", "mind2web"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("unknown taxonomy preset `{0}`")]
    UnknownPreset(String),
    #[error("taxonomy `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

impl ActionTaxonomy {
    pub fn new(
        name: impl Into<String>,
        wc: impl IntoIterator<Item = ActionType>,
        nc: impl IntoIterator<Item = ActionType>,
        aliases: impl IntoIterator<Item = (ActionType, ActionType)>,
    ) -> Result<Self, TaxonomyError> {
        let tax = Self {
            name: name.into(),
            wc: wc.into_iter().collect(),
            nc: nc.into_iter().collect(),
            aliases: aliases.into_iter().collect(),
        };
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let invalid = |reason: String| TaxonomyError::Invalid {
            name: self.name.clone(),
            reason,
        };
        if let Some(t) = self.wc.intersection(&self.nc).next() {
            return Err(invalid(format!("`{t}` is both WC and NC")));
        }
        for (from, to) in &self.aliases {
            if self.wc.contains(from) || self.nc.contains(from) {
                return Err(invalid(format!("alias source `{from}` is itself a member")));
            }
            if !self.wc.contains(to) && !self.nc.contains(to) {
                return Err(invalid(format!("alias target `{to}` is not a member")));
            }
        }
        Ok(())
    }

    /// Built-in presets for Android Control, GUI-Odyssey, AITW and Mind2Web.
    pub fn preset(name: &str) -> Result<Self, TaxonomyError> {
        use ActionType::*;
        let android_alias = [(Swipe, Scroll)];
        let tax = match name {
            "android_control" => Self::new(
                name,
                [Click, LongPress, Scroll],
                [TypeText, SystemButton, Open, Wait],
                android_alias,
            ),
            "gui_odyssey" => Self::new(
                name,
                [Click, LongPress, Scroll],
                [TypeText, SystemButton, Terminate],
                android_alias,
            ),
            "aitw" => Self::new(
                name,
                [Click, Scroll],
                [TypeText, SystemButton, Terminate],
                android_alias,
            ),
            "mind2web" => Self::new(name, [Click, Hover, SystemButton, TypeText, Select], [], []),
            other => return Err(TaxonomyError::UnknownPreset(other.to_string())),
        };
        Ok(tax.expect("built-in presets are valid"))
    }

    pub fn canonical(&self, t: ActionType) -> ActionType {
        self.aliases.get(&t).copied().unwrap_or(t)
    }

    pub fn contains(&self, t: ActionType) -> bool {
        let c = self.canonical(t);
        self.wc.contains(&c) || self.nc.contains(&c)
    }

    pub fn classify_type(&self, t: ActionType) -> Result<ActionClass, ActionError> {
        let c = self.canonical(t);
        if self.wc.contains(&c) {
            Ok(ActionClass::Wc)
        } else if self.nc.contains(&c) {
            Ok(ActionClass::Nc)
        } else {
            Err(ActionError::UnknownActionType(format!(
                "{t} (not in taxonomy `{}`)",
                self.name
            )))
        }
    }

    pub fn classify(&self, action: &Action) -> Result<ActionClass, ActionError> {
        self.classify_type(action.action_type)
    }

    /// Type equality after aliasing.
    pub fn same_type(&self, a: ActionType, b: ActionType) -> bool {
        self.canonical(a) == self.canonical(b)
    }

    /// Canonical member tags, WC first, each set in tag order.
    pub fn tags(&self) -> Vec<ActionType> {
        self.wc.iter().chain(self.nc.iter()).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ac() -> ActionTaxonomy {
        ActionTaxonomy::preset("android_control").unwrap()
    }

    #[test]
    fn classify_reference_examples() {
        let tax = ac();
        assert_eq!(tax.classify(&Action::click(1.0, 2.0)).unwrap(), ActionClass::Wc);
        assert_eq!(tax.classify(&Action::wait(1.0)).unwrap(), ActionClass::Nc);
        let scroll = Action::scroll(PixelPoint::new(0.0, 0.0), PixelPoint::new(0.0, 5.0));
        assert_eq!(tax.classify(&scroll).unwrap(), ActionClass::Wc);
        let swipe = Action::swipe(PixelPoint::new(0.0, 0.0), PixelPoint::new(0.0, 5.0));
        assert_eq!(tax.classify(&swipe).unwrap(), ActionClass::Wc);
    }

    #[test]
    fn classify_outside_taxonomy_is_an_error() {
        let err = ac()
            .classify(&Action::pointed(ActionType::Hover, 1.0, 1.0))
            .unwrap_err();
        assert!(matches!(err, ActionError::UnknownActionType(_)));
    }

    #[test]
    fn presets_are_partitions() {
        for name in PRESETS {
            let tax = ActionTaxonomy::preset(name).unwrap();
            assert!(tax.wc.is_disjoint(&tax.nc));
            for t in tax.tags() {
                assert!(tax.classify_type(t).is_ok());
            }
        }
        assert!(ActionTaxonomy::preset("mind2web").unwrap().nc.is_empty());
        assert!(ActionTaxonomy::preset("nope").is_err());
    }

    #[test]
    fn overlapping_taxonomy_rejected() {
        let err = ActionTaxonomy::new("x", [ActionType::Click], [ActionType::Click], []).unwrap_err();
        assert!(matches!(err, TaxonomyError::Invalid { .. }));
    }

    #[test]
    fn parse_click() {
        let a = parse_action(r#"<action>{"action":"click","coordinate":[100,200]}</action>"#).unwrap();
        assert_eq!(a, Action::click(100.0, 200.0));
    }

    #[test]
    fn parse_terminate() {
        let a = parse_action(r#"<action>{"action":"terminate","status":"success"}</action>"#).unwrap();
        assert_eq!(a, Action::terminate(Status::Success));
    }

    #[test]
    fn parse_tolerates_whitespace_and_surrounding_text() {
        let raw = "thinking...\n<action>\n{\"action\": \"wait\", \"time\": 2}\n</action>\n";
        assert_eq!(parse_action(raw).unwrap(), Action::wait(2.0));
    }

    #[test]
    fn parse_format_errors() {
        for raw in [
            "click at (100,200)",
            r#"<action>{"action":"click","coordinate":[1,2]}"#,
            r#"<action>{"action":"click",</action>"#,
            r#"<action>[1,2]</action>"#,
            r#"<action>{"coordinate":[1,2]}</action>"#,
            r#"<action>{"action":"wait","time":1}</action><action>{"action":"wait","time":1}</action>"#,
        ] {
            assert!(matches!(parse_action(raw), Err(ActionError::Format(_))), "{raw}");
        }
    }

    #[test]
    fn parse_schema_errors() {
        for raw in [
            r#"<action>{"action":"click"}</action>"#,
            r#"<action>{"action":"click","coordinate":[1,2],"text":"x"}</action>"#,
            r#"<action>{"action":"swipe","coordinate":[1,2]}</action>"#,
            r#"<action>{"action":"wait","time":-1}</action>"#,
            r#"<action>{"action":"system_button","button":"Recent"}</action>"#,
            r#"<action>{"action":"click","coordinate":"100,200"}</action>"#,
            r#"<action>{"action":"click","coordinate":[1,2],"extra":1}</action>"#,
        ] {
            assert!(matches!(parse_action(raw), Err(ActionError::Schema(_))), "{raw}");
        }
        assert!(matches!(
            parse_action(r#"<action>{"action":"fly"}</action>"#),
            Err(ActionError::UnknownActionType(_))
        ));
    }

    #[test]
    fn emit_golden() {
        assert_eq!(
            emit_action(&Action::wait(2.0)),
            r#"<action>{"action":"wait","time":2}</action>"#
        );
        assert_eq!(
            emit_action(&Action::with_text(ActionType::Open, "Maps")),
            r#"<action>{"action":"open","text":"Maps"}</action>"#
        );
        assert_eq!(
            emit_action(&Action::click(100.5, 200.0)),
            r#"<action>{"action":"click","coordinate":[100.5,200]}</action>"#
        );
    }

    #[test]
    fn emit_swipe_round_trips() {
        let a = Action::swipe(PixelPoint::new(10.0, 20.0), PixelPoint::new(30.0, 40.0));
        assert_eq!(parse_action(&emit_action(&a)).unwrap(), a);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![(-5000i32..5000).prop_map(f64::from), -5000.0f64..5000.0]
    }

    fn point() -> impl Strategy<Value = PixelPoint> {
        (finite(), finite()).prop_map(|(x, y)| PixelPoint::new(x, y))
    }

    fn valid_action() -> impl Strategy<Value = Action> {
        let text = "\\PC{0,12}";
        prop_oneof![
            (point()).prop_map(|p| Action::pointed(ActionType::Click, p.x, p.y)),
            (point()).prop_map(|p| Action::pointed(ActionType::Hover, p.x, p.y)),
            (point(), proptest::option::of(0.0f64..10.0)).prop_map(|(p, t)| Action {
                time_s: t,
                ..Action::pointed(ActionType::LongPress, p.x, p.y)
            }),
            (point(), proptest::option::of(text)).prop_map(|(p, t)| Action {
                text: t,
                ..Action::pointed(ActionType::Select, p.x, p.y)
            }),
            (point(), point()).prop_map(|(a, b)| Action::swipe(a, b)),
            (point(), point()).prop_map(|(a, b)| Action::scroll(a, b)),
            (text).prop_map(|t| Action::with_text(ActionType::TypeText, t)),
            (text).prop_map(|t| Action::with_text(ActionType::Key, t)),
            (text).prop_map(|t| Action::with_text(ActionType::Answer, t)),
            (text).prop_map(|t| Action::with_text(ActionType::Open, t)),
            (0.0f64..100.0).prop_map(Action::wait),
            proptest::sample::select(Button::ALL.to_vec()).prop_map(Action::system_button),
            proptest::bool::ANY.prop_map(|s| Action::terminate(if s { Status::Success } else { Status::Failure })),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(a in valid_action()) {
            prop_assert_eq!(parse_action(&emit_action(&a)).unwrap(), a);
        }

        #[test]
        fn parser_never_panics(s in "\\PC{0,64}") {
            let _ = parse_action(&s);
            let wrapped = format!("<action>{s}</action>");
            let _ = parse_action(&wrapped);
        }

        #[test]
        fn classify_is_total_on_members(i in 0usize..4, j in 0usize..13) {
            let tax = ActionTaxonomy::preset(PRESETS[i]).unwrap();
            let t = ActionType::ALL[j];
            let first = tax.classify_type(t);
            prop_assert_eq!(first.is_ok(), tax.contains(t));
            prop_assert_eq!(first, tax.classify_type(t));
        }
    }
}
