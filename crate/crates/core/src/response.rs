//! Response wire format.
//!
//! ```text
//! response = ws "<think>" text "</think>" ws "<answer>" tuples "</answer>" ws
//! text     = { any character } ; must not contain a tag
//! tuples   = ws tuple { ws "," ws tuple } ws
//! tuple    = "(" ws number ws "," ws number ws ")"
//! number   = [ "+" | "-" ] digit { digit } [ "." digit { digit } ]
//! ws       = { " " | "\t" | "\r" | "\n" }
//! tag      = "<think>" | "</think>" | "<answer>" | "</answer>"
//! ```
//!
//! The number of tuples is not constrained here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{Trajectory, Vec2, DEFAULT_DT};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Stage headers of the structured reasoning text, in their expected order.
pub const COT_STAGES: [&str; 4] = [
    "visual analysis",
    "motion modeling",
    "logical deductions",
    "self-reflection validation",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing or malformed <think> block")]
    MissingThink,
    #[error("missing or malformed <answer> block")]
    MissingAnswer,
    #[error("malformed waypoint tuple at index {0}")]
    BadTuple(usize),
    #[error("trailing content after </answer>")]
    TrailingContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub think: String,
    pub answer: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CotStageReport {
    /// Visual analysis, motion modeling, logical deductions, self-reflection.
    pub stage_present: [bool; 4],
    pub ordered: bool,
}

impl CotStageReport {
    pub fn all_present(&self) -> bool {
        self.stage_present.iter().all(|&p| p)
    }
}

fn is_ws(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\r' | '\n')
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start_matches(is_ws);
    }

    fn eat(&mut self, token: &str) -> bool {
        match self.rest.strip_prefix(token) {
            Some(r) => {
                self.rest = r;
                true
            }
            None => false,
        }
    }

    fn eat_char(&mut self, c: char) -> bool {
        match self.rest.strip_prefix(c) {
            Some(r) => {
                self.rest = r;
                true
            }
            None => false,
        }
    }

    fn digits(&mut self) -> usize {
        let n = self.rest.bytes().take_while(u8::is_ascii_digit).count();
        self.rest = &self.rest[n..];
        n
    }

    fn number(&mut self) -> Option<f64> {
        let start = self.rest;
        if !self.eat_char('+') {
            self.eat_char('-');
        }
        if self.digits() == 0 {
            return None;
        }
        if self.eat_char('.') && self.digits() == 0 {
            return None;
        }
        let text = &start[..start.len() - self.rest.len()];
        text.parse::<f64>().ok().filter(|v| v.is_finite())
    }

    fn tuple(&mut self) -> Option<Vec2> {
        if !self.eat_char('(') {
            return None;
        }
        self.skip_ws();
        let x = self.number()?;
        self.skip_ws();
        if !self.eat_char(',') {
            return None;
        }
        self.skip_ws();
        let y = self.number()?;
        self.skip_ws();
        if !self.eat_char(')') {
            return None;
        }
        Some(Vec2::new(x, y))
    }
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// Parses a response, reporting the first grammar violation.
///
/// The returned trajectory uses the default 0.5 s step.
pub fn parse_response(text: &str) -> std::result::Result<ModelResponse, ParseError> {
    let mut cur = Cursor { rest: text };
    cur.skip_ws();
    if !cur.eat(THINK_OPEN) {
        return Err(ParseError::MissingThink);
    }
    let close = cur.rest.find(THINK_CLOSE).ok_or(ParseError::MissingThink)?;
    let think = &cur.rest[..close];
    if contains_tag(think) {
        return Err(ParseError::MissingThink);
    }
    cur.rest = &cur.rest[close + THINK_CLOSE.len()..];
    cur.skip_ws();
    if !cur.eat(ANSWER_OPEN) {
        return Err(ParseError::MissingAnswer);
    }
    let close = cur
        .rest
        .find(ANSWER_CLOSE)
        .ok_or(ParseError::MissingAnswer)?;
    let body = &cur.rest[..close];
    let after = &cur.rest[close + ANSWER_CLOSE.len()..];

    let mut inner = Cursor { rest: body };
    let mut waypoints = Vec::new();
    loop {
        inner.skip_ws();
        let index = waypoints.len();
        waypoints.push(inner.tuple().ok_or(ParseError::BadTuple(index))?);
        inner.skip_ws();
        if inner.rest.is_empty() {
            break;
        }
        if !inner.eat_char(',') {
            return Err(ParseError::BadTuple(index + 1));
        }
    }

    if !after.trim_start_matches(is_ws).is_empty() {
        return Err(ParseError::TrailingContent);
    }
    Ok(ModelResponse {
        think: think.to_string(),
        answer: Trajectory::new(waypoints, DEFAULT_DT),
    })
}

/// 1 if the text parses under the response grammar, else 0.
pub fn format_reward(text: &str) -> f64 {
    if parse_response(text).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Emits `resp` in the response grammar with `decimals` fractional digits.
pub fn serialize_response(resp: &ModelResponse, decimals: usize) -> Result<String> {
    if !(1..=9).contains(&decimals) {
        return Err(Error::InvalidArgument(format!(
            "decimals must be in [1, 9], got {decimals}"
        )));
    }
    if resp.answer.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if !resp.answer.is_finite() {
        return Err(Error::NonFinite("response waypoint"));
    }
    if contains_tag(&resp.think) {
        return Err(Error::InvalidArgument("think text contains a tag".into()));
    }
    let tuples = resp
        .answer
        .waypoints
        .iter()
        .map(|p| format!("({:.*}, {:.*})", decimals, p.x, decimals, p.y))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!(
        "{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}{tuples}{ANSWER_CLOSE}",
        resp.think
    ))
}

/// Scans for the four reasoning-stage headers inside the think block.
///
/// Matching is case-insensitive substring search, so numbered (`1. Visual
/// Analysis`) and markdown (`### Visual Analysis`) headers both count. When no
/// complete think block exists the whole text is scanned.
pub fn validate_cot(text: &str) -> CotStageReport {
    let scope = match (text.find(THINK_OPEN), text.find(THINK_CLOSE)) {
        (Some(open), Some(close)) if close >= open + THINK_OPEN.len() => {
            &text[open + THINK_OPEN.len()..close]
        }
        _ => text,
    };
    let lower = scope.to_lowercase();
    let positions: Vec<Option<usize>> = COT_STAGES.iter().map(|h| lower.find(h)).collect();
    let stage_present = [
        positions[0].is_some(),
        positions[1].is_some(),
        positions[2].is_some(),
        positions[3].is_some(),
    ];
    let ordered = positions
        .iter()
        .copied()
        .collect::<Option<Vec<_>>>()
        .is_some_and(|p| p.windows(2).all(|w| w[0] < w[1]));
    CotStageReport {
        stage_present,
        ordered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_format() {
        let r = parse_response("<think>go straight</think><answer>(0.0, 0.0), (1.0, 0.5)</answer>")
            .unwrap();
        assert_eq!(r.think, "go straight");
        assert_eq!(
            r.answer.waypoints,
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.5)]
        );
    }

    #[test]
    fn reports_first_violation() {
        assert_eq!(
            parse_response("<answer>(1,2)</answer>"),
            Err(ParseError::MissingThink)
        );
        assert_eq!(
            parse_response("<think>t</think><answer>(1, a)</answer>"),
            Err(ParseError::BadTuple(0))
        );
        assert_eq!(
            parse_response("<think>t</think><answer>(1, 2), (3 4)</answer>"),
            Err(ParseError::BadTuple(1))
        );
        assert_eq!(
            parse_response("<think>t</think>"),
            Err(ParseError::MissingAnswer)
        );
        assert_eq!(
            parse_response("<think>t</think><answer>(1,2)</answer>x"),
            Err(ParseError::TrailingContent)
        );
    }

    #[test]
    fn tolerates_whitespace() {
        let r = parse_response(
            "  \n<think>a\nb</think>\n<answer> ( -1.5 ,+2 ) ,\n(3 , 4.25) </answer>\n",
        )
        .unwrap();
        assert_eq!(
            r.answer.waypoints,
            vec![Vec2::new(-1.5, 2.0), Vec2::new(3.0, 4.25)]
        );
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(
            format_reward("<think>go</think><answer>(0.0, 0.0)</answer>"),
            1.0
        );
        assert_eq!(format_reward(""), 0.0);
        assert_eq!(
            format_reward("<think>go</think><answer>(0, 0)</answer><answer>(0, 0)</answer>"),
            0.0
        );
    }

    #[test]
    fn serialize_cases() {
        let r = ModelResponse {
            think: "toy".into(),
            answer: Trajectory::new(vec![Vec2::ZERO], 0.5),
        };
        assert_eq!(
            serialize_response(&r, 2).unwrap(),
            "<think>toy</think><answer>(0.00, 0.00)</answer>"
        );
        let bad = ModelResponse {
            think: "toy".into(),
            answer: Trajectory::new(vec![Vec2::new(f64::NAN, 0.0)], 0.5),
        };
        assert!(serialize_response(&bad, 2).is_err());
        assert!(serialize_response(&r, 0).is_err());
        assert!(serialize_response(&r, 10).is_err());
    }

    #[test]
    fn cot_cases() {
        let full = "<think>1. Visual Analysis: clear\n2. Motion Modeling: a=0\n\
                    3. Logical Deductions: safe\n4. Self-Reflection Validation: ok</think>\
                    <answer>(1,0)</answer>";
        let r = validate_cot(full);
        assert_eq!(r.stage_present, [true; 4]);
        assert!(r.ordered);

        let r = validate_cot("<think></think><answer>(1,0)</answer>");
        assert_eq!(r, CotStageReport::default());

        let shuffled = "<think>### VISUAL ANALYSIS\n### logical deductions\n\
                        ### Motion Modeling\n### Self-Reflection Validation</think>";
        let r = validate_cot(shuffled);
        assert!(r.all_present());
        assert!(!r.ordered);
    }

    #[test]
    fn cot_only_scans_think_block() {
        let text = "<think>Visual Analysis</think><answer>(1,0)</answer> Motion Modeling";
        let r = validate_cot(text);
        assert_eq!(r.stage_present, [true, false, false, false]);
    }

    fn normalize_ws(s: &str) -> String {
        s.split(is_ws)
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    proptest! {
        #[test]
        fn serialized_responses_always_score_one(
            pts in prop::collection::vec((-1e4..1e4f64, -1e4..1e4f64), 1..10),
            decimals in 1usize..=9,
            think in "[a-zA-Z0-9 .,:\n]{0,40}",
        ) {
            let resp = ModelResponse {
                think,
                answer: Trajectory::new(pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect(), 0.5),
            };
            let text = serialize_response(&resp, decimals).unwrap();
            prop_assert_eq!(format_reward(&text), 1.0);
            let back = parse_response(&text).unwrap();
            let tol = 0.5 * 10f64.powi(-(decimals as i32)) + 1e-11;
            for (a, b) in back.answer.waypoints.iter().zip(&resp.answer.waypoints) {
                prop_assert!((a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol);
            }
        }

        #[test]
        fn trailing_content_is_rejected(tail in "[a-z<>/()0-9]{1,10}") {
            let text = format!("<think>t</think><answer>(1, 2)</answer> {tail}");
            prop_assert_eq!(parse_response(&text), Err(ParseError::TrailingContent));
            prop_assert_eq!(format_reward(&text), 0.0);
        }

        #[test]
        fn reward_invariant_under_whitespace_normalization(
            text in "[ \n\t]{0,2}(<think>[a-z \n]{0,8}</think>)?[ \n]{0,2}(<answer>[ \n]?\\([ ]?-?[0-9]{1,3}(\\.[0-9]{1,2})?[ \n]?,[ ]?[0-9]{1,2}[ ]?\\)( ,\n\\([0-9],[0-9]\\))?[ ]?</answer>)?[ \n]{0,2}",
        ) {
            prop_assert_eq!(format_reward(&text), format_reward(&normalize_ws(&text)));
        }
    }
}
