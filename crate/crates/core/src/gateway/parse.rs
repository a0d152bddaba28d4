//! Parsing of model responses. Never panics: malformed input turns into
//! diagnostics.

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::OnceLock;

use crate::constraints::{validate_plan, ConstraintPlan};
use crate::demos::Interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalParse {
    pub intervals: Vec<Interval>,
    pub valid: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanParse {
    pub plan: Option<ConstraintPlan>,
    pub valid: bool,
    pub violations: Vec<String>,
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```").unwrap())
}

/// Body of the first fenced block tagged `lang` (case-insensitive), falling
/// back to the first untagged block.
pub fn fenced_block<'a>(text: &'a str, lang: &str) -> Option<&'a str> {
    let mut untagged = None;
    for cap in fence_re().captures_iter(text) {
        let tag = cap.get(1).map_or("", |m| m.as_str());
        let body = cap.get(2).map_or("", |m| m.as_str());
        if tag.eq_ignore_ascii_case(lang) {
            return Some(body);
        }
        if tag.is_empty() && untagged.is_none() {
            untagged = Some(body);
        }
    }
    untagged
}

fn invalid(msg: impl Into<String>) -> IntervalParse {
    IntervalParse {
        intervals: Vec::new(),
        valid: false,
        violations: vec![msg.into()],
    }
}

/// Extracts `[{"start": s, "end": e}, ...]` from the first fenced JSON block.
/// A single object is accepted as a one-element list. The result is sorted by
/// start time.
pub fn parse_intervals(text: &str) -> IntervalParse {
    let Some(body) = fenced_block(text, "json") else {
        return invalid("no fenced JSON block in response");
    };
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return invalid(format!("malformed JSON at line {}, column {}: {e}", e.line(), e.column())),
    };
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        other => return invalid(format!("expected a list of intervals, found {}", kind_name(&other))),
    };
    let mut violations = Vec::new();
    let mut intervals = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let get = |key: &str| item.get(key).and_then(Value::as_f64).filter(|v| v.is_finite());
        match (get("start"), get("end")) {
            (Some(start), Some(end)) => {
                if start < 0.0 {
                    violations.push(format!("interval {i}: start must be >= 0, got {start}"));
                }
                if !(start < end) {
                    violations.push(format!("interval {i}: start < end violated ({start} >= {end})"));
                }
                intervals.push(Interval { start, end });
            }
            _ => violations.push(format!("interval {i}: needs numeric \"start\" and \"end\" fields")),
        }
    }
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    for w in intervals.windows(2) {
        if w[1].start < w[0].end {
            violations.push(format!(
                "intervals [{}, {}] and [{}, {}] overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            ));
        }
    }
    IntervalParse {
        valid: violations.is_empty(),
        intervals,
        violations,
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Inverse of [`parse_intervals`]: the fenced list format the prompt asks for.
pub fn render_intervals(intervals: &[Interval]) -> String {
    let mut s = String::from("```json\n[\n");
    for (i, iv) in intervals.iter().enumerate() {
        s.push_str(&format!("{{\"start\": {}, \"end\": {}}}", fmt_num(iv.start), fmt_num(iv.end)));
        s.push_str(if i + 1 < intervals.len() { ",\n" } else { "\n" });
    }
    s.push_str("]\n```\n");
    s
}

/// A constraint-proposal answer for `plan`: the python skeleton the prompt
/// asks for, followed by the machine-readable plan.
pub fn render_plan_response(plan: &ConstraintPlan) -> String {
    let list = |v: &[i64]| v.iter().map(i64::to_string).collect::<Vec<_>>().join(", ");
    let json = crate::jsonfmt::to_string(plan, 2).expect("plan serializes");
    format!(
        "```python\nnum_stages = {}\ngrasp_keypoints = [{}]\nrelease_keypoints = [{}]\n```\n\n```json\n{json}\n```\n",
        plan.num_stages,
        list(&plan.grasp_keypoints),
        list(&plan.release_keypoints)
    )
}

fn skeleton_res() -> &'static [(Regex, &'static str); 3] {
    static RE: OnceLock<[(Regex, &'static str); 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            (Regex::new(r"(?m)^\s*num_stages\s*=\s*(-?\d+)").unwrap(), "num_stages"),
            (
                Regex::new(r"(?m)^\s*grasp_keypoints\s*=\s*\[([^\]]*)\]").unwrap(),
                "grasp_keypoints",
            ),
            (
                Regex::new(r"(?m)^\s*release_keypoints\s*=\s*\[([^\]]*)\]").unwrap(),
                "release_keypoints",
            ),
        ]
    })
}

fn int_list(s: &str) -> Option<Vec<i64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect()
}

/// Parses a constraint-proposal response: a fenced JSON constraint plan,
/// optionally accompanied by a fenced python block whose `num_stages`,
/// `grasp_keypoints` and `release_keypoints` assignments must agree with it.
pub fn parse_constraint_plan(text: &str) -> PlanParse {
    let fail = |msg: String| PlanParse {
        plan: None,
        valid: false,
        violations: vec![msg],
    };
    let Some(body) = fenced_block(text, "json") else {
        return fail("no fenced JSON block in response".into());
    };
    let plan: ConstraintPlan = match serde_json::from_str(body) {
        Ok(p) => p,
        Err(e) => {
            return fail(format!(
                "constraint plan does not parse at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        }
    };
    let mut violations: Vec<String> = validate_plan(&plan).iter().map(ToString::to_string).collect();

    let python = fence_re().captures_iter(text).find_map(|c| {
        let tag = c.get(1).map_or("", |m| m.as_str());
        tag.eq_ignore_ascii_case("python").then(|| c.get(2).map_or("", |m| m.as_str()))
    });
    if let Some(py) = python {
        let [(ns, _), (gk, _), (rk, _)] = skeleton_res();
        if let Some(c) = ns.captures(py) {
            match c[1].parse::<usize>() {
                Ok(n) if n == plan.num_stages => {}
                _ => violations.push(format!(
                    "python skeleton num_stages = {} disagrees with plan ({})",
                    &c[1], plan.num_stages
                )),
            }
        }
        for (re, name, expected) in [
            (gk, "grasp_keypoints", &plan.grasp_keypoints),
            (rk, "release_keypoints", &plan.release_keypoints),
        ] {
            if let Some(c) = re.captures(py) {
                match int_list(&c[1]) {
                    Some(v) if &v == expected => {}
                    Some(v) => violations.push(format!("python skeleton {name} = {v:?} disagrees with plan {expected:?}")),
                    None => violations.push(format!("python skeleton {name} is not a list of integers")),
                }
            }
        }
    }
    PlanParse {
        valid: violations.is_empty(),
        plan: Some(plan),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "```json\n[\n{\"start\": 2, \"end\": 4},\n{\"start\": 7, \"end\": 11}\n]\n```";

    #[test]
    fn sample_parses() {
        let p = parse_intervals(SAMPLE);
        assert!(p.valid, "{:?}", p.violations);
        assert_eq!(p.intervals, vec![Interval { start: 2.0, end: 4.0 }, Interval { start: 7.0, end: 11.0 }]);
    }

    #[test]
    fn edge_cases() {
        let p = parse_intervals("```json\n[]\n```");
        assert!(p.valid && p.intervals.is_empty());
        let p = parse_intervals("```json\n{\"start\": 5, \"end\": 3}\n```");
        assert!(!p.valid);
        assert!(p.violations[0].contains("start < end"));
        let p = parse_intervals("Sure! ```json\n[{\"start\": 7.5, \"end\": 9}, {\"start\": 1, \"end\": 2}]```");
        assert!(p.valid);
        assert_eq!(p.intervals[0].start, 1.0);
        assert!(!parse_intervals("[{\"start\": 1, \"end\": 2}]").valid);
        assert!(!parse_intervals("```json\n[{\"start\": 1, \"end\": 5}, {\"start\": 3, \"end\": 6}]\n```").valid);
        assert!(!parse_intervals("```json\n[{\"start\": 1,\n```").valid);
        assert!(!parse_intervals("```json\n[{\"start\": \"1\", \"end\": 2}]\n```").valid);
        assert!(!parse_intervals("```json\n42\n```").valid);
    }

    #[test]
    fn render_round_trip() {
        let p = parse_intervals(SAMPLE);
        let again = parse_intervals(&render_intervals(&p.intervals));
        assert_eq!(again, p);
        let frac = vec![Interval { start: 0.25, end: 1.5 }];
        assert_eq!(parse_intervals(&render_intervals(&frac)).intervals, frac);
    }

    #[test]
    fn plan_with_skeleton() {
        let json = r#"{"num_stages": 2, "grasp_keypoints": [1, -1], "release_keypoints": [-1, 1],
            "atoms": [
              {"stage": 0, "role": "subgoal", "kind": "point_offset", "i": 0, "j": 1, "offset": [0, 0, 0], "tolerance": 0.01},
              {"stage": 1, "role": "path", "kind": "grasp_maintained", "keypoint": 1}
            ]}"#;
        let good = format!("```python\nnum_stages = 2\ngrasp_keypoints = [1, -1]\nrelease_keypoints = [-1, 1]\n```\n```json\n{json}\n```");
        let p = parse_constraint_plan(&good);
        assert!(p.valid, "{:?}", p.violations);
        let bad = good.replace("num_stages = 2", "num_stages = 3");
        let p = parse_constraint_plan(&bad);
        assert!(!p.valid && p.plan.is_some());
        assert!(!parse_constraint_plan("no code here").valid);
        assert!(!parse_constraint_plan("```json\n{\"num_stages\": 1}\n```").valid);
        let rendered = render_plan_response(p.plan.as_ref().unwrap());
        let again = parse_constraint_plan(&rendered);
        assert!(again.valid, "{:?}", again.violations);
        assert_eq!(again.plan, p.plan);
    }
}
