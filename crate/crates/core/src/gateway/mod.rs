//! Boundary to the vision-language model: prompt rendering, request identity,
//! transports and response parsing.

mod parse;
mod transport;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::ConstraintPlan;
use crate::demos::Interval;

pub use parse::{
    fenced_block, parse_constraint_plan, parse_intervals, render_intervals, render_plan_response, IntervalParse, PlanParse,
};
pub use transport::{HttpTransport, RecordedTransport, Recording, Transport, TransportError, TOKEN_ENV};

const VIDEO_ANALYSIS_TEMPLATE: &str = include_str!("../../assets/prompts/video_analysis.txt");
const CONSTRAINT_TEMPLATE: &str = include_str!("../../assets/prompts/constraint_proposal.txt");
const TASK_FIELD: &str = "{task_description}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    VideoAnalysis,
    ConstraintProposal,
}

impl RequestKind {
    fn as_str(self) -> &'static str {
        match self {
            RequestKind::VideoAnalysis => "video_analysis",
            RequestKind::ConstraintProposal => "constraint_proposal",
        }
    }
}

pub fn render_prompt(kind: RequestKind, task_description: &str) -> String {
    match kind {
        RequestKind::VideoAnalysis => VIDEO_ANALYSIS_TEMPLATE.replace(TASK_FIELD, task_description),
        RequestKind::ConstraintProposal => CONSTRAINT_TEMPLATE.replace(TASK_FIELD, task_description),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub kind: RequestKind,
    pub prompt: String,
    /// Opaque references (video id, annotated image id); content is not sent.
    pub attachments: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("constraint proposals need an image attachment")]
pub struct MissingImage;

impl VlmRequest {
    pub fn video_analysis(task_description: &str, video_id: &str) -> Self {
        VlmRequest {
            kind: RequestKind::VideoAnalysis,
            prompt: render_prompt(RequestKind::VideoAnalysis, task_description),
            attachments: vec![video_id.to_string()],
        }
    }

    pub fn constraint_proposal(task_description: &str, image_id: &str, video_id: Option<&str>) -> Self {
        let mut attachments = vec![image_id.to_string()];
        attachments.extend(video_id.map(str::to_string));
        VlmRequest {
            kind: RequestKind::ConstraintProposal,
            prompt: render_prompt(RequestKind::ConstraintProposal, task_description),
            attachments,
        }
    }

    pub fn validate(&self) -> Result<(), MissingImage> {
        if self.kind == RequestKind::ConstraintProposal && self.attachments.is_empty() {
            return Err(MissingImage);
        }
        Ok(())
    }

    /// Hex SHA-256 over kind, prompt and attachment ids (length-prefixed).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |b: &[u8]| {
            h.update((b.len() as u64).to_le_bytes());
            h.update(b);
        };
        field(self.kind.as_str().as_bytes());
        field(self.prompt.as_bytes());
        for a in &self.attachments {
            field(a.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Parsed {
    Intervals(Vec<Interval>),
    Plan(ConstraintPlan),
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub raw_text: String,
    pub parsed: Parsed,
    pub valid: bool,
    pub violations: Vec<String>,
}

impl VlmResponse {
    pub fn from_text(kind: RequestKind, raw_text: String) -> Self {
        match kind {
            RequestKind::VideoAnalysis => {
                let p = parse_intervals(&raw_text);
                VlmResponse {
                    raw_text,
                    parsed: Parsed::Intervals(p.intervals),
                    valid: p.valid,
                    violations: p.violations,
                }
            }
            RequestKind::ConstraintProposal => {
                let p = parse_constraint_plan(&raw_text);
                VlmResponse {
                    raw_text,
                    parsed: p.plan.map_or(Parsed::Nothing, Parsed::Plan),
                    valid: p.valid,
                    violations: p.violations,
                }
            }
        }
    }

    pub fn intervals(&self) -> Option<&[Interval]> {
        match &self.parsed {
            Parsed::Intervals(v) if self.valid => Some(v),
            _ => None,
        }
    }

    pub fn plan(&self) -> Option<&ConstraintPlan> {
        match &self.parsed {
            Parsed::Plan(p) if self.valid => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error(transparent)]
    Request(#[from] MissingImage),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Resolves `request` through `transport` and parses the answer. Invalid
/// answers come back as a response with `valid == false`, not as an error.
pub fn fetch(request: &VlmRequest, transport: &Transport) -> Result<VlmResponse, FetchError> {
    request.validate()?;
    let text = transport.fetch_text(request)?;
    Ok(VlmResponse::from_text(request.kind, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_the_stored_templates() {
        let v = render_prompt(RequestKind::VideoAnalysis, "square");
        assert!(v.starts_with("Video Analysis:\n"));
        assert!(v.contains("{\"start\": 2, \"end\": 4},\n            {\"start\": 7, \"end\": 11}"));
        let c = render_prompt(RequestKind::ConstraintProposal, "put the nut on the peg");
        assert!(c.contains("\"sub-goal constraints\""));
        assert!(c.contains("Query Task: \"put the nut on the peg\""));
        assert!(!c.contains(TASK_FIELD));
    }

    #[test]
    fn hash_depends_on_every_field() {
        let a = VlmRequest::video_analysis("square", "demo_000");
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.attachments[0] = "demo_001".into();
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.kind = RequestKind::ConstraintProposal;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn recorded_transport_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let t = RecordedTransport::new(dir.path());
        let req = VlmRequest::video_analysis("square", "demo_000");
        let err = fetch(&req, &Transport::Recorded(t.clone())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("recording not found") && msg.contains(&req.hash()), "{msg}");
        t.record(&req, "```json\n[{\"start\": 3, \"end\": 4}]\n```").unwrap();
        let r = fetch(&req, &Transport::Recorded(t)).unwrap();
        assert_eq!(r.intervals().unwrap(), &[Interval { start: 3.0, end: 4.0 }]);
    }

    #[test]
    fn constraint_request_needs_image() {
        let mut req = VlmRequest::constraint_proposal("square", "img", None);
        assert!(req.validate().is_ok());
        req.attachments.clear();
        assert_eq!(req.validate(), Err(MissingImage));
    }

    #[test]
    fn transport_specs() {
        assert!(matches!("recorded:fixtures/x".parse::<Transport>(), Ok(Transport::Recorded(_))));
        match "http:http://127.0.0.1:9/v1".parse::<Transport>() {
            Ok(Transport::Http(h)) => assert_eq!(h.endpoint, "http://127.0.0.1:9/v1"),
            other => panic!("{other:?}"),
        }
        match "http://127.0.0.1:9/v1".parse::<Transport>() {
            Ok(Transport::Http(h)) => assert_eq!(h.endpoint, "http://127.0.0.1:9/v1"),
            other => panic!("{other:?}"),
        }
        assert!("ftp:x".parse::<Transport>().is_err());
        assert!("recorded:".parse::<Transport>().is_err());
    }
}
