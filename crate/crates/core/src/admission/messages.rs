//! Wire schema of the middleware-to-CNM exchange.

use serde::{Deserialize, Serialize};

use super::{AdmissionError, Decision, FlowSpec, NetworkState, RejectReason};
use crate::calculus::TokenBucket;
use crate::nwtt::NwttRule;
use crate::topology::NodeId;

pub const RESPONSE_SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    RESPONSE_SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRequest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "rate_Bps")]
    pub rate_bps: u64,
    #[serde(rename = "burst_B")]
    pub burst_bytes: u64,
    #[serde(rename = "max_pkt_B")]
    pub max_pkt_bytes: u64,
    pub deadline_us: u64,
    #[serde(default)]
    pub dejitter: bool,
}

impl From<FlowRequest> for FlowSpec {
    fn from(r: FlowRequest) -> Self {
        Self {
            flow_id: r.flow_id,
            src: r.src,
            dst: r.dst,
            rate_bps: r.rate_bps,
            burst_bytes: r.burst_bytes,
            max_pkt_bytes: r.max_pkt_bytes,
            deadline_us: r.deadline_us,
            dejitter: r.dejitter,
        }
    }
}

/// Mapping and policer a fixed end host installs for one flow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostConfig {
    pub host: NodeId,
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
    pub vlan_id: u16,
    pub pcp: u8,
    pub policer: TokenBucket,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "device", rename_all = "snake_case")]
pub enum DeviceConfig {
    Host(HostConfig),
    Nwtt(NwttRule),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowResponse {
    pub schema_version: u32,
    pub flow_id: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlan_id: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcp: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e2e_bound_us: Option<u64>,
    pub reconfigured: Vec<String>,
    /// Configurations for the new flow and for every reconfigured one.
    pub configs: Vec<DeviceConfig>,
}

impl NetworkState {
    pub fn handle_flow_request(&mut self, request: &str) -> Result<FlowResponse, AdmissionError> {
        let req: FlowRequest = serde_json::from_str(request)
            .map_err(|e| AdmissionError::MalformedRequest(e.to_string()))?;
        if req.schema_version != RESPONSE_SCHEMA_VERSION {
            return Err(AdmissionError::MalformedRequest(format!(
                "unsupported schema_version {}",
                req.schema_version
            )));
        }
        Ok(self.respond(req.into()))
    }

    /// Runs `register_flow` and wraps the decision as a response message.
    pub fn respond(&mut self, spec: FlowSpec) -> FlowResponse {
        let flow_id = spec.flow_id.clone();
        match self.register_flow(spec) {
            Decision::Accept {
                assignment,
                reconfigured,
            } => {
                let configs = std::iter::once(&flow_id)
                    .chain(&reconfigured)
                    .filter_map(|id| self.device_config(id).ok())
                    .collect();
                FlowResponse {
                    schema_version: RESPONSE_SCHEMA_VERSION,
                    flow_id,
                    accepted: true,
                    reason: None,
                    detail: None,
                    vlan_id: Some(assignment.vlan_id),
                    pcp: Some(assignment.priority_class),
                    e2e_bound_us: Some(assignment.e2e_bound_us),
                    reconfigured,
                    configs,
                }
            }
            Decision::Reject(r) => FlowResponse {
                schema_version: RESPONSE_SCHEMA_VERSION,
                flow_id,
                accepted: false,
                reason: Some(r.reason),
                detail: Some(r.detail),
                vlan_id: None,
                pcp: None,
                e2e_bound_us: None,
                reconfigured: Vec::new(),
                configs: Vec::new(),
            },
        }
    }
}
