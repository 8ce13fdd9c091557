//! Static device inventory consulted by the simulated inner loop.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ibn_core::pipeline::intent::{singularize, IntentPayload};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub vendors: BTreeSet<String>,
    pub device_types: BTreeSet<String>,
}

/// Outcome of rendering and validating a payload against the inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub success: bool,
    pub reason: Option<String>,
    pub observations: Vec<String>,
}

impl Default for Inventory {
    fn default() -> Self {
        let vendors = [
            "cisco",
            "juniper",
            "arista",
            "huawei",
            "nokia",
            "fortinet",
            "palo alto",
            "extreme networks",
            "ubiquiti",
            "mikrotik",
        ];
        let devices = [
            "router",
            "switch",
            "firewall",
            "server",
            "gateway",
            "access point",
            "load balancer",
            "spine switch",
            "modem",
            "controller",
        ];
        Self {
            vendors: vendors.iter().map(|s| s.to_string()).collect(),
            device_types: devices.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Inventory {
    /// Reads `{"vendors": [...], "device_types": [...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let inv: Inventory = serde_json::from_slice(&data).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            vendors: inv.vendors.iter().map(|v| v.to_lowercase()).collect(),
            device_types: inv.device_types.iter().map(|d| singularize(&d.to_lowercase())).collect(),
        })
    }

    /// Checks every target; the first unknown vendor or device type fails
    /// the activation.
    pub fn activate(&self, payload: &IntentPayload) -> ActivationReport {
        let fail = |reason: String| ActivationReport {
            success: false,
            reason: Some(reason),
            observations: Vec::new(),
        };
        if payload.targets.is_empty() {
            return fail("no targets".into());
        }
        let mut observations = Vec::new();
        for t in &payload.targets {
            if let Some(v) = &t.vendor {
                if !self.vendors.contains(v) {
                    return fail(format!("unknown vendor: {v}"));
                }
            }
            if let Some(d) = &t.device_type {
                if !self.device_types.contains(d) {
                    return fail(format!("unknown device type: {d}"));
                }
            }
            let what = match (&t.vendor, &t.device_type) {
                (Some(v), Some(d)) => format!("{v} {d}"),
                (Some(v), None) => format!("{v} devices"),
                (None, Some(d)) => d.clone(),
                (None, None) => "devices".into(),
            };
            let action = payload.action.map_or("apply", |a| a.as_str());
            observations.push(format!("{action} rendered for {what}; validation passed"));
        }
        ActivationReport {
            success: true,
            reason: None,
            observations,
        }
    }
}
