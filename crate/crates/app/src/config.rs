//! Service configuration, loaded from a JSON file.

use std::fs;
use std::path::Path;

use anyhow::Context;
use routecoach_core::engine::EngineThresholds;
use routecoach_core::indicators::AdaptationPolicy;
use routecoach_core::privacy::GateMode;
use serde::{Deserialize, Serialize};

/// Static bearer tokens for the two roles. When absent the API is open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthTokens {
    pub trainer_token: String,
    pub user_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Applied to every training session unless the request overrides them.
    pub thresholds: EngineThresholds,
    pub policy: AdaptationPolicy,
    /// Whether the live feed endpoint is served. Remote-supervised sessions
    /// refuse to start without it.
    pub feed_enabled: bool,
    pub cloud_gate: GateMode,
    pub auth: Option<AuthTokens>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            thresholds: EngineThresholds::default(),
            policy: AdaptationPolicy::default(),
            feed_enabled: true,
            cloud_gate: GateMode::Strict,
            auth: None,
        }
    }
}

impl AppConfig {
    /// Reads a config file; missing keys keep their defaults.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
