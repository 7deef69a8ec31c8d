use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::schema::ToolSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Health {
    Ready,
    /// Registered from the fallback list; calls fail with `endpoint-down`.
    Degraded {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub schema: ToolSchema,
    pub server: String,
    pub health: Health,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("tool '{tool}' is already registered by server '{server}'")]
    DuplicateTool { tool: String, server: String },
    #[error("server '{server}' is unreachable ({reason}); its tools are registered as degraded")]
    UnreachableEndpoint { server: String, reason: String },
    #[error("server '{server}' advertised an unusable tool list: {reason}")]
    BadAdvertisement { server: String, reason: String },
}

/// Tool name to schema, owning server and health.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl ToolRegistry {
    pub fn register_tool(
        &mut self,
        schema: ToolSchema,
        server: &str,
        health: Health,
    ) -> Result<(), RegistryError> {
        if let Some(existing) = self.entries.get(schema.tool_name()) {
            return Err(RegistryError::DuplicateTool {
                tool: schema.tool_name().to_string(),
                server: existing.server.clone(),
            });
        }
        self.entries.insert(
            schema.tool_name().to_string(),
            RegistryEntry {
                schema,
                server: server.to_string(),
                health,
            },
        );
        Ok(())
    }

    pub fn get(&self, tool: &str) -> Option<&RegistryEntry> {
        self.entries.get(tool)
    }

    pub fn schema(&self, tool: &str) -> Option<&ToolSchema> {
        self.entries.get(tool).map(|e| &e.schema)
    }

    pub fn remove(&mut self, tool: &str) -> Option<RegistryEntry> {
        self.entries.remove(tool)
    }

    /// Entries in tool-name order.
    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.entries.values().map(|e| e.schema.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_server_health(&mut self, server: &str, health: Health) {
        for e in self.entries.values_mut().filter(|e| e.server == server) {
            e.health = health.clone();
        }
    }
}
