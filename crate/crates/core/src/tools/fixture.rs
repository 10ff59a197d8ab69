use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::wire::{ArgUpdate, Request, Response};
use super::{derive_tool_schema, ToolError, ToolHost, ToolResult, ToolSchema};
use crate::model::ReturnStatus;

/// Canned tool behaviour: advertised schemas plus one fixed response per function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HostFixture {
    pub schemas: Vec<Value>,
    #[serde(default)]
    pub responses: BTreeMap<String, CannedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedResponse {
    pub status: ReturnStatus,
    #[serde(default)]
    pub msg: String,
    #[serde(default)]
    pub bot: Vec<String>,
    #[serde(default)]
    pub args: Vec<ArgUpdate>,
    #[serde(default)]
    pub notes: String,
}

impl HostFixture {
    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::Spawn(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ToolError::BadSchema(format!("{}: {e}", path.display())))
    }

    /// Answers one request the way a conforming host would.
    pub fn respond(&self, req: &Request) -> Response {
        match self.responses.get(&req.call) {
            Some(c) => Response {
                id: req.id,
                status: c.status,
                msg: c.msg.clone(),
                bot: c.bot.clone(),
                args: c.args.clone(),
                notes: c.notes.clone(),
            },
            None => Response {
                id: req.id,
                status: ReturnStatus::Error,
                msg: format!("unknown function {}", req.call),
                bot: Vec::new(),
                args: Vec::new(),
                notes: String::new(),
            },
        }
    }
}

/// In-process host backed by a [`HostFixture`].
#[derive(Debug, Clone)]
pub struct FixtureHost {
    fixture: HostFixture,
    schemas: Vec<ToolSchema>,
}

impl FixtureHost {
    pub fn new(fixture: HostFixture) -> Result<Self, ToolError> {
        let schemas = fixture
            .schemas
            .iter()
            .map(derive_tool_schema)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { fixture, schemas })
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        Self::new(HostFixture::load(path)?)
    }
}

impl ToolHost for FixtureHost {
    fn schemas(&self) -> &[ToolSchema] {
        &self.schemas
    }

    fn invoke(&self, name: &str, args: Map<String, Value>) -> Result<ToolResult, ToolError> {
        let schema = self
            .schema(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
        schema.check_args(&args)?;
        let req = Request {
            id: 0,
            call: name.to_string(),
            args,
        };
        self.fixture.respond(&req).into_result()
    }
}
