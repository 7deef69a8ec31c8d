//! Typed action space, the constraint function, projection, and the wire format.

pub mod projection;
pub mod schema;
pub mod validate;
pub mod wire;

pub use projection::{
    project_distribution, project_with, ActionDistribution, ProjectionError, WeightedCall,
};
pub use schema::{CallId, ParamKind, ParamSpec, Pattern, SchemaError, ToolCall, ToolSchema};
pub use validate::{
    validate_call, validate_with, Rejection, RejectionStage, ValidationVerdict, Violation,
};
pub use wire::{
    decode_message, encode_message, DecodeError, Framing, MessageId, MessageKind, WireMessage,
};
