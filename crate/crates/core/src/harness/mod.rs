//! Scenario files, the virtual-time closed loop, metrics export, the CPU
//! sweep and the property report.

mod metrics;
mod scenario;
mod sim;
mod verify;

pub use metrics::{
    parse_metrics, DeploymentMetrics, MetricsColumns, MetricsRow, MetricsTable, NodeMetrics, BASE_COLUMNS,
    METRICS_SCHEMA_LINE,
};
pub use scenario::{
    bundled, AgentOverride, ControllerSettings, Event, Monitor, Scenario, SystemPods, TimelineEntry, BUNDLED,
    SCENARIO_SCHEMA,
};
pub use sim::{run, ActionRecord, ErrorSample, LogEvent, Migration, MonitorReport, RunOutput};
pub use verify::{sweep_cpu, verify, PropertyResult, PropertyStatus, SweepPoint, VerifyReport};
