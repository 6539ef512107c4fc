use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::AgentId;

pub const METRICS_SCHEMA_LINE: &str = "# cloudmpc-metrics v1";

/// Fixed leading columns of every metrics file.
pub const BASE_COLUMNS: [&str; 12] = [
    "time",
    "desired_agents",
    "deployments_active",
    "pods_running",
    "migrations",
    "fallbacks",
    "tau_u",
    "tau_d",
    "tau_p",
    "tau_rrt",
    "deadline_violation",
    "min_separation",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub cpu_util: f64,
    pub mem_util: f64,
    /// Σ cpu_limit of running controller pods over capacity.
    pub limit_util: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeploymentMetrics {
    pub agents: usize,
    /// Cores, active pod.
    pub cpu_usage: f64,
    pub cpu_limit: f64,
}

/// One scheduler tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time: f64,
    pub desired_agents: usize,
    pub deployments_active: usize,
    pub pods_running: usize,
    /// Agents re-homed at this tick.
    pub migrations: usize,
    /// Fallback entries since the previous tick.
    pub fallbacks: usize,
    pub tau_u: Option<f64>,
    pub tau_d: Option<f64>,
    pub tau_p: Option<f64>,
    pub tau_rrt: Option<f64>,
    pub deadline_violation: bool,
    /// Smallest planar distance between tracking agents, m.
    pub min_separation: Option<f64>,
    /// In column order.
    pub nodes: Vec<NodeMetrics>,
    /// Slot `k` is deployment `cnmpc-k`.
    pub deployments: Vec<Option<DeploymentMetrics>>,
    /// Euclidean position error against the reference, by agent id; empty
    /// unless the agent is tracking.
    pub errors: Vec<Option<f64>>,
}

impl MetricsRow {
    pub fn error(&self, agent: AgentId) -> Option<f64> {
        self.errors.get(agent.index()).copied().flatten()
    }
}

/// Column layout, fixed per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsColumns {
    pub nodes: Vec<String>,
    pub deployment_slots: usize,
    pub agents: usize,
}

impl MetricsColumns {
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|c| c.to_string()).collect();
        for n in &self.nodes {
            cols.push(format!("{n}_cpu_util"));
            cols.push(format!("{n}_mem_util"));
            cols.push(format!("{n}_limit_util"));
        }
        for k in 0..self.deployment_slots {
            cols.push(format!("cnmpc-{k}_agents"));
            cols.push(format!("cnmpc-{k}_cpu_usage"));
            cols.push(format!("cnmpc-{k}_cpu_limit"));
        }
        for a in 0..self.agents {
            cols.push(format!("err_{a}"));
        }
        cols
    }

    pub fn render_row(&self, row: &MetricsRow) -> String {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let mut f = vec![
            num(row.time),
            row.desired_agents.to_string(),
            row.deployments_active.to_string(),
            row.pods_running.to_string(),
            row.migrations.to_string(),
            row.fallbacks.to_string(),
            opt(row.tau_u),
            opt(row.tau_d),
            opt(row.tau_p),
            opt(row.tau_rrt),
            u8::from(row.deadline_violation).to_string(),
            opt(row.min_separation),
        ];
        for k in 0..self.nodes.len() {
            let n = row.nodes.get(k).copied().unwrap_or_default();
            f.extend([num(n.cpu_util), num(n.mem_util), num(n.limit_util)]);
        }
        for k in 0..self.deployment_slots {
            match row.deployments.get(k).copied().flatten() {
                Some(d) => f.extend([d.agents.to_string(), num(d.cpu_usage), num(d.cpu_limit)]),
                None => f.extend([String::new(), String::new(), String::new()]),
            }
        }
        for a in 0..self.agents {
            f.push(opt(row.errors.get(a).copied().flatten()));
        }
        f.join(",")
    }

    pub fn render(&self, rows: &[MetricsRow]) -> String {
        let mut out = String::new();
        writeln!(out, "{METRICS_SCHEMA_LINE}").unwrap();
        writeln!(out, "{}", self.header().join(",")).unwrap();
        for row in rows {
            writeln!(out, "{}", self.render_row(row)).unwrap();
        }
        out
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// Parsed metrics file: header plus raw cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of a column; empty cells become `None`.
    pub fn values(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let c = self.column(name)?;
        Some(self.rows.iter().map(|r| r[c].parse().ok()).collect())
    }
}

/// Parses a metrics file, checking the schema line, the fixed columns, a
/// constant column count and non-decreasing time.
pub fn parse_metrics(text: &str) -> std::result::Result<MetricsTable, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == METRICS_SCHEMA_LINE => {}
        other => return Err(format!("line 1: expected `{METRICS_SCHEMA_LINE}`, got {other:?}")),
    }
    let header: Vec<String> = lines
        .next()
        .ok_or("line 2: missing header row")?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.len() < BASE_COLUMNS.len() || header.iter().zip(BASE_COLUMNS).any(|(h, b)| h != b) {
        return Err("line 2: header does not start with the fixed columns".into());
    }
    let mut rows = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(format!("line {lineno}: {} columns, header has {}", cells.len(), header.len()));
        }
        let time: f64 = cells[0].parse().map_err(|_| format!("line {lineno}: time is not a number"))?;
        if time < last_time {
            return Err(format!("line {lineno}: time goes backwards"));
        }
        last_time = time;
        rows.push(cells);
    }
    Ok(MetricsTable { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns() -> MetricsColumns {
        MetricsColumns {
            nodes: vec!["a".into(), "b".into()],
            deployment_slots: 2,
            agents: 3,
        }
    }

    #[test]
    fn render_then_parse() {
        let cols = columns();
        let row = MetricsRow {
            time: 1.0,
            desired_agents: 3,
            nodes: vec![NodeMetrics::default(); 2],
            deployments: vec![Some(DeploymentMetrics { agents: 3, cpu_usage: 1.5, cpu_limit: 3.0 }), None],
            errors: vec![Some(0.01), None, Some(0.5)],
            tau_rrt: Some(0.06),
            ..MetricsRow::default()
        };
        let text = cols.render(&[row.clone(), MetricsRow { time: 2.0, ..row }]);
        let table = parse_metrics(&text).unwrap();
        assert_eq!(table.header.len(), 12 + 6 + 6 + 3);
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.values("err_1").unwrap(), vec![None, None]);
        assert_eq!(table.values("tau_rrt").unwrap()[0], Some(0.06));
    }

    #[test]
    fn schema_violations_flagged() {
        let cols = columns();
        let text = cols.render(&[MetricsRow::default()]);
        let mut corrupted = text.clone();
        corrupted.push_str("1.0,2\n");
        assert!(parse_metrics(&corrupted).unwrap_err().contains("columns"));
        assert!(parse_metrics(&text.replacen("v1", "v9", 1)).is_err());
        assert!(parse_metrics(&text.replacen("time", "tick", 1)).is_err());
    }
}
