//! Discrete-event simulation of one training/inference step.
//!
//! Visual encoding either runs serially or fans out across lanes. Parallel
//! dispatch is pessimistic: encoders are issued in ascending-latency order
//! (ties by name) and the k-th dispatch is delayed by `k * epsilon`, so with
//! enough lanes the encoder phase closes at `max_latency + (N-1) * epsilon`.
//! Downstream stages (fusion, LLM) start once every encoder+projector task
//! has finished.

use crate::encoders::EncoderProfile;
use crate::error::{MervError, Result};
use serde::{Deserialize, Serialize};

/// Measured or synthetic latencies for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    /// Per-encoder encode latency, milliseconds.
    pub encoders: Vec<(String, f64)>,
    pub projector_ms: f64,
    pub fusion_ms: f64,
    pub llm_ms: f64,
    /// Dispatch overhead added per extra encoder under the parallel policy.
    pub dispatch_overhead_ms: f64,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(MervError::config("latency profile has no encoders".to_string()));
        }
        let all = self
            .encoders
            .iter()
            .map(|(_, ms)| *ms)
            .chain([self.projector_ms, self.fusion_ms, self.llm_ms, self.dispatch_overhead_ms]);
        for v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(MervError::config(
                    "latencies must be finite and nonnegative".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Derives a profile from encoder profiles plus downstream stage costs.
    pub fn from_profiles(
        profiles: &[EncoderProfile],
        projector_ms: f64,
        fusion_ms: f64,
        llm_ms: f64,
        dispatch_overhead_ms: f64,
    ) -> Self {
        LatencyProfile {
            encoders: profiles
                .iter()
                .map(|p| (p.name.clone(), p.latency_ms))
                .collect(),
            projector_ms,
            fusion_ms,
            llm_ms,
            dispatch_overhead_ms,
        }
    }

    /// Paper-shaped defaults: LLM-dominated step, four heterogeneous encoders.
    pub fn default_step() -> Self {
        Self::from_profiles(&EncoderProfile::default_ensemble(), 2.0, 1.0, 250.0, 0.5)
    }

    /// Parses `kind,name,latency_ms` rows; kinds are `encoder`, `projector`,
    /// `fusion`, `llm`, `dispatch`. A header row is skipped.
    pub fn from_csv(text: &str) -> Result<LatencyProfile> {
        let mut profile = LatencyProfile {
            encoders: Vec::new(),
            projector_ms: 0.0,
            fusion_ms: 0.0,
            llm_ms: 0.0,
            dispatch_overhead_ms: 0.0,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(MervError::format(format!(
                    "latency csv line {}: expected 3 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            if lineno == 0 && fields[2].parse::<f64>().is_err() {
                continue; // header
            }
            let ms: f64 = fields[2].parse().map_err(|_| {
                MervError::format(format!(
                    "latency csv line {}: bad latency `{}`",
                    lineno + 1,
                    fields[2]
                ))
            })?;
            match fields[0] {
                "encoder" => profile.encoders.push((fields[1].to_string(), ms)),
                "projector" => profile.projector_ms = ms,
                "fusion" => profile.fusion_ms = ms,
                "llm" => profile.llm_ms = ms,
                "dispatch" => profile.dispatch_overhead_ms = ms,
                other => {
                    return Err(MervError::format(format!(
                        "latency csv line {}: unknown kind `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Serial,
    Parallel,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy> {
        match s {
            "serial" => Ok(Policy::Serial),
            "parallel" => Ok(Policy::Parallel),
            other => Err(MervError::config(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub policy: Policy,
    pub lanes: usize,
    pub tasks: Vec<Task>,
    pub makespan: f64,
}

impl ScheduleTrace {
    /// End of the encoder phase (last `encode:` task).
    pub fn encoder_phase_end(&self) -> f64 {
        self.tasks
            .iter()
            .filter(|t| t.name.starts_with("encode:"))
            .map(|t| t.end)
            .fold(0.0, f64::max)
    }

    /// Text Gantt summary, one bar per task.
    pub fn to_gantt(&self) -> String {
        let span = self.makespan.max(1e-9);
        let width = 48usize;
        let mut s = format!(
            "policy={} lanes={} makespan={:.3} ms\n",
            match self.policy {
                Policy::Serial => "serial",
                Policy::Parallel => "parallel",
            },
            self.lanes,
            self.makespan
        );
        for t in &self.tasks {
            let a = ((t.start / span) * width as f64).round() as usize;
            let b = (((t.end / span) * width as f64).round() as usize).max(a + 1);
            let mut bar = String::with_capacity(width + 2);
            for i in 0..width {
                bar.push(if i >= a && i < b { '#' } else { '.' });
            }
            s.push_str(&format!(
                "{:<24} [{bar}] {:>9.3} -> {:>9.3}\n",
                t.name, t.start, t.end
            ));
        }
        s
    }
}

/// Simulates one step. Serial policy runs every task back to back; parallel
/// policy overlaps encoder+projector chains across `lanes` lanes with
/// per-dispatch overhead.
pub fn simulate_step(latency: &LatencyProfile, policy: Policy, lanes: usize) -> Result<ScheduleTrace> {
    latency.validate()?;
    if lanes == 0 {
        return Err(MervError::config("lanes must be >= 1".to_string()));
    }
    let eps = latency.dispatch_overhead_ms;
    let mut tasks = Vec::new();
    let mut encoders_done = 0.0f64;

    match policy {
        Policy::Serial => {
            let mut now = 0.0f64;
            for (name, ms) in &latency.encoders {
                tasks.push(Task {
                    name: format!("encode:{name}"),
                    start: now,
                    end: now + ms,
                });
                now += ms;
            }
            for (name, _) in &latency.encoders {
                tasks.push(Task {
                    name: format!("project:{name}"),
                    start: now,
                    end: now + latency.projector_ms,
                });
                now += latency.projector_ms;
            }
            encoders_done = now;
        }
        Policy::Parallel => {
            // ascending-latency dispatch order, ties broken by name
            let mut order: Vec<(String, f64)> = latency.encoders.clone();
            order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let mut lane_free = vec![0.0f64; lanes];
            for (k, (name, ms)) in order.iter().enumerate() {
                let lane = lane_free
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                let start = lane_free[lane].max(k as f64 * eps);
                let enc_end = start + ms;
                tasks.push(Task {
                    name: format!("encode:{name}"),
                    start,
                    end: enc_end,
                });
                let proj_end = enc_end + latency.projector_ms;
                tasks.push(Task {
                    name: format!("project:{name}"),
                    start: enc_end,
                    end: proj_end,
                });
                lane_free[lane] = proj_end;
                encoders_done = encoders_done.max(proj_end);
            }
            // keep a stable task ordering: by start time, ties by name
            tasks.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap().then(a.name.cmp(&b.name)));
        }
    }

    let fuse_end = encoders_done + latency.fusion_ms;
    tasks.push(Task {
        name: "fuse".to_string(),
        start: encoders_done,
        end: fuse_end,
    });
    let llm_end = fuse_end + latency.llm_ms;
    tasks.push(Task {
        name: "llm".to_string(),
        start: fuse_end,
        end: llm_end,
    });

    Ok(ScheduleTrace {
        policy,
        lanes,
        tasks,
        makespan: llm_end,
    })
}

/// Makespans for growing encoder prefixes under the parallel policy.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub encoders: Vec<String>,
    pub makespan: f64,
    pub slowest_single: f64,
}

/// Adds encoders one at a time (in the given order) and simulates each
/// prefix with as many lanes as encoders.
pub fn sweep_encoders(latency: &LatencyProfile, order: &[String]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for k in 1..=order.len() {
        let prefix: Vec<(String, f64)> = order[..k]
            .iter()
            .map(|name| {
                latency
                    .encoders
                    .iter()
                    .find(|(n, _)| n == name)
                    .cloned()
                    .ok_or_else(|| {
                        MervError::config(format!("encoder `{name}` missing from latency profile"))
                    })
            })
            .collect::<Result<_>>()?;
        let sub = LatencyProfile {
            encoders: prefix.clone(),
            ..latency.clone()
        };
        let trace = simulate_step(&sub, Policy::Parallel, k)?;
        let slowest_single = prefix
            .iter()
            .map(|(_, ms)| ms + latency.projector_ms + latency.fusion_ms + latency.llm_ms)
            .fold(0.0, f64::max);
        rows.push(SweepRow {
            encoders: order[..k].to_vec(),
            makespan: trace.makespan,
            slowest_single,
        });
    }
    Ok(rows)
}
