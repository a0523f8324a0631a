//! Residual monitoring and attack attribution.
//!
//! Each residual component is normalized by a σ, smoothed with an EWMA
//!
//! ```text
//! s ← (1 − α)·s + α·|r|/σ
//! ```
//!
//! and latches once `s ≥ κ` holds for `persistence` consecutive steps. A
//! latched line-current component accuses the neighbor at the far end of
//! that line. Bus-voltage and source-current components carry no direction,
//! so they only raise an unattributed event when no line-current component
//! of the same agent is already in alarm.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::netmodel::{AgentModel, BusId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),

    #[error("residual components do not match the agent metadata: {0}")]
    UnknownComponent(String),

    #[error("empirical σ requested but no warm-up residuals were observed")]
    NoWarmupData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// `sqrt(diag(C·P·Cᵀ + R))` from the observer at each step.
    #[default]
    Innovation,
    /// Sample standard deviation of the residuals seen during warm-up.
    EmpiricalWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kappa: f64,
    pub ewma_alpha: f64,
    pub persistence: u32,
    pub sigma_source: SigmaSource,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kappa: 5.0,
            ewma_alpha: 0.05,
            persistence: 10,
            sigma_source: SigmaSource::Innovation,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(DetectError::InvalidConfig(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(DetectError::InvalidConfig(format!(
                "ewma_alpha must lie in (0, 1], got {}",
                self.ewma_alpha
            )));
        }
        if self.persistence == 0 {
            return Err(DetectError::InvalidConfig(
                "persistence must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    BusVoltage,
    SourceCurrent,
    LineCurrent { neighbor: BusId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMeta {
    pub label: String,
    pub kind: ComponentKind,
}

/// Component metadata for an agent whose measurements are its local states.
pub fn component_meta(model: &AgentModel) -> Vec<ComponentMeta> {
    model
        .state_labels
        .iter()
        .enumerate()
        .map(|(row, label)| {
            let kind = match row {
                0 => ComponentKind::BusVoltage,
                1 => ComponentKind::SourceCurrent,
                _ => model
                    .coupling_rows
                    .iter()
                    .position(|&r| r == row)
                    .map(|j| ComponentKind::LineCurrent {
                        neighbor: model.neighbors[j],
                    })
                    .unwrap_or(ComponentKind::SourceCurrent),
            };
            ComponentMeta {
                label: label.clone(),
                kind,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Accused {
    Neighbor(BusId),
    Unattributed,
}

impl fmt::Display for Accused {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Accused::Neighbor(b) => write!(f, "{b}"),
            Accused::Unattributed => f.write_str("unattributed"),
        }
    }
}

impl Serialize for Accused {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Accused::Neighbor(b) => b.serialize(s),
            Accused::Unattributed => s.serialize_str("unattributed"),
        }
    }
}

impl<'de> Deserialize<'de> for Accused {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(n) => BusId::from_number(n as usize)
                .map(Accused::Neighbor)
                .ok_or_else(|| serde::de::Error::custom("bus numbers start at 1")),
            Raw::Text(t) if t == "unattributed" => Ok(Accused::Unattributed),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a bus number or \"unattributed\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub agent: BusId,
    pub accused_neighbor: Accused,
    pub component: String,
    /// Seconds.
    pub time: f64,
    /// Smoothed normalized magnitude at the latching step.
    pub statistic: f64,
}

#[derive(Debug, Clone, Default)]
struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }
}

/// Streaming detector for one agent.
#[derive(Debug, Clone)]
pub struct Monitor {
    agent: BusId,
    config: DetectorConfig,
    meta: Vec<ComponentMeta>,
    ewma: Vec<f64>,
    run: Vec<u32>,
    latched: Vec<bool>,
    warmup: Vec<RunningStats>,
    empirical_sigma: Option<Vec<f64>>,
}

impl Monitor {
    pub fn new(
        agent: BusId,
        config: DetectorConfig,
        meta: Vec<ComponentMeta>,
    ) -> Result<Self, DetectError> {
        config.validate()?;
        let m = meta.len();
        Ok(Monitor {
            agent,
            config,
            meta,
            ewma: vec![0.0; m],
            run: vec![0; m],
            latched: vec![false; m],
            warmup: vec![RunningStats::default(); m],
            empirical_sigma: None,
        })
    }

    pub fn agent(&self) -> BusId {
        self.agent
    }

    pub fn latched(&self) -> &[bool] {
        &self.latched
    }

    pub fn any_latched(&self) -> bool {
        self.latched.iter().any(|&l| l)
    }

    pub fn statistics(&self) -> &[f64] {
        &self.ewma
    }

    fn check_len(&self, len: usize) -> Result<(), DetectError> {
        if len != self.meta.len() {
            return Err(DetectError::UnknownComponent(format!(
                "agent {} has {} components, residual has {len}",
                self.agent,
                self.meta.len()
            )));
        }
        Ok(())
    }

    /// Residuals observed before detection starts; only used for the
    /// empirical σ.
    pub fn observe_warmup(&mut self, r: &DVector<f64>) -> Result<(), DetectError> {
        self.check_len(r.len())?;
        for (stats, &v) in self.warmup.iter_mut().zip(r.iter()) {
            stats.push(v);
        }
        Ok(())
    }

    /// Feed one post-warm-up residual. Returns the events latched at `time`.
    pub fn push(
        &mut self,
        time: f64,
        r: &DVector<f64>,
        innovation_sigma: &DVector<f64>,
    ) -> Result<Vec<DetectionEvent>, DetectError> {
        self.check_len(r.len())?;
        let sigma: Vec<f64> = match self.config.sigma_source {
            SigmaSource::Innovation => {
                self.check_len(innovation_sigma.len())?;
                innovation_sigma.iter().copied().collect()
            }
            SigmaSource::EmpiricalWarmup => {
                if self.empirical_sigma.is_none() {
                    if self.warmup.iter().any(|s| s.count < 2) {
                        return Err(DetectError::NoWarmupData);
                    }
                    self.empirical_sigma =
                        Some(self.warmup.iter().map(RunningStats::std).collect());
                }
                self.empirical_sigma.clone().unwrap_or_default()
            }
        };

        let alpha = self.config.ewma_alpha;
        let mut newly = Vec::new();
        for c in 0..self.meta.len() {
            let z = normalized(r[c], sigma[c]);
            self.ewma[c] = (1.0 - alpha) * self.ewma[c] + alpha * z;
            if self.ewma[c] >= self.config.kappa {
                self.run[c] = self.run[c].saturating_add(1);
            } else {
                self.run[c] = 0;
            }
            if !self.latched[c] && self.run[c] >= self.config.persistence {
                newly.push(c);
            }
        }

        let line_already = self
            .meta
            .iter()
            .zip(&self.latched)
            .any(|(m, &l)| l && matches!(m.kind, ComponentKind::LineCurrent { .. }));
        let line_now = newly
            .iter()
            .any(|&c| matches!(self.meta[c].kind, ComponentKind::LineCurrent { .. }));

        let mut events = Vec::new();
        for &c in &newly {
            self.latched[c] = true;
            let accused = match self.meta[c].kind {
                ComponentKind::LineCurrent { neighbor } => Accused::Neighbor(neighbor),
                _ if line_already || line_now => continue,
                _ => Accused::Unattributed,
            };
            events.push(DetectionEvent {
                agent: self.agent,
                accused_neighbor: accused,
                component: self.meta[c].label.clone(),
                time,
                statistic: self.ewma[c],
            });
        }
        Ok(events)
    }
}

fn normalized(r: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        r.abs() / sigma
    } else if r == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// One agent's post-warm-up residual stream.
#[derive(Debug, Clone, Default)]
pub struct ResidualStream {
    pub agent: BusId,
    pub times: Vec<f64>,
    pub residuals: Vec<DVector<f64>>,
    /// Innovation σ per step; may be empty when σ comes from warm-up.
    pub sigmas: Vec<DVector<f64>>,
    /// Residuals recorded during warm-up.
    pub warmup: Vec<DVector<f64>>,
}

pub fn monitor(
    stream: &ResidualStream,
    config: &DetectorConfig,
    meta: &[ComponentMeta],
) -> Result<Vec<DetectionEvent>, DetectError> {
    let mut mon = Monitor::new(stream.agent, *config, meta.to_vec())?;
    for r in &stream.warmup {
        mon.observe_warmup(r)?;
    }
    if stream.times.len() != stream.residuals.len() {
        return Err(DetectError::UnknownComponent(
            "times and residuals differ in length".into(),
        ));
    }
    let empty = DVector::zeros(0);
    let mut events = Vec::new();
    for (k, (t, r)) in stream.times.iter().zip(&stream.residuals).enumerate() {
        let sigma = stream.sigmas.get(k).unwrap_or(&empty);
        events.extend(mon.push(*t, r, sigma)?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> Vec<ComponentMeta> {
        vec![
            ComponentMeta {
                label: "V1".into(),
                kind: ComponentKind::BusVoltage,
            },
            ComponentMeta {
                label: "Ig1".into(),
                kind: ComponentKind::SourceCurrent,
            },
            ComponentMeta {
                label: "I1_2".into(),
                kind: ComponentKind::LineCurrent { neighbor: BusId(1) },
            },
            ComponentMeta {
                label: "I1_3".into(),
                kind: ComponentKind::LineCurrent { neighbor: BusId(2) },
            },
        ]
    }

    fn stream(values: impl Fn(usize) -> [f64; 4], steps: usize, ts: f64) -> ResidualStream {
        ResidualStream {
            agent: BusId(0),
            times: (0..steps).map(|k| k as f64 * ts).collect(),
            residuals: (0..steps)
                .map(|k| DVector::from_row_slice(&values(k)))
                .collect(),
            sigmas: vec![DVector::from_element(4, 1.0); steps],
            warmup: vec![],
        }
    }

    #[test]
    fn silent_on_zero_residuals() {
        let s = stream(|_| [0.0; 4], 500, 1e-4);
        assert!(monitor(&s, &DetectorConfig::default(), &meta())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_line_jump_accuses_that_neighbor() {
        let ts = 1e-4;
        let k0 = 100;
        let s = stream(
            |k| {
                if k >= k0 {
                    [0.0, 0.0, 0.0, 10.0]
                } else {
                    [0.0; 4]
                }
            },
            400,
            ts,
        );
        let cfg = DetectorConfig::default();
        let events = monitor(&s, &cfg, &meta()).unwrap();
        assert_eq!(events.len(), 1);
        let ev = &events[0];
        assert_eq!(ev.accused_neighbor, Accused::Neighbor(BusId(2)));
        assert_eq!(ev.component, "I1_3");

        // Direct recurrence: s_j = 10·(1 − 0.95^(j+1)) after j steps past k0.
        let first_above = (0..)
            .find(|&j| 10.0 * (1.0 - 0.95f64.powi(j + 1)) >= cfg.kappa)
            .unwrap() as usize;
        let latch_step = k0 + first_above + cfg.persistence as usize - 1;
        assert!((ev.time - latch_step as f64 * ts).abs() < 1e-12);
        assert!(ev.time >= k0 as f64 * ts);
        assert!(ev.time <= (k0 + cfg.persistence as usize + first_above) as f64 * ts);
    }

    #[test]
    fn voltage_alone_is_unattributed() {
        let s = stream(
            |k| {
                if k >= 10 {
                    [20.0, 0.0, 0.0, 0.0]
                } else {
                    [0.0; 4]
                }
            },
            200,
            1.0,
        );
        let events = monitor(&s, &DetectorConfig::default(), &meta()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].accused_neighbor, Accused::Unattributed);
    }

    #[test]
    fn voltage_with_line_alarm_adds_no_event() {
        let s = stream(
            |k| match k {
                k if k >= 100 => [20.0, 20.0, 20.0, 0.0],
                k if k >= 10 => [0.0, 0.0, 20.0, 0.0],
                _ => [0.0; 4],
            },
            300,
            1.0,
        );
        let events = monitor(&s, &DetectorConfig::default(), &meta()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].accused_neighbor, Accused::Neighbor(BusId(1)));
    }

    #[test]
    fn latches_once() {
        let s = stream(
            |k| {
                if (k / 50) % 2 == 1 {
                    [0.0, 0.0, 30.0, 0.0]
                } else {
                    [0.0; 4]
                }
            },
            400,
            1.0,
        );
        let events = monitor(&s, &DetectorConfig::default(), &meta()).unwrap();
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn component_count_mismatch() {
        let mut s = stream(|_| [0.0; 4], 3, 1.0);
        s.residuals[1] = DVector::zeros(3);
        assert!(matches!(
            monitor(&s, &DetectorConfig::default(), &meta()),
            Err(DetectError::UnknownComponent(_))
        ));
    }

    #[test]
    fn empirical_sigma() {
        let mut s = stream(|_| [0.0, 0.0, 0.0, 12.0], 200, 1.0);
        s.sigmas.clear();
        let cfg = DetectorConfig {
            sigma_source: SigmaSource::EmpiricalWarmup,
            ..DetectorConfig::default()
        };
        assert_eq!(
            monitor(&s, &cfg, &meta()).unwrap_err(),
            DetectError::NoWarmupData
        );
        s.warmup = (0..100)
            .map(|k| {
                let v = if k % 2 == 0 { 1.0 } else { -1.0 };
                DVector::from_element(4, v)
            })
            .collect();
        let events = monitor(&s, &cfg, &meta()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].accused_neighbor, Accused::Neighbor(BusId(2)));
    }

    #[test]
    fn config_validation() {
        let bad = [
            DetectorConfig {
                kappa: 0.0,
                ..Default::default()
            },
            DetectorConfig {
                ewma_alpha: 0.0,
                ..Default::default()
            },
            DetectorConfig {
                ewma_alpha: 1.5,
                ..Default::default()
            },
            DetectorConfig {
                persistence: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(DetectorConfig::default().validate().is_ok());
    }

    #[test]
    fn accused_serde() {
        let a: Accused = serde_json::from_str("3").unwrap();
        assert_eq!(a, Accused::Neighbor(BusId(2)));
        let u: Accused = serde_json::from_str("\"unattributed\"").unwrap();
        assert_eq!(u, Accused::Unattributed);
        assert_eq!(serde_json::to_string(&a).unwrap(), "3");
    }
}
