//! Scenario engine.
//!
//! Per step `k`:
//!
//! 1. the global plant advances with its zero-order-hold model and process
//!    noise,
//! 2. every agent measures its oriented local states,
//! 3. every agent receives its neighbors' bus voltages at `k`, plus the bias
//!    of any active attack on that channel,
//! 4. every observer runs one gain and state update,
//! 5. the detectors consume the residuals past the warm-up window.
//!
//! Noise streams are per agent and drawn in a fixed order before the agent
//! updates, so traces are bit-identical whether agents run in parallel or
//! not.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{component_meta, DetectError, DetectionEvent, DetectorConfig, Monitor};
use crate::lti::{discretize_zoh, LinalgError};
use crate::netmodel::{build_global, partition_agent, AgentModel, BusId, ModelError, NetworkSpec};
use crate::uio::{Observer, ObserverError, ObserverOptions};

/// Relative tolerance, in steps, for an event time to count as on-grid.
const GRID_TOLERANCE: f64 = 1e-6;

/// A semantic problem in a scenario, located by a field path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {reason}")]
pub struct ValidationError {
    pub path: String,
    pub reason: String,
}

impl ValidationError {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(#[from] ValidationError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("agent {agent}: {source}")]
    Observer {
        agent: BusId,
        #[source]
        source: ObserverError,
    },

    #[error(transparent)]
    Detect(#[from] DetectError),

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl SimError {
    /// True when the scenario itself is at fault rather than the run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, SimError::ConfigInvalid(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub process: u64,
    pub measurement: u64,
    pub load: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            process: 1,
            measurement: 2,
            load: 3,
        }
    }
}

impl SeedConfig {
    /// Derive all streams from one integer.
    pub fn from_master(seed: u64) -> Self {
        SeedConfig {
            process: seed,
            measurement: seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
            load: seed.wrapping_add(0x3C6E_F372_FE94_F82A),
        }
    }
}

/// One piece of a bus load profile, active from `start` until the next
/// segment begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadSegment {
    Constant {
        start: f64,
        amps: f64,
    },
    /// Linear from `from` to `to` over `duration` seconds, then held.
    Ramp {
        start: f64,
        from: f64,
        to: f64,
        duration: f64,
    },
    /// Starts at `initial` and adds a Gaussian increment of standard
    /// deviation `step_std` every `hold` seconds.
    RandomWalk {
        start: f64,
        initial: f64,
        step_std: f64,
        hold: f64,
    },
}

impl LoadSegment {
    pub fn start(&self) -> f64 {
        match *self {
            LoadSegment::Constant { start, .. }
            | LoadSegment::Ramp { start, .. }
            | LoadSegment::RandomWalk { start, .. } => start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadProfile {
    pub segments: Vec<LoadSegment>,
}

impl LoadProfile {
    pub fn constant(amps: f64) -> Self {
        LoadProfile {
            segments: vec![LoadSegment::Constant { start: 0.0, amps }],
        }
    }

    /// `base` amps, stepping to `base + delta` at `at` seconds.
    pub fn step(base: f64, at: f64, delta: f64) -> Self {
        LoadProfile {
            segments: vec![
                LoadSegment::Constant {
                    start: 0.0,
                    amps: base,
                },
                LoadSegment::Constant {
                    start: at,
                    amps: base + delta,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceChange {
    pub time: f64,
    pub volts: f64,
}

/// Piecewise-constant source voltage; the bus nominal value applies until
/// the first change.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSchedule {
    pub changes: Vec<SourceChange>,
}

/// Constant bias added to the voltage that `source` reports to `victim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub victim: BusId,
    pub source: BusId,
    pub start: f64,
    /// Defaults to the end of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
    /// Volts.
    pub bias: f64,
}

/// Which noises are injected into the simulated plant and sensors. The
/// observers are always designed with the nominal covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantNoise {
    pub process: bool,
    pub measurement: bool,
}

impl Default for PlantNoise {
    fn default() -> Self {
        PlantNoise {
            process: true,
            measurement: true,
        }
    }
}

impl PlantNoise {
    pub fn off() -> Self {
        PlantNoise {
            process: false,
            measurement: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Steady state of the continuous model for the inputs at t = 0.
    #[default]
    Equilibrium,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSettings {
    pub p0_scale: f64,
    pub freeze_gains: bool,
}

impl Default for ObserverSettings {
    fn default() -> Self {
        let o = ObserverOptions::default();
        ObserverSettings {
            p0_scale: o.p0_scale,
            freeze_gains: o.freeze_gains,
        }
    }
}

impl From<ObserverSettings> for ObserverOptions {
    fn from(s: ObserverSettings) -> Self {
        ObserverOptions {
            p0_scale: s.p0_scale,
            freeze_gains: s.freeze_gains,
        }
    }
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkSpec,
    /// Step size, seconds.
    pub ts: f64,
    /// Duration, seconds.
    pub horizon: f64,
    #[serde(default)]
    pub seeds: SeedConfig,
    /// One profile per bus, in amperes.
    pub load_profiles: Vec<LoadProfile>,
    /// Empty, or one schedule per bus.
    #[serde(default)]
    pub source_schedule: Vec<SourceSchedule>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Seconds at the start of the run excluded from detection.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    #[serde(default)]
    pub plant_noise: PlantNoise,
    #[serde(default)]
    pub initial_state: InitialState,
    #[serde(default)]
    pub observer: ObserverSettings,
}

impl ScenarioConfig {
    /// The three-bus reference case: 150 V bias from MG3 to MG1 at 4 s,
    /// 100 V bias from MG2 to MG1 at 6 s, and a +2000 A load step on every
    /// bus at 8 s, over 10 s at 0.1 ms steps.
    pub fn three_bus_attack() -> Self {
        ScenarioConfig {
            network: NetworkSpec::three_bus_reference(),
            ts: 1e-4,
            horizon: 10.0,
            seeds: SeedConfig::default(),
            load_profiles: vec![LoadProfile::step(1000.0, 8.0, 2000.0); 3],
            source_schedule: vec![],
            attacks: vec![
                AttackSpec {
                    victim: BusId(0),
                    source: BusId(2),
                    start: 4.0,
                    end: None,
                    bias: 150.0,
                },
                AttackSpec {
                    victim: BusId(0),
                    source: BusId(1),
                    start: 6.0,
                    end: None,
                    bias: 100.0,
                },
            ],
            detector: DetectorConfig::default(),
            warmup: 0.1,
            plant_noise: PlantNoise::default(),
            initial_state: InitialState::Equilibrium,
            observer: ObserverSettings::default(),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.ts).round() as usize
    }

    /// First step index whose residual feeds the detector.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup / self.ts - GRID_TOLERANCE).ceil().max(0.0) as usize
    }

    fn step_of(&self, t: f64) -> usize {
        (t / self.ts).round() as usize
    }

    fn on_grid(&self, t: f64) -> bool {
        let k = t / self.ts;
        (k - k.round()).abs() < GRID_TOLERANCE
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.network
            .validate()
            .map_err(|e| ValidationError::new("network", e.to_string()))?;
        for (name, v) in [
            ("process", self.network.noise.process),
            ("measurement", self.network.noise.measurement),
        ] {
            for (field, x) in [
                ("bus_voltage", v.bus_voltage),
                ("source_current", v.source_current),
                ("line_current", v.line_current),
            ] {
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(ValidationError::new(
                        format!("network.noise.{name}.{field}"),
                        format!("variance must be non-negative, got {x}"),
                    ));
                }
            }
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(ValidationError::new("ts", "must be positive"));
        }
        if !(self.horizon >= self.ts && self.horizon.is_finite()) {
            return Err(ValidationError::new("horizon", "must be at least one step"));
        }
        if !self.on_grid(self.horizon) {
            return Err(ValidationError::new(
                "horizon",
                format!("{} s is not a multiple of ts = {} s", self.horizon, self.ts),
            ));
        }
        if !(self.warmup >= 0.0 && self.warmup <= self.horizon) {
            return Err(ValidationError::new(
                "warmup",
                "must lie between 0 and the horizon",
            ));
        }
        self.detector
            .validate()
            .map_err(|e| ValidationError::new("detector", e.to_string()))?;
        if !(self.observer.p0_scale >= 0.0 && self.observer.p0_scale.is_finite()) {
            return Err(ValidationError::new(
                "observer.p0_scale",
                "must be non-negative",
            ));
        }

        let nb = self.network.n_bus();
        if self.load_profiles.len() != nb {
            return Err(ValidationError::new(
                "load_profiles",
                format!("expected {nb} profiles, got {}", self.load_profiles.len()),
            ));
        }
        for (b, profile) in self.load_profiles.iter().enumerate() {
            self.validate_profile(&format!("load_profiles[{b}]"), profile)?;
        }

        if !self.source_schedule.is_empty() && self.source_schedule.len() != nb {
            return Err(ValidationError::new(
                "source_schedule",
                format!(
                    "expected 0 or {nb} schedules, got {}",
                    self.source_schedule.len()
                ),
            ));
        }
        for (b, sched) in self.source_schedule.iter().enumerate() {
            let mut last = f64::NEG_INFINITY;
            for (c, ch) in sched.changes.iter().enumerate() {
                let path = format!("source_schedule[{b}].changes[{c}]");
                if !ch.volts.is_finite() {
                    return Err(ValidationError::new(path, "volts must be finite"));
                }
                self.check_time(&path, ch.time)?;
                if ch.time <= last {
                    return Err(ValidationError::new(path, "times must increase"));
                }
                last = ch.time;
            }
        }

        for (a, atk) in self.attacks.iter().enumerate() {
            let path = format!("attacks[{a}]");
            if !self.network.contains(atk.victim) {
                return Err(ValidationError::new(
                    format!("{path}.victim"),
                    format!("bus {} does not exist", atk.victim),
                ));
            }
            if !self.network.contains(atk.source) {
                return Err(ValidationError::new(
                    format!("{path}.source"),
                    format!("bus {} does not exist", atk.source),
                ));
            }
            if !self.network.are_neighbors(atk.victim, atk.source) {
                return Err(ValidationError::new(
                    format!("{path}.source"),
                    format!(
                        "bus {} is not a neighbor of victim bus {}",
                        atk.source, atk.victim
                    ),
                ));
            }
            if !atk.bias.is_finite() {
                return Err(ValidationError::new(
                    format!("{path}.bias"),
                    "must be finite",
                ));
            }
            self.check_time(&format!("{path}.start"), atk.start)?;
            if let Some(end) = atk.end {
                self.check_time(&format!("{path}.end"), end)?;
                if end <= atk.start {
                    return Err(ValidationError::new(
                        format!("{path}.end"),
                        "must come after start",
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_time(&self, path: &str, t: f64) -> Result<(), ValidationError> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(ValidationError::new(
                path,
                format!("time {t} must be non-negative"),
            ));
        }
        if !self.on_grid(t) {
            return Err(ValidationError::new(
                path,
                format!("event time {t} s is not a multiple of ts = {} s", self.ts),
            ));
        }
        Ok(())
    }

    fn validate_profile(&self, path: &str, profile: &LoadProfile) -> Result<(), ValidationError> {
        if profile.segments.is_empty() {
            return Err(ValidationError::new(path, "needs at least one segment"));
        }
        let mut last = f64::NEG_INFINITY;
        for (s, seg) in profile.segments.iter().enumerate() {
            let p = format!("{path}.segments[{s}]");
            let start = seg.start();
            self.check_time(&format!("{p}.start"), start)?;
            if s == 0 && start != 0.0 {
                return Err(ValidationError::new(
                    format!("{p}.start"),
                    "first segment must start at 0",
                ));
            }
            if start <= last {
                return Err(ValidationError::new(
                    format!("{p}.start"),
                    "segment starts must increase",
                ));
            }
            last = start;
            match *seg {
                LoadSegment::Constant { amps, .. } => {
                    if !amps.is_finite() {
                        return Err(ValidationError::new(format!("{p}.amps"), "must be finite"));
                    }
                }
                LoadSegment::Ramp {
                    from, to, duration, ..
                } => {
                    if !(from.is_finite() && to.is_finite()) {
                        return Err(ValidationError::new(p, "ramp endpoints must be finite"));
                    }
                    self.check_time(&format!("{p}.duration"), duration)?;
                }
                LoadSegment::RandomWalk {
                    initial,
                    step_std,
                    hold,
                    ..
                } => {
                    if !initial.is_finite() {
                        return Err(ValidationError::new(
                            format!("{p}.initial"),
                            "must be finite",
                        ));
                    }
                    if !(step_std >= 0.0 && step_std.is_finite()) {
                        return Err(ValidationError::new(
                            format!("{p}.step_std"),
                            "must be non-negative",
                        ));
                    }
                    self.check_time(&format!("{p}.hold"), hold)?;
                    if hold <= 0.0 {
                        return Err(ValidationError::new(
                            format!("{p}.hold"),
                            "must be positive",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeded Gaussian source for one noise stream.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseStream { rng }
    }

    fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Zero-mean Gaussian vector with the given per-component variances.
pub fn sample_noise(
    stream: &mut NoiseStream,
    covariance_diag: &DVector<f64>,
) -> Result<DVector<f64>, SimError> {
    if let Some(&bad) = covariance_diag.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(SimError::NegativeVariance(bad));
    }
    Ok(covariance_diag.map(|var| {
        let z = stream.standard_normal();
        if var == 0.0 {
            0.0
        } else {
            var.sqrt() * z
        }
    }))
}

/// `[local inputs; received neighbor voltages]` in `B_x` column order.
pub fn lift_received_inputs(
    agent: &AgentModel,
    local_inputs: &[f64],
    received_voltages: &[f64],
) -> Result<DVector<f64>, SimError> {
    if local_inputs.len() != agent.local_inputs {
        return Err(SimError::DimensionMismatch(format!(
            "agent {} expects {} local inputs, got {}",
            agent.agent,
            agent.local_inputs,
            local_inputs.len()
        )));
    }
    if received_voltages.len() != agent.neighbors.len() {
        return Err(SimError::DimensionMismatch(format!(
            "agent {} expects {} neighbor voltages, got {}",
            agent.agent,
            agent.neighbors.len(),
            received_voltages.len()
        )));
    }
    Ok(DVector::from_iterator(
        local_inputs.len() + received_voltages.len(),
        local_inputs.iter().chain(received_voltages).copied(),
    ))
}

/// Row-major time series with a fixed width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    width: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn with_capacity(width: usize, rows: usize) -> Self {
        Series {
            width,
            data: Vec::with_capacity(width * rows),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(self.width.max(1)).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrace {
    pub agent: BusId,
    pub labels: Vec<String>,
    pub neighbors: Vec<BusId>,
    pub y: Series,
    /// Neighbor voltages as received, attack bias included.
    pub comms: Series,
    pub x_hat: Series,
    pub residuals: Series,
    /// Innovation σ per component.
    pub sigma: Series,
    pub p_trace: Vec<f64>,
    /// Any component latched at this step.
    pub alarm: Vec<bool>,
    pub events: Vec<DetectionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub state_labels: Vec<String>,
    pub x_true: Series,
    pub agents: Vec<AgentTrace>,
    /// All agents' events in time order.
    pub events: Vec<DetectionEvent>,
    pub warmup_steps: usize,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn agent(&self, bus: BusId) -> Option<&AgentTrace> {
        self.agents.iter().find(|a| a.agent == bus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Step agents on the rayon pool.
    pub parallel_agents: bool,
}

struct AgentRuntime {
    observer: Observer,
    monitor: Monitor,
    stream: NoiseStream,
    r_diag: DVector<f64>,
    /// Global indices this agent injects process noise into.
    process_slots: Vec<usize>,
    process_var: DVector<f64>,
    process_stream: NoiseStream,
    trace: AgentTrace,
}

struct StepInput {
    u_x: DVector<f64>,
    y_k: DVector<f64>,
    y_k1: DVector<f64>,
}

fn load_series(config: &ScenarioConfig) -> Vec<Vec<f64>> {
    let steps = config.n_steps();
    config
        .load_profiles
        .iter()
        .enumerate()
        .map(|(bus, profile)| {
            let mut rng = NoiseStream::new(config.seeds.load, bus as u64);
            let starts: Vec<usize> = profile
                .segments
                .iter()
                .map(|s| config.step_of(s.start()))
                .collect();
            let mut out = Vec::with_capacity(steps + 1);
            let mut seg = 0;
            let mut walk = 0.0;
            for k in 0..=steps {
                while seg + 1 < starts.len() && k >= starts[seg + 1] {
                    seg += 1;
                }
                let offset = k - starts[seg];
                let value = match profile.segments[seg] {
                    LoadSegment::Constant { amps, .. } => amps,
                    LoadSegment::Ramp {
                        from, to, duration, ..
                    } => {
                        let n = config.step_of(duration);
                        if n == 0 || offset >= n {
                            to
                        } else {
                            from + (to - from) * offset as f64 / n as f64
                        }
                    }
                    LoadSegment::RandomWalk {
                        initial,
                        step_std,
                        hold,
                        ..
                    } => {
                        let every = config.step_of(hold).max(1);
                        if offset == 0 {
                            walk = initial;
                        } else if offset.is_multiple_of(every) {
                            walk += step_std * rng.standard_normal();
                        }
                        walk
                    }
                };
                out.push(value);
            }
            out
        })
        .collect()
}

fn source_series(config: &ScenarioConfig) -> Vec<Vec<f64>> {
    let steps = config.n_steps();
    config
        .network
        .buses
        .iter()
        .enumerate()
        .map(|(b, bus)| {
            let changes: Vec<(usize, f64)> = config
                .source_schedule
                .get(b)
                .map(|s| {
                    s.changes
                        .iter()
                        .map(|c| (config.step_of(c.time), c.volts))
                        .collect()
                })
                .unwrap_or_default();
            let mut v = bus.v_source_nominal;
            let mut next = 0;
            (0..=steps)
                .map(|k| {
                    while next < changes.len() && k >= changes[next].0 {
                        v = changes[next].1;
                        next += 1;
                    }
                    v
                })
                .collect()
        })
        .collect()
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<SimulationTrace, SimError> {
    run_scenario_with(config, RunOptions::default())
}

pub fn run_scenario_with(
    config: &ScenarioConfig,
    options: RunOptions,
) -> Result<SimulationTrace, SimError> {
    config.validate()?;
    let spec = &config.network;
    let ts = config.ts;
    let steps = config.n_steps();
    let nb = spec.n_bus();
    let warmup_steps = config.warmup_steps();

    let global = build_global(spec)?;
    let plant = discretize_zoh(&global.a_c, &global.b_c, &global.e_c, ts)?;
    let n = global.dim();

    let loads = load_series(config);
    let sources = source_series(config);
    let column = |series: &[Vec<f64>], k: usize| {
        DVector::from_iterator(series.len(), series.iter().map(|s| s[k]))
    };

    let mut x = match config.initial_state {
        InitialState::Equilibrium => global
            .equilibrium(&column(&sources, 0), &column(&loads, 0))
            .ok_or_else(|| SimError::DimensionMismatch("network has no equilibrium".into()))?,
        InitialState::Zero => DVector::zeros(n),
    };

    let mut agents = Vec::with_capacity(nb);
    for i in 0..nb {
        let bus = BusId(i);
        let cont = partition_agent(&global, spec, bus)?;
        let model = cont.discretize(ts)?;
        let r_diag = cont.r_i.clone();
        let mut stream = NoiseStream::new(config.seeds.measurement, i as u64);
        let y0 = measure(
            &model,
            &x,
            &r_diag,
            &mut stream,
            config.plant_noise.measurement,
        )?;

        let mut process_slots = vec![global.voltage_index(bus), global.source_index(bus)];
        let mut process_var = vec![cont.q_i[0], cont.q_i[1]];
        for (j, cp) in cont.couplings.iter().enumerate() {
            if spec.lines[cp.line].tail == bus {
                process_slots.push(global.line_index(cp.line));
                process_var.push(cont.q_i[2 + j]);
            }
        }

        let meta = component_meta(&model);
        let monitor = Monitor::new(bus, config.detector, meta)?;
        let observer = Observer::new(model.clone(), &y0, config.observer.into())
            .map_err(|source| SimError::Observer { agent: bus, source })?;

        let m = model.m();
        let mut trace = AgentTrace {
            agent: bus,
            labels: model.state_labels.clone(),
            neighbors: model.neighbors.clone(),
            y: Series::with_capacity(m, steps + 1),
            comms: Series::with_capacity(model.neighbors.len(), steps + 1),
            x_hat: Series::with_capacity(model.n(), steps + 1),
            residuals: Series::with_capacity(m, steps + 1),
            sigma: Series::with_capacity(m, steps + 1),
            p_trace: Vec::with_capacity(steps + 1),
            alarm: Vec::with_capacity(steps + 1),
            events: Vec::new(),
        };
        let x_hat0 = observer.state().x_hat.clone();
        let r0 = &y0 - &model.c * &x_hat0;
        trace.y.push(y0.as_slice());
        trace.x_hat.push(x_hat0.as_slice());
        trace.residuals.push(r0.as_slice());
        trace.sigma.push(observer.innovation_sigma().as_slice());
        trace.p_trace.push(observer.state().p.trace());
        trace.alarm.push(false);

        agents.push(AgentRuntime {
            observer,
            monitor,
            stream,
            r_diag,
            process_slots,
            process_var: DVector::from_vec(process_var),
            process_stream: NoiseStream::new(config.seeds.process, i as u64),
            trace,
        });
    }

    let attacks: Vec<(usize, usize, usize, usize, f64)> = config
        .attacks
        .iter()
        .filter_map(|a| {
            let slot = agents[a.victim.index()]
                .observer
                .model()
                .neighbors
                .iter()
                .position(|&nb| nb == a.source)?;
            let end = a.end.map(|e| config.step_of(e)).unwrap_or(usize::MAX);
            Some((a.victim.index(), slot, config.step_of(a.start), end, a.bias))
        })
        .collect();

    let received = |agent: &AgentModel, x: &DVector<f64>, k: usize| -> Vec<f64> {
        agent
            .neighbors
            .iter()
            .enumerate()
            .map(|(slot, nb)| {
                let bias: f64 = attacks
                    .iter()
                    .filter(|&&(v, s, start, end, _)| {
                        v == agent.agent.index() && s == slot && k >= start && k < end
                    })
                    .map(|a| a.4)
                    .sum();
                x[global.voltage_index(*nb)] + bias
            })
            .collect()
    };

    let mut times = Vec::with_capacity(steps + 1);
    times.push(0.0);
    let mut x_true = Series::with_capacity(n, steps + 1);
    x_true.push(x.as_slice());
    for rt in &mut agents {
        let comms = received(rt.observer.model(), &x, 0);
        rt.trace.comms.push(&comms);
    }

    let mut y_prev: Vec<DVector<f64>> = agents
        .iter()
        .map(|rt| DVector::from_row_slice(rt.trace.y.row(0)))
        .collect();

    for k in 0..steps {
        let u = column(&sources, k);
        let d = column(&loads, k);
        let mut x_next = &plant.a * &x + &plant.b * &u + &plant.e * &d;
        if config.plant_noise.process {
            for rt in agents.iter_mut() {
                let w = sample_noise(&mut rt.process_stream, &rt.process_var)?;
                for (slot, v) in rt.process_slots.iter().zip(w.iter()) {
                    x_next[*slot] += v;
                }
            }
        }

        let mut inputs = Vec::with_capacity(nb);
        for (i, rt) in agents.iter_mut().enumerate() {
            let model = rt.observer.model();
            let y_k1 = measure(
                model,
                &x_next,
                &rt.r_diag,
                &mut rt.stream,
                config.plant_noise.measurement,
            )?;
            let comms = received(model, &x, k);
            let u_x = lift_received_inputs(model, &[u[i]], &comms)?;
            inputs.push(StepInput {
                u_x,
                y_k: std::mem::replace(&mut y_prev[i], y_k1.clone()),
                y_k1,
            });
        }

        let t_next = (k + 1) as f64 * ts;
        let detect = k + 1 >= warmup_steps;
        let step_agent = |(rt, input): (&mut AgentRuntime, StepInput)| -> Result<(), SimError> {
            let agent = rt.trace.agent;
            let res = rt
                .observer
                .step(&input.u_x, &input.y_k, &input.y_k1)
                .map_err(|source| SimError::Observer { agent, source })?;
            let sigma = rt.observer.innovation_sigma();
            if detect {
                let events = rt.monitor.push(t_next, &res.r, &sigma)?;
                rt.trace.events.extend(events);
            } else {
                rt.monitor.observe_warmup(&res.r)?;
            }
            let tr = &mut rt.trace;
            tr.y.push(input.y_k1.as_slice());
            tr.x_hat.push(rt.observer.state().x_hat.as_slice());
            tr.residuals.push(res.r.as_slice());
            tr.sigma.push(sigma.as_slice());
            tr.p_trace.push(rt.observer.state().p.trace());
            tr.alarm.push(rt.monitor.any_latched());
            Ok(())
        };
        if options.parallel_agents {
            agents
                .par_iter_mut()
                .zip(inputs.into_par_iter())
                .try_for_each(step_agent)?;
        } else {
            agents.iter_mut().zip(inputs).try_for_each(step_agent)?;
        }

        x = x_next;
        times.push(t_next);
        x_true.push(x.as_slice());
        for rt in &mut agents {
            let comms = received(rt.observer.model(), &x, k + 1);
            rt.trace.comms.push(&comms);
        }
    }

    let agent_traces: Vec<AgentTrace> = agents.into_iter().map(|rt| rt.trace).collect();
    let mut events: Vec<DetectionEvent> = agent_traces
        .iter()
        .flat_map(|a| a.events.iter().cloned())
        .collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.agent.cmp(&b.agent)));

    Ok(SimulationTrace {
        times,
        state_labels: global.state_labels.clone(),
        x_true,
        agents: agent_traces,
        events,
        warmup_steps,
    })
}

fn measure(
    model: &AgentModel,
    x: &DVector<f64>,
    r_diag: &DVector<f64>,
    stream: &mut NoiseStream,
    noisy: bool,
) -> Result<DVector<f64>, SimError> {
    let clean = &model.c * model.local_state(x);
    if noisy {
        Ok(clean + sample_noise(stream, r_diag)?)
    } else {
        Ok(clean)
    }
}
