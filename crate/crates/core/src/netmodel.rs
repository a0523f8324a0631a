//! Networked DC microgrid model.
//!
//! Each bus is an equivalent microgrid: an output capacitor `C_i`, a source
//! branch `R_i + R_di, L_i` driven by the source voltage `V_gi`, and an
//! unknown load current `I_Li`. Buses are tied by `R_ij, L_ij` lines.
//!
//! The global state vector is ordered `[V_1..V_n, I_g1..I_gn, I_l1..I_lM]`
//! where line currents follow the line list order and flow tail→head.
//! Agents see their incident line currents oriented away from themselves,
//! so the head agent of a line negates it.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::lti::{self, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown agent: bus {0}")]
    InvalidAgent(BusId),

    #[error("droop conversion requires positive inputs: {0}")]
    NonPositiveInput(String),

    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Bus identifier. Stored as a zero-based index, written as the one-based
/// microgrid number (`MG1` is `BusId(0)`, serialized as `1`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusId(pub usize);

impl BusId {
    pub fn from_number(number: usize) -> Option<Self> {
        number.checked_sub(1).map(BusId)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn number(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for BusId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.number() as u64)
    }
}

impl<'de> Deserialize<'de> for BusId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = u64::deserialize(d)?;
        BusId::from_number(n as usize)
            .ok_or_else(|| serde::de::Error::custom("bus numbers start at 1"))
    }
}

/// Droop gain either as explicit ohms or as a per-unit fraction of the bus
/// base impedance `V²_rated / P_rated`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Droop {
    Ohms(f64),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusParams {
    /// Equivalent internal resistance, ohm.
    pub r_internal: f64,
    /// Equivalent internal inductance, henry.
    pub l_internal: f64,
    /// Equivalent output capacitance, farad.
    pub c_output: f64,
    pub droop: Droop,
    /// Nominal source voltage, volt. Also the rated voltage for droop.
    pub v_source_nominal: f64,
    /// Rated power, watt.
    pub rated_power: f64,
}

impl BusParams {
    /// Droop resistance `R_d` in ohms.
    pub fn droop_gain(&self) -> Result<f64, ModelError> {
        match self.droop {
            Droop::Ohms(r) => Ok(r),
            Droop::Fraction(f) => droop_ohms(f, self.v_source_nominal, self.rated_power),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineParams {
    /// Positive current flows from `tail` to `head`.
    pub tail: BusId,
    pub head: BusId,
    pub r_line: f64,
    pub l_line: f64,
}

/// Per-state noise variances applied uniformly to every agent. Voltage and
/// source-current entries map onto the first two local states; the line
/// value is used for each incident line current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateVariances {
    pub bus_voltage: f64,
    pub source_current: f64,
    pub line_current: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub process: StateVariances,
    pub measurement: StateVariances,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            process: StateVariances {
                bus_voltage: 10.0,
                source_current: 10.0,
                line_current: 10.0,
            },
            measurement: StateVariances {
                bus_voltage: 100.0,
                source_current: 100.0,
                line_current: 10.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub buses: Vec<BusParams>,
    pub lines: Vec<LineParams>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl NetworkSpec {
    /// Three identical 12 kV, 50 MW microgrids on a fully meshed network with
    /// the equivalent parameters of the reference case study.
    pub fn three_bus_reference() -> Self {
        let bus = BusParams {
            r_internal: 0.05,
            l_internal: 3e-3,
            c_output: 10e-6,
            droop: Droop::Fraction(0.05),
            v_source_nominal: 12_000.0,
            rated_power: 50e6,
        };
        let line = |tail, head| LineParams {
            tail: BusId(tail),
            head: BusId(head),
            r_line: 0.1,
            l_line: 0.5e-3,
        };
        NetworkSpec {
            buses: vec![bus.clone(), bus.clone(), bus],
            lines: vec![line(0, 1), line(0, 2), line(1, 2)],
            noise: NoiseSpec::default(),
        }
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_bus() + self.n_line()
    }

    pub fn contains(&self, bus: BusId) -> bool {
        bus.index() < self.n_bus()
    }

    /// Lines incident to `bus` in line-list order, with the sign that orients
    /// each one away from `bus`.
    pub fn incident_lines(&self, bus: BusId) -> Vec<(usize, BusId, f64)> {
        self.lines
            .iter()
            .enumerate()
            .filter_map(|(l, line)| {
                if line.tail == bus {
                    Some((l, line.head, 1.0))
                } else if line.head == bus {
                    Some((l, line.tail, -1.0))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn are_neighbors(&self, a: BusId, b: BusId) -> bool {
        self.lines
            .iter()
            .any(|l| (l.tail == a && l.head == b) || (l.tail == b && l.head == a))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.buses.is_empty() {
            return Err(ModelError::InvalidTopology("network has no buses".into()));
        }
        for (i, bus) in self.buses.iter().enumerate() {
            let n = i + 1;
            let ok = bus.r_internal >= 0.0
                && bus.l_internal > 0.0
                && bus.c_output > 0.0
                && bus.v_source_nominal.is_finite()
                && bus.rated_power.is_finite();
            if !ok {
                return Err(ModelError::InvalidParameter(format!(
                    "bus {n}: require r_internal >= 0, l_internal > 0, c_output > 0"
                )));
            }
            let rd = bus.droop_gain()?;
            if !(rd >= 0.0 && rd.is_finite()) {
                return Err(ModelError::InvalidParameter(format!(
                    "bus {n}: droop gain must be non-negative"
                )));
            }
        }
        let mut seen = HashSet::new();
        for (l, line) in self.lines.iter().enumerate() {
            if !self.contains(line.tail) || !self.contains(line.head) {
                return Err(ModelError::InvalidTopology(format!(
                    "line {l} references a bus that does not exist"
                )));
            }
            if line.tail == line.head {
                return Err(ModelError::InvalidTopology(format!(
                    "line {l} is a self-loop on bus {}",
                    line.tail
                )));
            }
            let key = (line.tail.min(line.head), line.tail.max(line.head));
            if !seen.insert(key) {
                return Err(ModelError::InvalidTopology(format!(
                    "line {l} duplicates the connection {}-{}",
                    key.0, key.1
                )));
            }
            if !(line.r_line >= 0.0 && line.l_line > 0.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "line {l}: require r_line >= 0 and l_line > 0"
                )));
            }
        }
        Ok(())
    }
}

/// Per-unit droop to ohms on the bus base impedance.
pub fn droop_ohms(droop_fraction: f64, v_rated: f64, p_rated: f64) -> Result<f64, ModelError> {
    if droop_fraction == 0.0 && v_rated > 0.0 && p_rated > 0.0 {
        return Ok(0.0);
    }
    if !(droop_fraction > 0.0 && v_rated > 0.0 && p_rated > 0.0) {
        return Err(ModelError::NonPositiveInput(format!(
            "droop={droop_fraction}, v_rated={v_rated}, p_rated={p_rated}"
        )));
    }
    Ok(droop_fraction * v_rated * v_rated / p_rated)
}

/// Continuous-time model of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub a_c: DMatrix<f64>,
    /// Columns are the source voltages `V_g1..V_gn`.
    pub b_c: DMatrix<f64>,
    /// Columns are the load currents `I_L1..I_Ln`.
    pub e_c: DMatrix<f64>,
    pub state_labels: Vec<String>,
    pub n_bus: usize,
    pub n_line: usize,
}

impl GlobalModel {
    pub fn dim(&self) -> usize {
        self.a_c.nrows()
    }

    pub fn voltage_index(&self, bus: BusId) -> usize {
        bus.index()
    }

    pub fn source_index(&self, bus: BusId) -> usize {
        self.n_bus + bus.index()
    }

    pub fn line_index(&self, line: usize) -> usize {
        2 * self.n_bus + line
    }

    /// Equilibrium `x` with `A·x + B·u + E·d = 0` for constant inputs.
    pub fn equilibrium(
        &self,
        sources: &DVector<f64>,
        loads: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let rhs = -(&self.b_c * sources + &self.e_c * loads);
        self.a_c.clone().lu().solve(&rhs)
    }
}

fn line_label(from: BusId, to: BusId) -> String {
    format!("I{from}_{to}")
}

pub fn build_global(spec: &NetworkSpec) -> Result<GlobalModel, ModelError> {
    spec.validate()?;
    let nb = spec.n_bus();
    let nl = spec.n_line();
    let n = spec.state_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, nb);
    let mut e = DMatrix::zeros(n, nb);
    let mut labels = Vec::with_capacity(n);

    for (i, bus) in spec.buses.iter().enumerate() {
        let (v, g) = (i, nb + i);
        let rd = bus.droop_gain()?;
        a[(v, g)] = 1.0 / bus.c_output;
        e[(v, i)] = -1.0 / bus.c_output;
        a[(g, v)] = -1.0 / bus.l_internal;
        a[(g, g)] = -(rd + bus.r_internal) / bus.l_internal;
        b[(g, i)] = 1.0 / bus.l_internal;
    }
    for l in 0..nb {
        labels.push(format!("V{}", BusId(l)));
    }
    for l in 0..nb {
        labels.push(format!("Ig{}", BusId(l)));
    }
    for (l, line) in spec.lines.iter().enumerate() {
        let k = 2 * nb + l;
        let (t, h) = (line.tail.index(), line.head.index());
        a[(t, k)] -= 1.0 / spec.buses[t].c_output;
        a[(h, k)] += 1.0 / spec.buses[h].c_output;
        a[(k, t)] = 1.0 / line.l_line;
        a[(k, h)] = -1.0 / line.l_line;
        a[(k, k)] = -line.r_line / line.l_line;
        labels.push(line_label(line.tail, line.head));
    }

    Ok(GlobalModel {
        a_c: a,
        b_c: b,
        e_c: e,
        state_labels: labels,
        n_bus: nb,
        n_line: nl,
    })
}

/// Neighbor voltage entering an agent's dynamics through one incident line.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub neighbor: BusId,
    /// Continuous coupling column `A_cij`.
    pub column: DVector<f64>,
    pub line: usize,
    /// +1 when the agent is the line's tail, −1 when it is the head.
    pub sign: f64,
    /// Local state row of the oriented line current.
    pub local_row: usize,
}

/// One agent's continuous model with neighbor voltages as extra inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModelContinuous {
    pub agent: BusId,
    pub a_ci: DMatrix<f64>,
    pub b_ci: DMatrix<f64>,
    pub e_ci: DMatrix<f64>,
    pub c_ci: DMatrix<f64>,
    pub couplings: Vec<Coupling>,
    /// Diagonal of the process noise covariance.
    pub q_i: DVector<f64>,
    /// Diagonal of the measurement noise covariance.
    pub r_i: DVector<f64>,
    pub state_labels: Vec<String>,
    /// For each local state: global state index and orientation sign.
    pub embedding: Vec<(usize, f64)>,
}

impl AgentModelContinuous {
    pub fn n(&self) -> usize {
        self.a_ci.nrows()
    }

    pub fn m(&self) -> usize {
        self.c_ci.nrows()
    }

    /// `[B_ci | A_ci1 .. A_ciN]`.
    pub fn b_xi(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.b_ci.ncols();
        let mut bx = DMatrix::zeros(n, p + self.couplings.len());
        bx.view_mut((0, 0), (n, p)).copy_from(&self.b_ci);
        for (j, c) in self.couplings.iter().enumerate() {
            bx.set_column(p + j, &c.column);
        }
        bx
    }

    /// Local oriented state extracted from a global state vector.
    pub fn local_state(&self, global: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.embedding.len(),
            self.embedding.iter().map(|&(g, s)| s * global[g]),
        )
    }

    pub fn discretize(&self, ts: f64) -> Result<AgentModel, ModelError> {
        let d = lti::discretize_zoh(&self.a_ci, &self.b_xi(), &self.e_ci, ts)?;
        Ok(AgentModel {
            agent: self.agent,
            a: d.a,
            b_x: d.b,
            e: d.e,
            c: self.c_ci.clone(),
            q: DMatrix::from_diagonal(&self.q_i),
            r: DMatrix::from_diagonal(&self.r_i),
            local_inputs: self.b_ci.ncols(),
            neighbors: self.couplings.iter().map(|c| c.neighbor).collect(),
            coupling_rows: self.couplings.iter().map(|c| c.local_row).collect(),
            state_labels: self.state_labels.clone(),
            embedding: self.embedding.clone(),
            ts,
        })
    }
}

/// Discrete-time agent model `x⁺ = A·x + B_x·u_x + E·d + w`, `y = C·x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub agent: BusId,
    pub a: DMatrix<f64>,
    pub b_x: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Number of leading `B_x` columns that are local inputs.
    pub local_inputs: usize,
    /// Neighbor order of the remaining `B_x` columns.
    pub neighbors: Vec<BusId>,
    /// Local row of the line current shared with each neighbor.
    pub coupling_rows: Vec<usize>,
    pub state_labels: Vec<String>,
    pub embedding: Vec<(usize, f64)>,
    pub ts: f64,
}

impl AgentModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn local_state(&self, global: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.embedding.len(),
            self.embedding.iter().map(|&(g, s)| s * global[g]),
        )
    }
}

pub fn partition_agent(
    global: &GlobalModel,
    spec: &NetworkSpec,
    agent: BusId,
) -> Result<AgentModelContinuous, ModelError> {
    if !spec.contains(agent) {
        return Err(ModelError::InvalidAgent(agent));
    }
    let incident = spec.incident_lines(agent);
    let n = 2 + incident.len();

    // Local index → (global index, sign).
    let mut embedding = vec![
        (global.voltage_index(agent), 1.0),
        (global.source_index(agent), 1.0),
    ];
    embedding.extend(incident.iter().map(|&(l, _, s)| (global.line_index(l), s)));

    let mut a = DMatrix::zeros(n, n);
    for (r, &(gr, sr)) in embedding.iter().enumerate() {
        for (c, &(gc, sc)) in embedding.iter().enumerate() {
            a[(r, c)] = sr * sc * global.a_c[(gr, gc)];
        }
    }
    let b = DMatrix::from_fn(n, 1, |r, _| {
        let (g, s) = embedding[r];
        s * global.b_c[(g, agent.index())]
    });
    let e = DMatrix::from_fn(n, 1, |r, _| {
        let (g, s) = embedding[r];
        s * global.e_c[(g, agent.index())]
    });

    let couplings = incident
        .iter()
        .enumerate()
        .map(|(j, &(l, neighbor, sign))| {
            let local_row = 2 + j;
            let mut column = DVector::zeros(n);
            let (g, s) = embedding[local_row];
            column[local_row] = s * global.a_c[(g, global.voltage_index(neighbor))];
            Coupling {
                neighbor,
                column,
                line: l,
                sign,
                local_row,
            }
        })
        .collect::<Vec<_>>();

    let mut labels = vec![format!("V{agent}"), format!("Ig{agent}")];
    labels.extend(incident.iter().map(|&(_, nb, _)| line_label(agent, nb)));

    let noise = &spec.noise;
    let diag = |v: &StateVariances| {
        let mut d = vec![v.bus_voltage, v.source_current];
        d.extend(std::iter::repeat_n(v.line_current, incident.len()));
        DVector::from_vec(d)
    };

    Ok(AgentModelContinuous {
        agent,
        a_ci: a,
        b_ci: b,
        e_ci: e,
        c_ci: DMatrix::identity(n, n),
        couplings,
        q_i: diag(&noise.process),
        r_i: diag(&noise.measurement),
        state_labels: labels,
        embedding,
    })
}
