use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::parse::{BusType, RawBranch, RawBus, RawCase};
use crate::estimation::WlsFactor;
use crate::{Error, Result};

pub const GRID_JSON_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterConfig {
    /// Add a to->from flow meter for every branch after the forward meters.
    pub reverse_flows: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeterKind {
    BranchFlow { branch: usize, from: u32, to: u32 },
    BusInjection { bus: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterDescriptor {
    pub meter_id: usize,
    #[serde(flatten)]
    pub kind: MeterKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Bus positions (indices into `GridModel::bus_ids`).
    pub from: usize,
    pub to: usize,
    pub reactance: f64,
}

/// The DC measurement model of one grid.
///
/// `h_matrix` is `m x n_state`; the slack angle is fixed at zero and its
/// column removed. `noise_sigma` stays unset until calibrated; estimation
/// needs it and the WLS gain factorization is cached when it is set.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub case_name: String,
    pub n_bus: usize,
    pub n_state: usize,
    pub bus_ids: Vec<u32>,
    pub slack: usize,
    pub branches: Vec<Branch>,
    pub meter_config: MeterConfig,
    pub meters: Vec<MeterDescriptor>,
    pub h_matrix: DMatrix<f64>,
    pub base_loads: Vec<f64>,
    noise_sigma: Option<Vec<f64>>,
    state_of_bus: Vec<Option<usize>>,
    susceptance: Arc<Cholesky<f64, Dyn>>,
    wls: Option<Arc<WlsFactor>>,
}

impl GridModel {
    pub fn n_meters(&self) -> usize {
        self.meters.len()
    }

    /// State-vector index of a bus position, `None` for the slack.
    pub fn state_index(&self, bus_pos: usize) -> Option<usize> {
        self.state_of_bus[bus_pos]
    }

    pub fn noise_sigma(&self) -> Option<&[f64]> {
        self.noise_sigma.as_deref()
    }

    pub fn require_noise_sigma(&self) -> Result<&[f64]> {
        self.noise_sigma().ok_or_else(|| {
            Error::Precondition("noise_sigma is not populated; calibrate the grid first".into())
        })
    }

    pub(crate) fn wls(&self) -> Result<&WlsFactor> {
        self.require_noise_sigma()?;
        Ok(self.wls.as_deref().expect("factor cached with sigma"))
    }

    /// Install per-meter standard deviations and factor the WLS gain matrix.
    pub fn set_noise_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.n_meters() {
            return Err(Error::Shape(format!(
                "noise_sigma has length {}, grid has {} meters",
                sigma.len(),
                self.n_meters()
            )));
        }
        if let Some(bad) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Precondition(format!(
                "noise_sigma[{bad}] = {} is not strictly positive",
                sigma[bad]
            )));
        }
        let factor = WlsFactor::new(&self.h_matrix, &sigma)?;
        self.noise_sigma = Some(sigma);
        self.wls = Some(Arc::new(factor));
        Ok(())
    }

    pub fn with_noise_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        self.set_noise_sigma(sigma)?;
        Ok(self)
    }

    /// `H * x` as a plain vector.
    pub fn measure(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_state, "state length");
        let xv = DVector::from_column_slice(x);
        (&self.h_matrix * xv).as_slice().to_vec()
    }

    /// `H^T * v`.
    pub fn measure_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_meters(), "measurement length");
        let vv = DVector::from_column_slice(v);
        self.h_matrix.tr_mul(&vv).as_slice().to_vec()
    }

    /// Solve the DC power-flow equations `B * theta = P` over the non-slack
    /// buses. `injections` is indexed by bus position; the slack entry is
    /// ignored (the slack absorbs the imbalance).
    pub fn solve_dc_flow(&self, injections: &[f64]) -> Vec<f64> {
        assert_eq!(injections.len(), self.n_bus, "injection length");
        let mut rhs = DVector::zeros(self.n_state);
        for (pos, p) in injections.iter().enumerate() {
            if let Some(s) = self.state_of_bus[pos] {
                rhs[s] = *p;
            }
        }
        self.susceptance.solve(&rhs).as_slice().to_vec()
    }

    /// Reduced susceptance matrix `B` (n_state x n_state).
    pub fn susceptance_matrix(&self) -> DMatrix<f64> {
        reduced_susceptance(self.n_state, &self.branches, &self.state_of_bus)
    }
}

fn reduced_susceptance(
    n_state: usize,
    branches: &[Branch],
    state_of_bus: &[Option<usize>],
) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n_state, n_state);
    for br in branches {
        let y = 1.0 / br.reactance;
        let (si, sj) = (state_of_bus[br.from], state_of_bus[br.to]);
        if let Some(i) = si {
            b[(i, i)] += y;
        }
        if let Some(j) = sj {
            b[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (si, sj) {
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
    }
    b
}

/// Assemble the DC measurement model from a parsed case.
pub fn build_grid_model(raw: &RawCase, meter_config: MeterConfig) -> Result<GridModel> {
    let n_bus = raw.buses.len();
    if n_bus < 2 {
        return Err(Error::Model("a grid needs at least two buses".into()));
    }
    let pos_of: HashMap<u32, usize> = raw
        .buses
        .iter()
        .enumerate()
        .map(|(p, b)| (b.id, p))
        .collect();
    let slack = raw
        .buses
        .iter()
        .position(|b| b.bus_type == BusType::Slack)
        .ok_or_else(|| Error::Validation("no slack bus".into()))?;

    let mut state_of_bus = vec![None; n_bus];
    let mut next = 0;
    for (pos, slot) in state_of_bus.iter_mut().enumerate() {
        if pos != slack {
            *slot = Some(next);
            next += 1;
        }
    }
    let n_state = n_bus - 1;

    let mut branches = Vec::with_capacity(raw.branches.len());
    for br in raw.branches.iter().filter(|b| b.in_service) {
        let from = *pos_of
            .get(&br.from)
            .ok_or_else(|| Error::Validation(format!("unknown bus {}", br.from)))?;
        let to = *pos_of
            .get(&br.to)
            .ok_or_else(|| Error::Validation(format!("unknown bus {}", br.to)))?;
        branches.push(Branch {
            from,
            to,
            reactance: br.reactance.abs(),
        });
    }

    // Every bus must reach the slack, otherwise some angles are undetermined.
    let mut adj = vec![Vec::new(); n_bus];
    for b in &branches {
        adj[b.from].push(b.to);
        adj[b.to].push(b.from);
    }
    let mut seen = vec![false; n_bus];
    let mut queue = VecDeque::from([slack]);
    seen[slack] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(orphan) = seen.iter().position(|s| !s) {
        return Err(Error::Model(format!(
            "bus {} is in an island without the slack bus",
            raw.buses[orphan].id
        )));
    }

    let n_branch = branches.len();
    let n_flow = if meter_config.reverse_flows {
        2 * n_branch
    } else {
        n_branch
    };
    let m = n_flow + n_bus;
    let mut h = DMatrix::zeros(m, n_state);
    let mut meters = Vec::with_capacity(m);

    let put_flow = |h: &mut DMatrix<f64>, row: usize, from: usize, to: usize, x: f64| {
        if let Some(i) = state_of_bus[from] {
            h[(row, i)] += 1.0 / x;
        }
        if let Some(j) = state_of_bus[to] {
            h[(row, j)] -= 1.0 / x;
        }
    };

    for (k, b) in branches.iter().enumerate() {
        put_flow(&mut h, k, b.from, b.to, b.reactance);
        meters.push(MeterDescriptor {
            meter_id: k,
            kind: MeterKind::BranchFlow {
                branch: k,
                from: raw.buses[b.from].id,
                to: raw.buses[b.to].id,
            },
        });
    }
    if meter_config.reverse_flows {
        for (k, b) in branches.iter().enumerate() {
            let row = n_branch + k;
            put_flow(&mut h, row, b.to, b.from, b.reactance);
            meters.push(MeterDescriptor {
                meter_id: row,
                kind: MeterKind::BranchFlow {
                    branch: k,
                    from: raw.buses[b.to].id,
                    to: raw.buses[b.from].id,
                },
            });
        }
    }
    // Injection rows: outgoing flows count positive, incoming negative.
    for pos in 0..n_bus {
        let row = n_flow + pos;
        for (k, b) in branches.iter().enumerate() {
            let sign = if b.from == pos {
                1.0
            } else if b.to == pos {
                -1.0
            } else {
                continue;
            };
            for c in 0..n_state {
                let v = h[(k, c)];
                if v != 0.0 {
                    h[(row, c)] += sign * v;
                }
            }
        }
        meters.push(MeterDescriptor {
            meter_id: row,
            kind: MeterKind::BusInjection {
                bus: raw.buses[pos].id,
            },
        });
    }

    let bmat = reduced_susceptance(n_state, &branches, &state_of_bus);
    let susceptance = Cholesky::new(bmat)
        .ok_or_else(|| Error::Observability("susceptance matrix is singular".into()))?;

    Ok(GridModel {
        case_name: raw.name.clone(),
        n_bus,
        n_state,
        bus_ids: raw.buses.iter().map(|b| b.id).collect(),
        slack,
        branches,
        meter_config,
        meters,
        h_matrix: h,
        base_loads: raw.buses.iter().map(|b| b.load_pu).collect(),
        noise_sigma: None,
        state_of_bus,
        susceptance: Arc::new(susceptance),
        wls: None,
    })
}

/// On-disk form of a [`GridModel`] (`grid.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub version: u32,
    pub case_name: String,
    pub n_bus: usize,
    pub meters: Vec<MeterDescriptor>,
    pub h_matrix: Vec<Vec<f64>>,
    pub base_loads: Vec<f64>,
    pub bus_ids: Vec<u32>,
    pub slack_bus: u32,
    pub branches: Vec<GridFileBranch>,
    #[serde(default)]
    pub reverse_flows: bool,
    #[serde(default)]
    pub noise_sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFileBranch {
    pub from: u32,
    pub to: u32,
    pub reactance: f64,
}

impl GridFile {
    pub fn from_model(grid: &GridModel) -> Self {
        GridFile {
            version: GRID_JSON_VERSION,
            case_name: grid.case_name.clone(),
            n_bus: grid.n_bus,
            meters: grid.meters.clone(),
            h_matrix: (0..grid.n_meters())
                .map(|r| grid.h_matrix.row(r).iter().copied().collect())
                .collect(),
            base_loads: grid.base_loads.clone(),
            bus_ids: grid.bus_ids.clone(),
            slack_bus: grid.bus_ids[grid.slack],
            branches: grid
                .branches
                .iter()
                .map(|b| GridFileBranch {
                    from: grid.bus_ids[b.from],
                    to: grid.bus_ids[b.to],
                    reactance: b.reactance,
                })
                .collect(),
            reverse_flows: grid.meter_config.reverse_flows,
            noise_sigma: grid.noise_sigma.clone(),
        }
    }

    /// Rebuild the model and check the stored Jacobian against it.
    pub fn into_model(self) -> Result<GridModel> {
        if self.version != GRID_JSON_VERSION {
            return Err(Error::Validation(format!(
                "unsupported grid.json version {}",
                self.version
            )));
        }
        if self.base_loads.len() != self.bus_ids.len() {
            return Err(Error::Shape("base_loads and bus_ids differ in length".into()));
        }
        let raw = RawCase {
            name: self.case_name.clone(),
            base_mva: 1.0,
            buses: self
                .bus_ids
                .iter()
                .zip(&self.base_loads)
                .map(|(id, load)| RawBus {
                    id: *id,
                    bus_type: if *id == self.slack_bus {
                        BusType::Slack
                    } else {
                        BusType::Pq
                    },
                    load_mw: *load,
                    load_pu: *load,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| RawBranch {
                    from: b.from,
                    to: b.to,
                    reactance: b.reactance,
                    in_service: true,
                })
                .collect(),
        };
        let mut grid = build_grid_model(
            &raw,
            MeterConfig {
                reverse_flows: self.reverse_flows,
            },
        )?;
        let rows_ok = self.h_matrix.len() == grid.n_meters()
            && self.h_matrix.iter().enumerate().all(|(r, row)| {
                row.len() == grid.n_state
                    && row.iter().enumerate().all(|(c, v)| *v == grid.h_matrix[(r, c)])
            });
        if !rows_ok {
            return Err(Error::Validation(
                "h_matrix in grid.json does not match its branch list".into(),
            ));
        }
        if let Some(sigma) = self.noise_sigma {
            grid.set_noise_sigma(sigma)?;
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcase::{bundled_case, parse_matpower_case};

    pub(crate) fn three_bus() -> GridModel {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3 0; 2 1 50; 3 1 30];\nmpc.branch = [1 2 0 0.1; 2 3 0 0.1];\n";
        build_grid_model(&parse_matpower_case(text).unwrap(), MeterConfig::default()).unwrap()
    }

    #[test]
    fn three_bus_jacobian_matches_hand_assembly() {
        let g = three_bus();
        assert_eq!(g.h_matrix.shape(), (5, 2));
        let expect = [
            [-10.0, 0.0],
            [10.0, -10.0],
            // injections: bus 1 = flow(1-2); bus 2 = -flow(1-2) + flow(2-3); bus 3 = -flow(2-3)
            [-10.0, 0.0],
            [20.0, -10.0],
            [-10.0, 10.0],
        ];
        for (r, row) in expect.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(g.h_matrix[(r, c)], *v, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn case14_shape() {
        let g = build_grid_model(&bundled_case("case14").unwrap(), MeterConfig::default()).unwrap();
        assert_eq!(g.h_matrix.shape(), (34, 13));
        assert_eq!(g.n_state, 13);
    }

    #[test]
    fn reverse_flow_meters_negate_forward_rows() {
        let raw = bundled_case("case14").unwrap();
        let g = build_grid_model(&raw, MeterConfig { reverse_flows: true }).unwrap();
        assert_eq!(g.n_meters(), 2 * 20 + 14);
        for k in 0..20 {
            for c in 0..g.n_state {
                assert_eq!(g.h_matrix[(k, c)], -g.h_matrix[(20 + k, c)]);
            }
        }
    }

    #[test]
    fn island_without_slack_is_a_model_error() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3 0; 2 1 50; 3 1 30; 4 1 1];\nmpc.branch = [1 2 0 0.1; 3 4 0 0.1];\n";
        let raw = parse_matpower_case(text).unwrap();
        assert!(matches!(
            build_grid_model(&raw, MeterConfig::default()),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn dc_flow_solves_two_by_two_system() {
        let g = three_bus();
        // B = [[20,-10],[-10,10]], P = (-0.5, -0.3)
        let theta = g.solve_dc_flow(&[0.0, -0.5, -0.3]);
        // Cramer's rule: det = 100
        let t2 = (-0.5 * 10.0 - (-10.0) * -0.3) / 100.0;
        let t3 = (20.0 * -0.3 - (-10.0) * -0.5) / 100.0;
        assert!((theta[0] - t2).abs() < 1e-15);
        assert!((theta[1] - t3).abs() < 1e-15);
    }

    #[test]
    fn sigma_must_be_positive_and_sized() {
        let mut g = three_bus();
        assert!(g.set_noise_sigma(vec![1.0; 4]).is_err());
        assert!(g.set_noise_sigma(vec![1.0, 1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(g.noise_sigma().is_none());
        g.set_noise_sigma(vec![0.1; 5]).unwrap();
        assert_eq!(g.noise_sigma().unwrap().len(), 5);
    }

    #[test]
    fn grid_file_round_trip_preserves_model() {
        let mut g = three_bus();
        g.set_noise_sigma(vec![0.01, 0.02, 0.03, 0.04, 0.05]).unwrap();
        let json = serde_json::to_string(&GridFile::from_model(&g)).unwrap();
        let back: GridFile = serde_json::from_str(&json).unwrap();
        let g2 = back.into_model().unwrap();
        assert_eq!(g2.h_matrix, g.h_matrix);
        assert_eq!(g2.noise_sigma(), g.noise_sigma());
        assert_eq!(g2.base_loads, g.base_loads);
        assert_eq!(g2.meters, g.meters);
    }
}
