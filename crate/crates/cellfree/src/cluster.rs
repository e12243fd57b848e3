//! Pilot assignment and user-centric cooperation clusters.
//!
//! Indices are 0-based throughout: pilots are `0..τ_p`, APs `0..L`, UEs `0..K`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CellFreeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterRecord", into = "ClusterRecord")]
pub struct ClusterState {
    pub num_aps: usize,
    pub num_pilots: usize,
    pub pilot_of: Vec<usize>,
    /// M_k, sorted.
    pub serving_sets: Vec<Vec<usize>>,
    /// D_l, sorted.
    pub served_sets: Vec<Vec<usize>>,
    /// P_k including k, sorted.
    pub pilot_peers: Vec<Vec<usize>>,
    /// S_k including k, sorted.
    pub coservice: Vec<Vec<usize>>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ClusterRecord {
    num_aps: usize,
    num_pilots: usize,
    pilot_of: Vec<usize>,
    serving_sets: Vec<Vec<usize>>,
    #[serde(default)]
    served_sets: Vec<Vec<usize>>,
    #[serde(default)]
    pilot_peers: Vec<Vec<usize>>,
    #[serde(default)]
    coservice: Vec<Vec<usize>>,
}

impl From<ClusterState> for ClusterRecord {
    fn from(s: ClusterState) -> Self {
        ClusterRecord {
            num_aps: s.num_aps,
            num_pilots: s.num_pilots,
            pilot_of: s.pilot_of,
            serving_sets: s.serving_sets,
            served_sets: s.served_sets,
            pilot_peers: s.pilot_peers,
            coservice: s.coservice,
        }
    }
}

impl TryFrom<ClusterRecord> for ClusterState {
    type Error = CellFreeError;
    fn try_from(r: ClusterRecord) -> Result<Self> {
        ClusterState::from_assignment(r.num_aps, r.num_pilots, r.pilot_of, r.serving_sets)
    }
}

impl ClusterState {
    /// Builds every derived set from pilots and serving sets.
    pub fn from_assignment(
        num_aps: usize,
        num_pilots: usize,
        pilot_of: Vec<usize>,
        mut serving_sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let k = pilot_of.len();
        if serving_sets.len() != k {
            return Err(CellFreeError::InvalidInput(
                "one serving set per UE is required".into(),
            ));
        }
        if let Some(&t) = pilot_of.iter().find(|&&t| t >= num_pilots) {
            return Err(CellFreeError::InvalidInput(format!(
                "pilot index {t} out of range for {num_pilots} pilots"
            )));
        }
        let mut mask = vec![false; k * num_aps];
        for (kk, set) in serving_sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(CellFreeError::InvalidInput(format!("UE {kk} has no serving AP")));
            }
            for &l in set.iter() {
                if l >= num_aps {
                    return Err(CellFreeError::InvalidInput(format!("AP index {l} out of range")));
                }
                mask[kk * num_aps + l] = true;
            }
        }
        let served_sets = (0..num_aps)
            .map(|l| (0..k).filter(|&kk| mask[kk * num_aps + l]).collect())
            .collect();
        let pilot_peers = (0..k)
            .map(|kk| (0..k).filter(|&i| pilot_of[i] == pilot_of[kk]).collect())
            .collect();
        let mut state = ClusterState {
            num_aps,
            num_pilots,
            pilot_of,
            serving_sets,
            served_sets,
            pilot_peers,
            coservice: Vec::new(),
            mask,
        };
        state.coservice = compute_coservice_sets(&state);
        Ok(state)
    }

    /// Every AP serves every UE.
    pub fn all_serve_all(num_aps: usize, num_pilots: usize, pilot_of: Vec<usize>) -> Result<Self> {
        let sets = vec![(0..num_aps).collect(); pilot_of.len()];
        Self::from_assignment(num_aps, num_pilots, pilot_of, sets)
    }

    pub fn num_ues(&self) -> usize {
        self.pilot_of.len()
    }

    #[inline]
    pub fn serves(&self, k: usize, l: usize) -> bool {
        self.mask[k * self.num_aps + l]
    }

    pub fn shares_pilot(&self, k: usize, i: usize) -> bool {
        self.pilot_of[k] == self.pilot_of[i]
    }

    /// Position of AP `l` inside M_k, if served.
    pub fn position_in_serving(&self, k: usize, l: usize) -> Option<usize> {
        self.serving_sets[k].binary_search(&l).ok()
    }

    /// Replaces the serving sets, keeping pilots.
    pub fn with_serving_sets(&self, sets: Vec<Vec<usize>>) -> Result<Self> {
        Self::from_assignment(self.num_aps, self.num_pilots, self.pilot_of.clone(), sets)
    }

    /// For AP l and pilot t, the number of served UEs that use t.
    pub fn max_ues_per_pilot_at_any_ap(&self) -> usize {
        let mut worst = 0;
        for set in &self.served_sets {
            let mut count = vec![0usize; self.num_pilots];
            for &k in set {
                count[self.pilot_of[k]] += 1;
            }
            worst = worst.max(count.into_iter().max().unwrap_or(0));
        }
        worst
    }
}

fn argmax_row(beta: &DMatrix<f64>, k: usize, among: impl Iterator<Item = usize>) -> usize {
    let mut best = None;
    for l in among {
        match best {
            None => best = Some(l),
            Some(b) if beta[(k, l)] > beta[(k, b)] => best = Some(l),
            _ => {}
        }
    }
    best.expect("non-empty candidate set")
}

/// Master AP of each UE: the AP with the largest β (lowest index on ties).
pub fn master_aps(beta: &DMatrix<f64>) -> Vec<usize> {
    (0..beta.nrows()).map(|k| argmax_row(beta, k, 0..beta.ncols())).collect()
}

/// Joint greedy pilot assignment and cooperation clustering.
///
/// The first τ_p UEs take pilots `0..τ_p`. Each later UE takes the pilot with
/// the least accumulated gain at its master AP from earlier UEs. Afterwards
/// every AP serves, per pilot, the UE with the largest β on that pilot. A UE
/// left without any serving AP is attached to its master AP with a warning.
pub fn assign_pilots_and_dcc(beta: &DMatrix<f64>, tau_p: usize) -> Result<ClusterState> {
    let (k, l) = (beta.nrows(), beta.ncols());
    if k == 0 || l == 0 || tau_p == 0 {
        return Err(CellFreeError::InvalidInput(
            "need at least one UE, one AP and one pilot".into(),
        ));
    }
    let master = master_aps(beta);
    let mut pilot_of = vec![0usize; k];
    for kk in 0..k {
        if kk < tau_p {
            pilot_of[kk] = kk;
            continue;
        }
        let m = master[kk];
        let mut load = vec![0.0; tau_p];
        for i in 0..kk {
            load[pilot_of[i]] += beta[(i, m)];
        }
        let mut best = 0;
        for t in 1..tau_p {
            if load[t] < load[best] {
                best = t;
            }
        }
        pilot_of[kk] = best;
    }
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for ll in 0..l {
        for t in 0..tau_p {
            let users = (0..k).filter(|&i| pilot_of[i] == t);
            let mut best: Option<usize> = None;
            for i in users {
                match best {
                    None => best = Some(i),
                    Some(b) if beta[(i, ll)] > beta[(b, ll)] => best = Some(i),
                    _ => {}
                }
            }
            if let Some(b) = best {
                sets[b].push(ll);
            }
        }
    }
    for kk in 0..k {
        if sets[kk].is_empty() {
            log::warn!(
                "UE {kk} lost every AP to pilot peers; attaching it to master AP {} (pilot {} is reused there)",
                master[kk],
                pilot_of[kk]
            );
            sets[kk].push(master[kk]);
        }
    }
    ClusterState::from_assignment(l, tau_p, pilot_of, sets)
}

/// M_k = {l : β_kl ≥ Δ} plus the master AP. Δ is linear, not dB.
pub fn threshold_dcc(beta: &DMatrix<f64>, delta: f64) -> Result<Vec<Vec<usize>>> {
    if !(delta > 0.0) {
        return Err(CellFreeError::InvalidInput("threshold must be positive".into()));
    }
    let master = master_aps(beta);
    Ok((0..beta.nrows())
        .map(|k| {
            let mut set: Vec<usize> = (0..beta.ncols()).filter(|&l| beta[(k, l)] >= delta).collect();
            if !set.contains(&master[k]) {
                set.push(master[k]);
                set.sort_unstable();
            }
            set
        })
        .collect())
}

/// S_k = {i : M_i ∩ M_k ≠ ∅}.
pub fn compute_coservice_sets(state: &ClusterState) -> Vec<Vec<usize>> {
    let k = state.num_ues();
    let mut flags = vec![false; k * k];
    for set in &state.served_sets {
        for &a in set {
            for &b in set {
                flags[a * k + b] = true;
            }
        }
    }
    (0..k)
        .map(|kk| (0..k).filter(|&i| i == kk || flags[kk * k + i]).collect())
        .collect()
}

/// The strongest serving AP of each UE.
pub fn small_cell_selection(state: &ClusterState, beta: &DMatrix<f64>) -> Vec<usize> {
    (0..state.num_ues())
        .map(|k| argmax_row(beta, k, state.serving_sets[k].iter().copied()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn few_ues_get_distinct_pilots() {
        let b = beta(&[&[0.3, 0.2], &[0.1, 0.5], &[0.4, 0.4]]);
        let s = assign_pilots_and_dcc(&b, 4).unwrap();
        assert_eq!(s.pilot_of, vec![0, 1, 2]);
        for k in 0..3 {
            assert_eq!(s.pilot_peers[k], vec![k]);
            assert_eq!(s.serving_sets[k], vec![0, 1]);
        }
    }

    #[test]
    fn single_ap_single_pilot_falls_back_to_master() {
        let b = beta(&[&[0.9], &[0.5]]);
        let s = assign_pilots_and_dcc(&b, 1).unwrap();
        assert_eq!(s.pilot_of, vec![0, 0]);
        assert_eq!(s.serving_sets, vec![vec![0], vec![0]]);
        assert_eq!(s.max_ues_per_pilot_at_any_ap(), 2);
    }

    #[test]
    fn two_aps_split_the_pilot() {
        let b = beta(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let s = assign_pilots_and_dcc(&b, 1).unwrap();
        assert_eq!(s.pilot_of, vec![0, 0]);
        assert_eq!(s.serving_sets, vec![vec![0], vec![1]]);
        assert_eq!(s.coservice, vec![vec![0], vec![1]]);
    }

    #[test]
    fn threshold_examples() {
        let b = beta(&[&[0.5, 0.2, 0.05]]);
        assert_eq!(threshold_dcc(&b, 0.1).unwrap(), vec![vec![0, 1]]);
        assert_eq!(threshold_dcc(&b, 1e-12).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(threshold_dcc(&b, 1e12).unwrap(), vec![vec![0]]);
        assert!(threshold_dcc(&b, 0.0).is_err());
    }

    #[test]
    fn coservice_extremes() {
        let s = ClusterState::from_assignment(3, 3, vec![0, 1, 2], vec![vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(s.coservice, vec![vec![0], vec![1], vec![2]]);
        let s = ClusterState::all_serve_all(3, 3, vec![0, 1, 2]).unwrap();
        assert!(s.coservice.iter().all(|c| c == &vec![0, 1, 2]));
    }

    #[test]
    fn small_cell_picks_strongest_serving_ap() {
        let b = beta(&[&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[0.9, 0.1, 0.1, 0.1, 0.1, 0.1]]);
        let s = ClusterState::from_assignment(6, 2, vec![0, 1], vec![vec![1, 4], vec![3]]).unwrap();
        assert_eq!(small_cell_selection(&s, &b), vec![4, 3]);
    }

    #[test]
    fn json_round_trip() {
        let b = beta(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, 0.1], &[0.5, 0.5, 0.5]]);
        let s = assign_pilots_and_dcc(&b, 2).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ClusterState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_serving_set_is_rejected() {
        assert!(ClusterState::from_assignment(2, 1, vec![0], vec![vec![]]).is_err());
    }
}
