//! Group formation for the fleet: robots are clustered by field position,
//! each group elects a driver node, and a failed driver is replaced.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClientId;
use crate::seed::{rng_for, Stream};

pub const MAX_LLOYD_ITERATIONS: usize = 100;
pub const CONVERGENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("number of groups must be >= 1")]
    InvalidK,
    #[error("{k} groups requested for {sites} sites")]
    TooManyGroups { k: usize, sites: usize },
    #[error("group {0} has no members")]
    EmptyGroup(usize),
    #[error("{0} is not a driver")]
    NotADriver(ClientId),
    #[error("no site registered for {0}")]
    UnknownClient(ClientId),
    #[error("duplicate site for {0}")]
    DuplicateClient(ClientId),
    #[error("site for {0} has a non-finite position")]
    NonFinitePosition(ClientId),
    #[error("assignment invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// Where a robot works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSite {
    pub client_id: ClientId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_hint: Option<u32>,
    pub position: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    pub num_groups: usize,
    pub membership: BTreeMap<ClientId, usize>,
    /// Driver of each group, indexed by group.
    pub drivers: Vec<ClientId>,
    pub centroids: Vec<(f64, f64)>,
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

fn site_index(sites: &[RobotSite]) -> Result<BTreeMap<ClientId, (f64, f64)>> {
    let mut index = BTreeMap::new();
    for s in sites {
        if !(s.position.0.is_finite() && s.position.1.is_finite()) {
            return Err(ClusterError::NonFinitePosition(s.client_id));
        }
        if index.insert(s.client_id, s.position).is_some() {
            return Err(ClusterError::DuplicateClient(s.client_id));
        }
    }
    Ok(index)
}

fn mean_position(points: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in points {
        sx += x;
        sy += y;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

impl ClusterAssignment {
    pub fn members(&self, group: usize) -> Vec<ClientId> {
        self.membership
            .iter()
            .filter(|(_, g)| **g == group)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn group_of(&self, client: ClientId) -> Option<usize> {
        self.membership.get(&client).copied()
    }

    pub fn is_driver(&self, client: ClientId) -> bool {
        self.drivers.contains(&client)
    }

    /// Region id of every member, in the form the drift feed uses.
    pub fn region_map(&self) -> BTreeMap<ClientId, u32> {
        self.membership.iter().map(|(c, g)| (*c, *g as u32)).collect()
    }

    /// Checks that groups are nonempty, every driver belongs to its group and
    /// the bookkeeping vectors agree with `num_groups`.
    pub fn validate(&self) -> Result<()> {
        if self.drivers.len() != self.num_groups || self.centroids.len() != self.num_groups {
            return Err(ClusterError::Invariant(format!(
                "{} groups but {} drivers and {} centroids",
                self.num_groups,
                self.drivers.len(),
                self.centroids.len()
            )));
        }
        let mut sizes = vec![0usize; self.num_groups];
        for (c, &g) in &self.membership {
            if g >= self.num_groups {
                return Err(ClusterError::Invariant(format!("{c} assigned to missing group {g}")));
            }
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(ClusterError::EmptyGroup(g));
        }
        for (g, d) in self.drivers.iter().enumerate() {
            if self.membership.get(d) != Some(&g) {
                return Err(ClusterError::Invariant(format!("driver {d} is not a member of group {g}")));
            }
        }
        Ok(())
    }
}

/// Member of `group` closest to the group centroid; ties go to the lowest id.
pub fn elect_driver(assignment: &ClusterAssignment, group: usize, sites: &[RobotSite]) -> Result<ClientId> {
    let index = site_index(sites)?;
    elect_with_index(assignment, group, &index)
}

fn elect_with_index(
    assignment: &ClusterAssignment,
    group: usize,
    index: &BTreeMap<ClientId, (f64, f64)>,
) -> Result<ClientId> {
    let centroid = *assignment.centroids.get(group).ok_or(ClusterError::EmptyGroup(group))?;
    let mut best: Option<(f64, ClientId)> = None;
    for c in assignment.members(group) {
        let pos = *index.get(&c).ok_or(ClusterError::UnknownClient(c))?;
        let d = sq_dist(pos, centroid);
        // members come in ascending id order, so strict < keeps the lowest id on ties
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c).ok_or(ClusterError::EmptyGroup(group))
}

struct LloydRun {
    labels: Vec<usize>,
    centroids: Vec<(f64, f64)>,
    /// Objective after each assignment step.
    #[cfg_attr(not(test), allow(dead_code))]
    objective: Vec<f64>,
}

fn kmeans_pp_init(points: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(*p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|w| *w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // all remaining points coincide with a center; take the first unused index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(*p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(p, centroids[0]);
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, *c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn repair_empty(points: &[(f64, f64)], labels: &mut [usize], centroids: &mut [(f64, f64)]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("k >= 1");
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = sq_dist(*p, centroids[largest]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let i = far.expect("largest cluster is nonempty");
        labels[i] = empty;
        centroids[empty] = points[i];
    }
}

fn objective(points: &[(f64, f64)], labels: &[usize], centroids: &[(f64, f64)]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(*p, centroids[l])).sum()
}

fn lloyd(points: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> LloydRun {
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut labels = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(*p, &centroids);
        }
        repair_empty(points, &mut labels, &mut centroids);
        trace.push(objective(points, &labels, &centroids));

        let mut moved: f64 = 0.0;
        for (j, c) in centroids.iter_mut().enumerate() {
            let m = mean_position(points.iter().zip(&labels).filter(|(_, l)| **l == j).map(|(p, _)| *p))
                .expect("repair leaves no empty cluster");
            moved = moved.max(sq_dist(*c, m).sqrt());
            *c = m;
        }
        if moved < CONVERGENCE_TOLERANCE {
            break;
        }
    }
    LloydRun {
        labels,
        centroids,
        objective: trace,
    }
}

fn finish(
    membership: BTreeMap<ClientId, usize>,
    centroids: Vec<(f64, f64)>,
    index: &BTreeMap<ClientId, (f64, f64)>,
) -> Result<ClusterAssignment> {
    let mut a = ClusterAssignment {
        num_groups: centroids.len(),
        membership,
        drivers: Vec::new(),
        centroids,
    };
    a.drivers = (0..a.num_groups)
        .map(|g| elect_with_index(&a, g, index))
        .collect::<Result<_>>()?;
    Ok(a)
}

/// Groups the fleet.
///
/// If every site carries a region hint, groups are exactly the hint classes
/// (ordered by hint value) and `k` is ignored. Otherwise positions are
/// clustered with seeded k-means++ / Lloyd iterations.
pub fn form_groups(sites: &[RobotSite], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let index = site_index(sites)?;
    if !sites.is_empty() && sites.iter().all(|s| s.region_hint.is_some()) {
        let hints: BTreeSet<u32> = sites.iter().filter_map(|s| s.region_hint).collect();
        let group_of: BTreeMap<u32, usize> = hints.iter().enumerate().map(|(g, h)| (*h, g)).collect();
        let membership: BTreeMap<ClientId, usize> = sites
            .iter()
            .map(|s| (s.client_id, group_of[&s.region_hint.expect("all hinted")]))
            .collect();
        let centroids = (0..hints.len())
            .map(|g| {
                mean_position(membership.iter().filter(|(_, mg)| **mg == g).map(|(c, _)| index[c]))
                    .expect("hint groups are nonempty")
            })
            .collect();
        return finish(membership, centroids, &index);
    }

    if k < 1 {
        return Err(ClusterError::InvalidK);
    }
    if k > index.len() {
        return Err(ClusterError::TooManyGroups { k, sites: index.len() });
    }
    let ids: Vec<ClientId> = index.keys().copied().collect();
    let points: Vec<(f64, f64)> = index.values().copied().collect();
    let mut rng = rng_for(seed, Stream::Clustering, &[]);
    let run = lloyd(&points, k, &mut rng);
    let membership = ids.into_iter().zip(run.labels).collect();
    finish(membership, run.centroids, &index)
}

/// Removes a failed driver from the fleet. Its group elects a new driver
/// (nearest the survivors' centroid) or, if it was alone, the group is
/// dissolved and higher group indices shift down by one.
pub fn reassign_on_failure(
    assignment: &ClusterAssignment,
    failed_driver: ClientId,
    sites: &[RobotSite],
) -> Result<ClusterAssignment> {
    let group = assignment
        .drivers
        .iter()
        .position(|d| *d == failed_driver)
        .ok_or(ClusterError::NotADriver(failed_driver))?;
    let index = site_index(sites)?;
    let mut next = assignment.clone();
    next.membership.remove(&failed_driver);
    let survivors = next.members(group);
    if survivors.is_empty() {
        next.drivers.remove(group);
        next.centroids.remove(group);
        next.num_groups -= 1;
        for g in next.membership.values_mut() {
            if *g > group {
                *g -= 1;
            }
        }
    } else {
        let positions = survivors
            .iter()
            .map(|c| index.get(c).copied().ok_or(ClusterError::UnknownClient(*c)))
            .collect::<Result<Vec<_>>>()?;
        next.centroids[group] = mean_position(positions.into_iter()).expect("survivors nonempty");
        next.drivers[group] = elect_with_index(&next, group, &index)?;
    }
    Ok(next)
}

/// Seeded default roster: clients spread over `num_fields` Gaussian blobs
/// whose centers sit on a circle; client `i` works in field `i mod num_fields`.
pub fn generate_sites(num_clients: usize, num_fields: usize, seed: u64) -> Vec<RobotSite> {
    let fields = num_fields.max(1);
    let radius = 500.0;
    let spread = Normal::new(0.0, 30.0).expect("positive sigma");
    (0..num_clients)
        .map(|i| {
            let field = i % fields;
            let angle = std::f64::consts::TAU * field as f64 / fields as f64;
            let mut rng = rng_for(seed, Stream::Sites, &[i as u64]);
            let x = radius * angle.cos() + spread.sample(&mut rng);
            let y = radius * angle.sin() + spread.sample(&mut rng);
            RobotSite {
                client_id: ClientId(i as u32),
                region_hint: None,
                position: (x, y),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: u32, x: f64, y: f64) -> RobotSite {
        RobotSite {
            client_id: ClientId(id),
            region_hint: None,
            position: (x, y),
        }
    }

    fn two_clouds() -> Vec<RobotSite> {
        let mut sites = Vec::new();
        let mut rng = rng_for(99, Stream::Sites, &[]);
        let noise = Normal::new(0.0, 3.0).unwrap();
        for i in 0..40u32 {
            let base = if i % 2 == 0 { 0.0 } else { 100.0 };
            sites.push(site(i, base + noise.sample(&mut rng), base + noise.sample(&mut rng)));
        }
        sites
    }

    #[test]
    fn one_group_holds_everyone() {
        let sites = two_clouds();
        let a = form_groups(&sites, 1, 3).unwrap();
        assert_eq!(a.num_groups, 1);
        assert!(a.membership.values().all(|g| *g == 0));
        a.validate().unwrap();
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let sites = vec![site(0, 0.0, 0.0), site(1, 5.0, 1.0), site(2, -3.0, 8.0), site(3, 10.0, 10.0)];
        let a = form_groups(&sites, 4, 1).unwrap();
        a.validate().unwrap();
        let groups: BTreeSet<usize> = a.membership.values().copied().collect();
        assert_eq!(groups.len(), 4);
        for s in &sites {
            let g = a.membership[&s.client_id];
            assert_eq!(a.centroids[g], s.position);
            assert_eq!(a.drivers[g], s.client_id);
        }
    }

    #[test]
    fn separated_clouds_split_exactly() {
        let sites = two_clouds();
        let a = form_groups(&sites, 2, 7).unwrap();
        // brute-force nearest-centroid check plus cloud identity
        for s in &sites {
            let g = a.membership[&s.client_id];
            let other = 1 - g;
            assert!(sq_dist(s.position, a.centroids[g]) <= sq_dist(s.position, a.centroids[other]));
        }
        let g_even = a.membership[&ClientId(0)];
        for s in &sites {
            assert_eq!(a.membership[&s.client_id] == g_even, s.client_id.0 % 2 == 0);
        }
    }

    #[test]
    fn bad_k() {
        let sites = two_clouds();
        assert_eq!(form_groups(&sites, 0, 1), Err(ClusterError::InvalidK));
        assert_eq!(
            form_groups(&sites, 41, 1),
            Err(ClusterError::TooManyGroups { k: 41, sites: 40 })
        );
    }

    #[test]
    fn grouping_is_seeded() {
        let sites = generate_sites(60, 5, 4);
        assert_eq!(form_groups(&sites, 5, 9).unwrap(), form_groups(&sites, 5, 9).unwrap());
    }

    #[test]
    fn objective_never_increases() {
        let sites = generate_sites(90, 6, 2);
        let points: Vec<(f64, f64)> = sites.iter().map(|s| s.position).collect();
        for seed in 0..10 {
            let mut rng = rng_for(seed, Stream::Clustering, &[]);
            let run = lloyd(&points, 6, &mut rng);
            for w in run.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", run.objective);
            }
        }
    }

    #[test]
    fn duplicate_positions_still_fill_every_group() {
        let sites: Vec<RobotSite> = (0..5).map(|i| site(i, 1.0, 1.0)).collect();
        let a = form_groups(&sites, 3, 0).unwrap();
        a.validate().unwrap();
        assert_eq!(a.num_groups, 3);
    }

    #[test]
    fn hints_override_clustering() {
        let sites: Vec<RobotSite> = (0..9)
            .map(|i| RobotSite {
                client_id: ClientId(i),
                region_hint: Some([20, 7, 20][i as usize % 3]),
                position: (i as f64, 0.0),
            })
            .collect();
        let a = form_groups(&sites, 5, 0).unwrap();
        a.validate().unwrap();
        assert_eq!(a.num_groups, 2);
        for s in &sites {
            let expected = if s.region_hint == Some(7) { 0 } else { 1 };
            assert_eq!(a.membership[&s.client_id], expected);
        }
    }

    #[test]
    fn singleton_elects_itself() {
        let sites = vec![site(4, 2.0, 2.0), site(9, 50.0, 50.0)];
        let a = form_groups(&sites, 2, 0).unwrap();
        for g in 0..2 {
            assert_eq!(elect_driver(&a, g, &sites).unwrap(), a.members(g)[0]);
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lower_id() {
        let sites = vec![site(8, -1.0, 0.0), site(3, 1.0, 0.0)];
        let a = form_groups(&sites, 1, 0).unwrap();
        assert_eq!(a.centroids[0], (0.0, 0.0));
        assert_eq!(elect_driver(&a, 0, &sites).unwrap(), ClientId(3));
    }

    #[test]
    fn election_matches_exhaustive_search() {
        let sites = vec![site(0, 0.0, 0.0), site(1, 4.0, 0.0), site(2, 1.0, 3.0)];
        let a = form_groups(&sites, 1, 0).unwrap();
        let c = a.centroids[0];
        let oracle = sites
            .iter()
            .map(|s| (sq_dist(s.position, c), s.client_id))
            .fold((f64::INFINITY, ClientId(u32::MAX)), |best, cur| if cur < best { cur } else { best })
            .1;
        assert_eq!(elect_driver(&a, 0, &sites).unwrap(), oracle);
        assert_eq!(oracle, ClientId(0));
    }

    #[test]
    fn driver_failure_in_pair() {
        let sites = vec![site(0, 0.0, 0.0), site(1, 1.0, 0.0), site(2, 100.0, 100.0)];
        let a = form_groups(&sites, 2, 0).unwrap();
        let g = a.membership[&ClientId(0)];
        let failed = a.drivers[g];
        let b = reassign_on_failure(&a, failed, &sites).unwrap();
        b.validate().unwrap();
        let other = if failed == ClientId(0) { ClientId(1) } else { ClientId(0) };
        assert_eq!(b.drivers[g], other);
        assert!(!b.membership.contains_key(&failed));
    }

    #[test]
    fn driver_failure_in_singleton_dissolves_group() {
        let sites = vec![site(0, 0.0, 0.0), site(1, 1.0, 0.0), site(2, 100.0, 100.0)];
        let a = form_groups(&sites, 2, 0).unwrap();
        let b = reassign_on_failure(&a, ClientId(2), &sites).unwrap();
        b.validate().unwrap();
        assert_eq!(b.num_groups, 1);
        assert_eq!(b.membership.len(), 2);
    }

    #[test]
    fn re_election_over_survivors() {
        let sites = vec![
            site(0, 0.0, 0.0),
            site(1, 2.0, 0.0),
            site(2, 0.0, 2.0),
            site(3, 2.0, 2.0),
            site(4, 1.0, 1.0),
        ];
        let a = form_groups(&sites, 1, 0).unwrap();
        assert_eq!(a.drivers[0], ClientId(4));
        let b = reassign_on_failure(&a, ClientId(4), &sites).unwrap();
        b.validate().unwrap();
        let survivors: Vec<&RobotSite> = sites.iter().filter(|s| s.client_id != ClientId(4)).collect();
        let c = mean_position(survivors.iter().map(|s| s.position)).unwrap();
        let oracle = survivors
            .iter()
            .map(|s| (sq_dist(s.position, c), s.client_id))
            .fold((f64::INFINITY, ClientId(u32::MAX)), |best, cur| if cur < best { cur } else { best })
            .1;
        assert_eq!(b.drivers[0], oracle);
    }

    #[test]
    fn non_driver_failure_is_rejected() {
        let sites = two_clouds();
        let a = form_groups(&sites, 2, 0).unwrap();
        let non_driver = sites.iter().map(|s| s.client_id).find(|c| !a.is_driver(*c)).unwrap();
        assert_eq!(
            reassign_on_failure(&a, non_driver, &sites),
            Err(ClusterError::NotADriver(non_driver))
        );
    }

    #[test]
    fn generated_sites_sit_in_their_fields() {
        let sites = generate_sites(150, 10, 1);
        assert_eq!(sites, generate_sites(150, 10, 1));
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(s.client_id, ClientId(i as u32));
            let angle = std::f64::consts::TAU * (i % 10) as f64 / 10.0;
            let center = (500.0 * angle.cos(), 500.0 * angle.sin());
            // 6 sigma of a 2-d Gaussian with sigma 30
            assert!(sq_dist(s.position, center).sqrt() < 180.0);
        }
        let a = form_groups(&sites, 10, 1).unwrap();
        a.validate().unwrap();
    }
}
