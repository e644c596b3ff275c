use super::{ProtocolError, Result, UpdateMessage};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Sample-weighted mean of same-shaped models, in the order given.
///
/// Computed as a running mean (`m += w/W · (p − m)`), so a single update or a
/// set of identical updates comes back bit-for-bit unchanged.
pub fn fed_avg<T: Scalar>(updates: &[(&ModelParams<T>, u64)]) -> Result<ModelParams<T>> {
    let (first, _) = *updates.first().ok_or(ProtocolError::NoUpdates)?;
    for (p, w) in updates {
        if *w == 0 {
            return Err(ProtocolError::ZeroWeight);
        }
        if !p.same_shape(first) {
            return Err(ProtocolError::ShapeMismatch {
                expected_features: first.num_features(),
                expected_classes: first.num_classes(),
                found_features: p.num_features(),
                found_classes: p.num_classes(),
            });
        }
    }

    let mut mean = first.to_flat();
    let mut seen = updates[0].1;
    for (p, w) in &updates[1..] {
        seen += *w;
        let t = T::from_count(*w) / T::from_count(seen);
        for (m, v) in mean.iter_mut().zip(p.iter_flat()) {
            *m = *m + t * (v - *m);
        }
    }
    Ok(ModelParams::from_flat(first.num_features(), first.num_classes(), &mean)?)
}

/// A driver node's average over its group's delivered updates.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalUpdate<T = f64> {
    pub region_id: u32,
    pub params: ModelParams<T>,
    pub total_samples: u64,
    pub contributor_count: u32,
    /// Sample-weighted mean of the contributors' pre-training losses.
    pub loss_before: f64,
    pub loss_after: f64,
}

impl<T: Scalar> RegionalUpdate<T> {
    /// Wraps the regional result for the driver-to-global hop. The region id
    /// travels in the sender field.
    pub fn to_message(&self, round: u32) -> Result<UpdateMessage<T>> {
        let samples = u32::try_from(self.total_samples)
            .map_err(|_| ProtocolError::InvalidMessage("regional sample count exceeds u32".into()))?;
        UpdateMessage::new(round, self.region_id, self.params.clone(), samples, self.loss_before, self.loss_after)
    }
}

/// Averages one region's client updates, weighted by sample count and summed
/// in ascending sender order.
///
/// Messages whose checksum does not match are dropped; their sender ids come
/// back alongside the result so the caller can count them. If nothing valid
/// remains the region has no update this round ([`ProtocolError::NoUpdates`]).
pub fn regional_aggregate<T: Scalar>(
    region_id: u32,
    round: u32,
    updates: &[UpdateMessage<T>],
) -> Result<(RegionalUpdate<T>, Vec<u32>)> {
    let mut rejected = Vec::new();
    let mut valid: Vec<&UpdateMessage<T>> = Vec::with_capacity(updates.len());
    for m in updates {
        if m.round != round {
            return Err(ProtocolError::RoundMismatch {
                expected: round,
                found: m.round,
            });
        }
        if m.checksum_valid() {
            valid.push(m);
        } else {
            rejected.push(m.sender_id);
        }
    }
    if valid.is_empty() {
        return Err(ProtocolError::NoUpdates);
    }
    valid.sort_by_key(|m| m.sender_id);

    let weighted: Vec<(&ModelParams<T>, u64)> = valid.iter().map(|m| (&m.params, m.sample_count as u64)).collect();
    let params = fed_avg(&weighted)?;
    let total_samples: u64 = valid.iter().map(|m| m.sample_count as u64).sum();
    let mean_loss = |f: fn(&UpdateMessage<T>) -> f64| {
        valid.iter().map(|m| f(m) * m.sample_count as f64).sum::<f64>() / total_samples as f64
    };
    Ok((
        RegionalUpdate {
            region_id,
            params,
            total_samples,
            contributor_count: valid.len() as u32,
            loss_before: mean_loss(|m| m.loss_before),
            loss_after: mean_loss(|m| m.loss_after),
        },
        rejected,
    ))
}

/// The fleet-wide model after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel<T = f64> {
    pub round: u32,
    pub params: ModelParams<T>,
    pub num_classes: usize,
}

impl<T: Scalar> GlobalModel<T> {
    pub fn new(round: u32, params: ModelParams<T>) -> Self {
        let num_classes = params.num_classes();
        Self {
            round,
            params,
            num_classes,
        }
    }
}

/// Averages regional results weighted by their sample totals, in ascending
/// region order.
pub fn global_aggregate<T: Scalar>(round: u32, regionals: &[RegionalUpdate<T>]) -> Result<GlobalModel<T>> {
    let mut ordered: Vec<&RegionalUpdate<T>> = regionals.iter().collect();
    ordered.sort_by_key(|r| r.region_id);
    let weighted: Vec<(&ModelParams<T>, u64)> = ordered.iter().map(|r| (&r.params, r.total_samples)).collect();
    let params = fed_avg(&weighted)?;
    Ok(GlobalModel::new(round, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, InitMode};

    fn p(flat: &[f64]) -> ModelParams {
        // d = 1, k = len/2
        let k = flat.len() / 2;
        ModelParams::from_flat(1, k, flat).unwrap()
    }

    fn rand_params(seed: u64) -> ModelParams {
        init_params(3, 2, InitMode::Gaussian { scale: 1.0, seed }).unwrap()
    }

    fn msg(sender: u32, params: ModelParams, n: u32) -> UpdateMessage {
        UpdateMessage::new(4, sender, params, n, 1.0, 0.5).unwrap()
    }

    #[test]
    fn single_update_is_returned_exactly() {
        let w = rand_params(1);
        assert_eq!(fed_avg(&[(&w, 5)]).unwrap(), w);
    }

    #[test]
    fn identical_updates_average_to_themselves() {
        let w = rand_params(2);
        assert_eq!(fed_avg(&[(&w, 3), (&w, 11), (&w, 1)]).unwrap(), w);
    }

    #[test]
    fn weighted_hand_oracle() {
        // ([1, 3] weight 1, [3, 1] weight 3) -> [(1 + 9)/4, (3 + 3)/4]
        let a = ModelParams::from_parts(1, 2, vec![1.0, 3.0], vec![0.0, 0.0]).unwrap();
        let b = ModelParams::from_parts(1, 2, vec![3.0, 1.0], vec![0.0, 0.0]).unwrap();
        let avg = fed_avg(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(avg.weights(), &[2.5, 1.5]);
    }

    #[test]
    fn fed_avg_errors() {
        assert_eq!(fed_avg::<f64>(&[]), Err(ProtocolError::NoUpdates));
        let a = p(&[1.0, 2.0, 3.0, 4.0]);
        let b = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(fed_avg(&[(&a, 1), (&b, 1)]), Err(ProtocolError::ShapeMismatch { .. })));
        assert_eq!(fed_avg(&[(&a, 0)]), Err(ProtocolError::ZeroWeight));
    }

    #[test]
    fn one_client_region() {
        let w = rand_params(3);
        let (r, rejected) = regional_aggregate(2, 4, &[msg(9, w.clone(), 100)]).unwrap();
        assert_eq!(r.params, w);
        assert_eq!(r.total_samples, 100);
        assert_eq!(r.contributor_count, 1);
        assert!(rejected.is_empty());
    }

    #[test]
    fn equal_weights_give_midpoint() {
        let a = rand_params(4);
        let b = rand_params(5);
        let (r, _) = regional_aggregate(0, 4, &[msg(1, a.clone(), 10), msg(2, b.clone(), 10)]).unwrap();
        for ((x, y), m) in a.iter_flat().zip(b.iter_flat()).zip(r.params.iter_flat()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn three_clients_match_flat_weighted_sum() {
        let ps = [rand_params(6), rand_params(7), rand_params(8)];
        let ns = [10u32, 20, 30];
        let msgs: Vec<_> = ps.iter().zip(ns).enumerate().map(|(i, (q, n))| msg(i as u32, q.clone(), n)).collect();
        let (r, _) = regional_aggregate(0, 4, &msgs).unwrap();
        for j in 0..ps[0].scalar_count() {
            let oracle = (10.0 * ps[0].to_flat()[j] + 20.0 * ps[1].to_flat()[j] + 30.0 * ps[2].to_flat()[j]) / 60.0;
            assert!((r.params.to_flat()[j] - oracle).abs() <= 1e-15);
        }
        assert_eq!(r.total_samples, 60);
        assert!((r.loss_before - 1.0).abs() < 1e-15);
    }

    #[test]
    fn corrupted_message_is_dropped_and_reported() {
        let good = msg(1, rand_params(9), 10);
        let mut bad = msg(2, rand_params(10), 10);
        bad.sample_count = 11;
        let (r, rejected) = regional_aggregate(0, 4, &[good.clone(), bad]).unwrap();
        assert_eq!(rejected, vec![2]);
        assert_eq!(r.params, good.params);
        let mut only_bad = msg(3, rand_params(11), 5);
        only_bad.checksum ^= 1;
        assert_eq!(regional_aggregate(0, 4, &[only_bad]), Err(ProtocolError::NoUpdates));
    }

    #[test]
    fn stale_round_is_rejected() {
        let m = msg(1, rand_params(1), 10);
        assert_eq!(
            regional_aggregate(0, 5, &[m]),
            Err(ProtocolError::RoundMismatch { expected: 5, found: 4 })
        );
    }

    #[test]
    fn two_groups_match_flat() {
        let ps = [rand_params(12), rand_params(13), rand_params(14)];
        let msgs: Vec<_> = ps.iter().enumerate().map(|(i, q)| msg(i as u32, q.clone(), 5 + i as u32 * 7)).collect();
        let (g0, _) = regional_aggregate(0, 4, &msgs[..1]).unwrap();
        let (g1, _) = regional_aggregate(1, 4, &msgs[1..]).unwrap();
        let global = global_aggregate(4, &[g1, g0]).unwrap();
        let flat = fed_avg(&[(&ps[0], 5), (&ps[1], 12), (&ps[2], 19)]).unwrap();
        for (a, b) in global.params.iter_flat().zip(flat.iter_flat()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(global.round, 4);
        assert_eq!(global.num_classes, 2);
    }

    #[test]
    fn single_region_passes_through() {
        let w = rand_params(15);
        let (r, _) = regional_aggregate(3, 4, &[msg(0, w.clone(), 10)]).unwrap();
        assert_eq!(global_aggregate(4, &[r]).unwrap().params, w);
        assert_eq!(global_aggregate::<f64>(4, &[]), Err(ProtocolError::NoUpdates));
    }

    #[test]
    fn regional_message_carries_region_and_total() {
        let w = rand_params(16);
        let (r, _) = regional_aggregate(6, 4, &[msg(0, w.clone(), 10), msg(1, w, 15)]).unwrap();
        let m = r.to_message(4).unwrap();
        assert_eq!(m.sender_id, 6);
        assert_eq!(m.sample_count, 25);
        assert!(m.checksum_valid());
    }
}
