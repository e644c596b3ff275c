//! Data layouts for the bundled scenarios.

use rand::seq::SliceRandom;

use super::config::TrainSettings;
use crate::data::{DataError, Partition, PartitionMode};
use crate::model::{train_local, ClientId, DataShard, ModelError, ModelParams};
use crate::seed::{derive_seed, rng_for, Stream};

/// Epochs of centralized training on the stale robots' pooled data before
/// round 1 of the stale-fleet scenario.
pub const WARM_START_EPOCHS: u32 = 20;

/// Robot whose shard lacks [`STRIPPED_CLASS`] in the knowledge-transfer scenario.
pub const TRANSFER_CLIENT: ClientId = ClientId(0);
pub const STRIPPED_CLASS: usize = 7;

/// Two in every five robots (ids ≡ 0, 1 mod 5) are stale.
pub fn is_stale(client: ClientId) -> bool {
    client.0 % 5 < 2
}

/// Classes below this label make up the stale robots' data.
pub fn stale_class_limit(num_classes: usize) -> usize {
    num_classes / 2
}

/// Every robot keeps the same sample count as under an equal split, but
/// stale robots are filled only from the lower half of the classes. Fresh
/// robots share what is left, which covers every class.
pub fn stale_fleet_partition(
    train: &DataShard,
    test: &DataShard,
    num_clients: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    if num_clients == 0 || num_clients > train.len() {
        return Err(DataError::TooManyClients {
            clients: num_clients,
            samples: train.len(),
        });
    }
    let limit = stale_class_limit(num_classes);
    let mut rng = rng_for(seed, Stream::Scenario, &[0]);
    let (mut low, mut high): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| train.label(i) < limit);
    low.shuffle(&mut rng);
    high.shuffle(&mut rng);

    let n = train.len();
    let quota = |c: usize| n / num_clients + usize::from(c < n % num_clients);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let mut next_low = 0;
    for (c, slot) in assigned.iter_mut().enumerate() {
        if is_stale(ClientId(c as u32)) {
            let q = quota(c);
            if next_low + q > low.len() {
                return Err(DataError::InvalidConfig(format!(
                    "not enough samples of classes below {limit} to fill the stale robots"
                )));
            }
            slot.extend_from_slice(&low[next_low..next_low + q]);
            next_low += q;
        }
    }
    let mut rest: Vec<usize> = low[next_low..].iter().chain(&high).copied().collect();
    rest.shuffle(&mut rng);
    let mut cursor = 0;
    for (c, slot) in assigned.iter_mut().enumerate() {
        if !is_stale(ClientId(c as u32)) {
            let q = quota(c);
            slot.extend_from_slice(&rest[cursor..cursor + q]);
            cursor += q;
        }
    }
    debug_assert_eq!(cursor, rest.len());

    Ok(Partition {
        mode: PartitionMode::Equal,
        shards: assigned
            .iter()
            .enumerate()
            .map(|(c, idx)| train.select(idx, ClientId(c as u32)))
            .collect(),
        test_set: test.clone(),
        num_classes,
    })
}

/// Pools the stale robots' shards and trains a model on them centrally.
pub fn warm_start(
    partition: &Partition,
    settings: &TrainSettings,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    let d = partition.test_set.num_features();
    let mut pooled = DataShard::empty(ClientId::POOL, d);
    for shard in partition.shards.iter().filter(|s| is_stale(s.client_id())) {
        for (x, y) in shard.iter() {
            pooled.push(x, y)?;
        }
    }
    let cfg = TrainSettings {
        epochs: WARM_START_EPOCHS,
        ..*settings
    }
    .to_train_config(derive_seed(seed, Stream::Scenario, &[1]));
    let (params, _) = train_local(&ModelParams::zeros(d, partition.num_classes)?, &pooled, &cfg)?;
    Ok(params)
}

/// Drops every sample of `class` from `client`'s shard.
pub fn strip_class(partition: &Partition, client: ClientId, class: usize) -> Partition {
    let mut next = partition.clone();
    if let Some(shard) = next.shards.get_mut(client.0 as usize) {
        let keep: Vec<usize> = (0..shard.len()).filter(|&i| shard.label(i) != class).collect();
        *shard = shard.select(&keep, client);
    }
    next
}
