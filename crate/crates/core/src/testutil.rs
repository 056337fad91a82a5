//! Shared fixtures for unit tests.

use std::sync::Arc;

use rand::Rng;

use crate::data::{
    build_feature_space, Dataset, Event, FeatureSpace, Group, RawRecord, Schema, Task,
};
use crate::fm::tests::random_instance;

/// A space with one attribute per group and exactly `dims` indices in each
/// (observed values plus the OOV slot). Every entry of `dims` must be >= 1.
pub(crate) fn tiny_space(dims: [usize; 3]) -> Arc<FeatureSpace> {
    let names = ["u", "p", "a"];
    let schema = Schema::new(names.iter().zip(Group::ALL).map(|(n, g)| (*n, g)));
    let mut records = Vec::new();
    for (n, d) in names.iter().zip(dims) {
        for v in 0..d.saturating_sub(1) {
            let mut r = RawRecord::new();
            r.insert(n.to_string(), format!("{v:03}"));
            records.push(r);
        }
    }
    let space = build_feature_space(&records, &schema).unwrap();
    assert_eq!([space.user_dims(), space.pub_dims(), space.ad_dims()], dims);
    Arc::new(space)
}

pub(crate) fn dataset_of(
    space: &Arc<FeatureSpace>,
    task: Task,
    n: usize,
    rng: &mut impl Rng,
) -> Dataset {
    let dims = [space.user_dims(), space.pub_dims(), space.ad_dims()];
    let events = (0..n)
        .map(|t| Event {
            timestamp: t as i64,
            instance: random_instance(rng, task, dims),
        })
        .collect();
    Dataset::new(Arc::clone(space), task, events).unwrap()
}
