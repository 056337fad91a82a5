//! Feature space, grouped sparse instances and dataset preparation.
//!
//! Every raw categorical attribute belongs to one of three groups (user,
//! publisher, ad). Its values are one-hot encoded into a global index space
//! laid out as `[users | publishers | ads]`, with one reserved
//! out-of-vocabulary slot per attribute.

mod io;
mod sampling;
mod space;

use std::fmt;
use std::sync::Arc;

pub use io::{read_log, write_log, RawLog, RawRow};
pub use sampling::{downsample_negatives, sample_cf_negatives, split_by_time, Ratio, Sampled};
pub use space::{build_feature_space, FeatureSpace, RawRecord, Schema};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    User,
    Publisher,
    Ad,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::User, Group::Publisher, Group::Ad];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::User => "USER",
            Group::Publisher => "PUBLISHER",
            Group::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s.to_ascii_uppercase().as_str() {
            "USER" | "U" => Some(Group::User),
            "PUBLISHER" | "PUB" | "P" => Some(Group::Publisher),
            "AD" | "A" => Some(Group::Ad),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which prediction task an instance, dataset or model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Web browsing prediction: does the user visit the publisher.
    Cf,
    /// Ad click prediction.
    Ctr,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cf => "CF",
            Task::Ctr => "CTR",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_uppercase().as_str() {
            "CF" | "WEB" => Some(Task::Cf),
            "CTR" | "ADS" => Some(Task::Ctr),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled observation: sorted, duplicate-free active indices per group.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseInstance {
    pub user_idx: Vec<usize>,
    pub pub_idx: Vec<usize>,
    pub ad_idx: Vec<usize>,
    pub label: bool,
    pub task: Task,
}

impl SparseInstance {
    /// Builds an instance, sorting each group and rejecting duplicates or a
    /// CF instance carrying ad features.
    pub fn new(
        mut user_idx: Vec<usize>,
        mut pub_idx: Vec<usize>,
        mut ad_idx: Vec<usize>,
        label: bool,
        task: Task,
    ) -> Result<Self> {
        for (name, idx) in [
            ("user", &mut user_idx),
            ("publisher", &mut pub_idx),
            ("ad", &mut ad_idx),
        ] {
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Contract(format!(
                    "duplicate {name} index in instance"
                )));
            }
        }
        if task == Task::Cf && !ad_idx.is_empty() {
            return Err(Error::Contract(
                "CF instance with active ad features".into(),
            ));
        }
        Ok(SparseInstance {
            user_idx,
            pub_idx,
            ad_idx,
            label,
            task,
        })
    }

    pub fn y(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    pub fn group(&self, group: Group) -> &[usize] {
        match group {
            Group::User => &self.user_idx,
            Group::Publisher => &self.pub_idx,
            Group::Ad => &self.ad_idx,
        }
    }

    /// All active indices, users first.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.user_idx
            .iter()
            .chain(&self.pub_idx)
            .chain(&self.ad_idx)
            .copied()
    }

    /// Checks every index against its group's range in `space`.
    pub fn check_ranges(&self, space: &FeatureSpace) -> Result<()> {
        for group in Group::ALL {
            let range = space.range(group);
            if let Some(&bad) = self.group(group).iter().find(|i| !range.contains(i)) {
                return Err(Error::Contract(format!(
                    "{group} index {bad} outside {range:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// Epoch seconds.
    pub timestamp: i64,
    pub instance: SparseInstance,
}

/// A task-tagged sequence of timestamped instances over one feature space.
#[derive(Clone, Debug)]
pub struct Dataset {
    space: Arc<FeatureSpace>,
    task: Task,
    events: Vec<Event>,
}

impl Dataset {
    pub fn new(space: Arc<FeatureSpace>, task: Task, events: Vec<Event>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.instance.task != task) {
            return Err(Error::Contract(format!(
                "{} instance in a {task} dataset",
                e.instance.task
            )));
        }
        Ok(Dataset {
            space,
            task,
            events,
        })
    }

    pub fn empty(space: Arc<FeatureSpace>, task: Task) -> Self {
        Dataset {
            space,
            task,
            events: Vec::new(),
        }
    }

    pub fn space(&self) -> &Arc<FeatureSpace> {
        &self.space
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn instances(&self) -> impl ExactSizeIterator<Item = &SparseInstance> + Clone + '_ {
        self.events.iter().map(|e| &e.instance)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.events.iter().filter(|e| e.instance.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub(crate) fn with_events(&self, events: Vec<Event>) -> Dataset {
        Dataset {
            space: Arc::clone(&self.space),
            task: self.task,
            events,
        }
    }
}

/// Encodes one raw record. Attributes the space has never seen a value for
/// map to that attribute's OOV slot; absent attributes contribute nothing.
pub fn encode_instance(
    raw: &RawRecord,
    label: bool,
    task: Task,
    space: &FeatureSpace,
) -> Result<SparseInstance> {
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (attr, value) in raw {
        let Some(group) = space.group_of_attribute(attr) else {
            return Err(Error::Schema(format!(
                "attribute `{attr}` is not in the feature space"
            )));
        };
        let slot = match group {
            Group::User => 0,
            Group::Publisher => 1,
            Group::Ad => 2,
        };
        groups[slot].push(
            space
                .index_or_oov(attr, value)
                .expect("attribute checked above"),
        );
    }
    let [user_idx, pub_idx, ad_idx] = groups;
    match task {
        Task::Cf if !ad_idx.is_empty() => {
            return Err(Error::Encoding("CF record contains ad attributes".into()))
        }
        Task::Ctr if ad_idx.is_empty() => {
            return Err(Error::Encoding(
                "CTR record lacks every ad attribute".into(),
            ))
        }
        _ => {}
    }
    SparseInstance::new(user_idx, pub_idx, ad_idx, label, task)
}

/// Encodes every row of `log` as a `task` instance.
pub fn encode_log(log: &RawLog, task: Task, space: &Arc<FeatureSpace>) -> Result<Dataset> {
    let events = log
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            encode_instance(&row.values, row.label, task, space)
                .map(|instance| Event {
                    timestamp: row.timestamp,
                    instance,
                })
                .map_err(|e| e.tagged(format!("row {}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Arc::clone(space), task, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pairs: &[(&str, &str)]) -> RawRecord {
        pairs
            .iter()
            .map(|(a, v)| (a.to_string(), v.to_string()))
            .collect()
    }

    fn small_space() -> FeatureSpace {
        let schema = Schema::new([
            ("user_cookie", Group::User),
            ("domain", Group::Publisher),
            ("campaign", Group::Ad),
        ]);
        let records = vec![
            rec(&[("user_cookie", "a"), ("domain", "x"), ("campaign", "c1")]),
            rec(&[("user_cookie", "b"), ("domain", "x")]),
        ];
        build_feature_space(&records, &schema).unwrap()
    }

    #[test]
    fn encode_direct_lookup() {
        let space = small_space();
        let inst = encode_instance(
            &rec(&[("user_cookie", "a"), ("domain", "x")]),
            true,
            Task::Cf,
            &space,
        )
        .unwrap();
        assert_eq!(
            inst.user_idx,
            vec![space.index_of("user_cookie", "a").unwrap()]
        );
        assert_eq!(inst.pub_idx, vec![space.index_of("domain", "x").unwrap()]);
        assert!(inst.ad_idx.is_empty());
        assert!(inst.label);
    }

    #[test]
    fn encode_unseen_value_uses_oov() {
        let space = small_space();
        let inst = encode_instance(
            &rec(&[("user_cookie", "zzz"), ("domain", "x")]),
            false,
            Task::Cf,
            &space,
        )
        .unwrap();
        assert_eq!(inst.user_idx, vec![space.oov_index("user_cookie").unwrap()]);
    }

    #[test]
    fn encode_task_errors() {
        let space = small_space();
        let cf_with_ad = rec(&[("user_cookie", "a"), ("domain", "x"), ("campaign", "c1")]);
        assert!(matches!(
            encode_instance(&cf_with_ad, true, Task::Cf, &space),
            Err(Error::Encoding(_))
        ));
        let ctr_without_ad = rec(&[("user_cookie", "a"), ("domain", "x")]);
        assert!(matches!(
            encode_instance(&ctr_without_ad, true, Task::Ctr, &space),
            Err(Error::Encoding(_))
        ));
        let unknown = rec(&[("browser", "ff")]);
        assert!(matches!(
            encode_instance(&unknown, true, Task::Cf, &space),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn encoding_is_stable() {
        let space = small_space();
        let r = rec(&[("user_cookie", "b"), ("domain", "q"), ("campaign", "c1")]);
        let a = encode_instance(&r, true, Task::Ctr, &space).unwrap();
        let b = encode_instance(&r, true, Task::Ctr, &space).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instance_rejects_duplicates_and_cf_ads() {
        assert!(SparseInstance::new(vec![1, 1], vec![], vec![], true, Task::Cf).is_err());
        assert!(SparseInstance::new(vec![0], vec![1], vec![2], true, Task::Cf).is_err());
        let i = SparseInstance::new(vec![3, 0], vec![5], vec![], true, Task::Cf).unwrap();
        assert_eq!(i.user_idx, vec![0, 3]);
    }

    #[test]
    fn dataset_rejects_mixed_tasks() {
        let space = Arc::new(small_space());
        let inst = SparseInstance::new(vec![0], vec![3], vec![], true, Task::Cf).unwrap();
        let ev = Event {
            timestamp: 0,
            instance: inst,
        };
        assert!(Dataset::new(space, Task::Ctr, vec![ev]).is_err());
    }
}
