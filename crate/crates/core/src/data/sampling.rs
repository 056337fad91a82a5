use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Event, SparseInstance, Task};
use crate::error::{Error, Result};

/// Positive-to-negative ratio; `1:5` means five negatives per positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub positives: u32,
    pub negatives: u32,
}

impl Ratio {
    pub const fn new(positives: u32, negatives: u32) -> Self {
        Ratio {
            positives,
            negatives,
        }
    }

    /// Negatives wanted for `n_pos` positives, rounded half away from zero.
    pub fn negatives_for(&self, n_pos: usize) -> usize {
        let exact = n_pos as f64 * f64::from(self.negatives) / f64::from(self.positives);
        exact.round() as usize
    }

    fn check(&self) -> Result<()> {
        if self.positives == 0 {
            return Err(Error::Config(format!(
                "ratio {self} has a zero positive part"
            )));
        }
        Ok(())
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::new(1, 5)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.positives, self.negatives)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio `{s}` is not of the form P:N"));
        let (p, n) = s.split_once(':').ok_or_else(bad)?;
        let ratio = Ratio::new(
            p.trim().parse().map_err(|_| bad())?,
            n.trim().parse().map_err(|_| bad())?,
        );
        ratio.check()?;
        Ok(ratio)
    }
}

/// A sampling result plus a warning when the request could not be met.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub dataset: Dataset,
    pub warning: Option<String>,
}

impl Sampled {
    fn warn(dataset: Dataset, message: String) -> Sampled {
        log::warn!("{message}");
        Sampled {
            dataset,
            warning: Some(message),
        }
    }
}

/// Keeps every positive and a seeded uniform subset of negatives, without
/// replacement, so that at most `ratio` negatives per positive survive.
/// Instance order is preserved.
pub fn downsample_negatives(d: &Dataset, ratio: Ratio, seed: u64) -> Result<Sampled> {
    ratio.check()?;
    if d.is_empty() {
        return Err(Error::Config("cannot down-sample an empty dataset".into()));
    }
    let n_pos = d.positives();
    if n_pos == 0 {
        return Ok(Sampled::warn(
            d.clone(),
            "no positives to anchor down-sampling; dataset left unchanged".into(),
        ));
    }
    let negatives: Vec<usize> = (0..d.len())
        .filter(|&i| !d.events[i].instance.label)
        .collect();
    let wanted = ratio.negatives_for(n_pos).min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; d.len()];
    for k in index::sample(&mut rng, negatives.len(), wanted) {
        keep[negatives[k]] = true;
    }
    let events = d
        .events
        .iter()
        .zip(&keep)
        .filter(|(e, &k)| e.instance.label || k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Sampled {
        dataset: d.with_events(events),
        warning: None,
    })
}

/// Splits at `boundary`: train holds events strictly before it.
pub fn split_by_time(d: &Dataset, boundary: i64) -> (Dataset, Dataset) {
    let (train, test): (Vec<Event>, Vec<Event>) = d
        .events
        .iter()
        .cloned()
        .partition(|e| e.timestamp < boundary);
    (d.with_events(train), d.with_events(test))
}

/// Adds unobserved (user, publisher) pairs as negatives to a positive-only
/// CF dataset. Users and publishers are the distinct active-index tuples of
/// the positives; each sampled negative borrows the timestamp of a random
/// positive so the time split stays meaningful.
pub fn sample_cf_negatives(positives: &Dataset, ratio: Ratio, seed: u64) -> Result<Sampled> {
    ratio.check()?;
    if positives.task() != Task::Cf {
        return Err(Error::Contract(
            "CF negative sampling needs a CF dataset".into(),
        ));
    }
    if positives.events.iter().any(|e| !e.instance.label) {
        return Err(Error::Contract(
            "CF negative sampling expects positives only".into(),
        ));
    }
    let wanted = ratio.negatives_for(positives.len());
    if wanted == 0 {
        return Ok(Sampled {
            dataset: positives.clone(),
            warning: None,
        });
    }

    let mut users: Vec<&[usize]> = Vec::new();
    let mut pubs: Vec<&[usize]> = Vec::new();
    let mut user_id = std::collections::HashMap::new();
    let mut pub_id = std::collections::HashMap::new();
    let mut observed = HashSet::new();
    for e in &positives.events {
        let u = *user_id
            .entry(e.instance.user_idx.as_slice())
            .or_insert_with(|| {
                users.push(&e.instance.user_idx);
                users.len() - 1
            });
        let p = *pub_id
            .entry(e.instance.pub_idx.as_slice())
            .or_insert_with(|| {
                pubs.push(&e.instance.pub_idx);
                pubs.len() - 1
            });
        observed.insert((u, p));
    }
    let grid = users.len() * pubs.len();
    let available = grid - observed.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warning = None;
    let cells: Vec<(usize, usize)> = if wanted >= available || wanted * 2 > available {
        let complement: Vec<(usize, usize)> = (0..users.len())
            .flat_map(|u| (0..pubs.len()).map(move |p| (u, p)))
            .filter(|cell| !observed.contains(cell))
            .collect();
        if wanted > available {
            warning = Some(format!(
                "requested {wanted} CF negatives but only {available} unobserved pairs exist"
            ));
        }
        let take = wanted.min(available);
        let mut picked: Vec<usize> = index::sample(&mut rng, complement.len(), take).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| complement[k]).collect()
    } else {
        let mut chosen = HashSet::with_capacity(wanted);
        let mut cells = Vec::with_capacity(wanted);
        while cells.len() < wanted {
            let cell = (
                rng.random_range(0..users.len()),
                rng.random_range(0..pubs.len()),
            );
            if !observed.contains(&cell) && chosen.insert(cell) {
                cells.push(cell);
            }
        }
        cells
    };

    let mut events = positives.events.clone();
    events.reserve(cells.len());
    for (u, p) in cells {
        let timestamp = positives.events[rng.random_range(0..positives.len())].timestamp;
        let instance = SparseInstance::new(
            users[u].to_vec(),
            pubs[p].to_vec(),
            Vec::new(),
            false,
            Task::Cf,
        )?;
        events.push(Event {
            timestamp,
            instance,
        });
    }
    let dataset = positives.with_events(events);
    Ok(match warning {
        Some(w) => Sampled::warn(dataset, w),
        None => Sampled {
            dataset,
            warning: None,
        },
    })
}
