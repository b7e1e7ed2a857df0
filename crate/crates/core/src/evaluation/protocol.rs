use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::signal::{Trial, NUM_CLASSES};
use crate::training::make_minibatches;

pub const NUM_FOLDS: usize = 5;
/// One validation trial per this many non-test trials (train:val = 7:1).
pub const VAL_EVERY: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Pooled cross-subject 5-fold evaluation.
    #[serde(rename = "1")]
    I,
    /// Leave-one-subject-out, zero-training.
    #[serde(rename = "2")]
    II,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "1",
            Scenario::II => "2",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "I" | "i" => Ok(Scenario::I),
            "2" | "II" | "ii" => Ok(Scenario::II),
            other => bail!(Config, "unknown scenario {other:?}, expected 1 or 2"),
        }
    }
}

/// Train / validation / test membership of one run, as trial indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    /// Held-out fold (scenario I) or held-out subject (scenario II).
    pub fold: usize,
    pub held_out_subject: Option<u16>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub scenario: Scenario,
    /// Scenario I fold of every trial; empty for scenario II.
    pub fold_of: Vec<usize>,
    pub runs: Vec<Run>,
}

fn by_subject(trials: &[Trial]) -> BTreeMap<u16, Vec<usize>> {
    let mut m: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        m.entry(t.subject()).or_default().push(i);
    }
    m
}

fn shuffled_classes(trials: &[Trial], idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for &i in idx {
        classes[trials[i].label()].push(i);
    }
    for c in &mut classes {
        c.shuffle(rng);
    }
    classes
}

/// Shuffle each class separately and interleave them, so every prefix is
/// class-balanced to within one trial per class.
fn stratified_order(trials: &[Trial], idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let classes = shuffled_classes(trials, idx, rng);
    let longest = classes.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(idx.len());
    for k in 0..longest {
        for c in &classes {
            if let Some(&i) = c.get(k) {
                out.push(i);
            }
        }
    }
    out
}

/// Split one subject's non-test trials 7:1 into (train, val), stratified.
fn carve_val(trials: &[Trial], idx: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let order = stratified_order(trials, idx, rng);
    let n_val = (order.len() + VAL_EVERY / 2) / VAL_EVERY;
    let (val, train) = order.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Scenario I: stratified 5 folds per subject; run `k` tests on fold `k` of
/// every subject and trains one pooled model on the rest (7:1 train:val).
pub fn plan_scenario1(trials: &[Trial], seed: u64) -> Result<ProtocolPlan> {
    if trials.is_empty() {
        bail!(Protocol, "no trials to plan");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = by_subject(trials);
    let mut fold_of = vec![usize::MAX; trials.len()];
    for (&s, idx) in &subjects {
        for c in 0..NUM_CLASSES {
            let n = idx.iter().filter(|&&i| trials[i].label() == c).count();
            if n < NUM_FOLDS {
                bail!(
                    Protocol,
                    "subject {s} has {n} trials of class {c}, need at least {NUM_FOLDS}"
                );
            }
        }
        // Dealing the class-sorted order round-robin balances both each
        // class and the fold sizes to within one trial.
        let order = shuffled_classes(trials, idx, &mut rng).concat();
        for (k, i) in order.into_iter().enumerate() {
            fold_of[i] = k % NUM_FOLDS;
        }
    }
    let mut runs = Vec::with_capacity(NUM_FOLDS);
    for fold in 0..NUM_FOLDS {
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for idx in subjects.values() {
            let rest: Vec<usize> = idx.iter().copied().filter(|&i| fold_of[i] != fold).collect();
            test.extend(idx.iter().copied().filter(|&i| fold_of[i] == fold));
            let (t, v) = carve_val(trials, &rest, &mut rng);
            train.extend(t);
            val.extend(v);
        }
        runs.push(Run {
            fold,
            held_out_subject: None,
            train: sorted(train),
            val: sorted(val),
            test: sorted(test),
        });
    }
    Ok(ProtocolPlan {
        scenario: Scenario::I,
        fold_of,
        runs,
    })
}

/// Scenario II: one run per subject, testing on all of that subject's
/// trials; validation carved 7:1 from each remaining subject.
pub fn plan_scenario2(trials: &[Trial], seed: u64) -> Result<ProtocolPlan> {
    let subjects = by_subject(trials);
    if subjects.len() < 2 {
        bail!(
            Protocol,
            "leave-one-subject-out needs at least 2 subjects, got {}",
            subjects.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(subjects.len());
    for (fold, (&held, test)) in subjects.iter().enumerate() {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (&s, idx) in &subjects {
            if s == held {
                continue;
            }
            let (t, v) = carve_val(trials, idx, &mut rng);
            train.extend(t);
            val.extend(v);
        }
        runs.push(Run {
            fold,
            held_out_subject: Some(held),
            train: sorted(train),
            val: sorted(val),
            test: test.clone(),
        });
    }
    Ok(ProtocolPlan {
        scenario: Scenario::II,
        fold_of: Vec::new(),
        runs,
    })
}

/// Per-subject stratified 7:1 split of every trial into (train, val), for
/// fitting one model on a whole trial set.
pub fn train_val_split(trials: &[Trial], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if trials.is_empty() {
        bail!(BatchSize, "no trials to split");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_subject(trials).values() {
        let (t, v) = carve_val(trials, idx, &mut rng);
        train.extend(t);
        val.extend(v);
    }
    Ok((sorted(train), sorted(val)))
}

pub fn plan(scenario: Scenario, trials: &[Trial], seed: u64) -> Result<ProtocolPlan> {
    match scenario {
        Scenario::I => plan_scenario1(trials, seed),
        Scenario::II => plan_scenario2(trials, seed),
    }
}

/// Every run partitions all trials into disjoint train / val / test sets.
pub fn verify_partition(plan: &ProtocolPlan, n_trials: usize) -> Result<()> {
    for r in &plan.runs {
        let mut seen = vec![false; n_trials];
        for &i in r.train.iter().chain(&r.val).chain(&r.test) {
            if i >= n_trials {
                bail!(Protocol, "run {} references trial {i} of {n_trials}", r.fold);
            }
            if std::mem::replace(&mut seen[i], true) {
                bail!(Protocol, "run {}: trial {i} is in two sets", r.fold);
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            bail!(Protocol, "run {}: trial {i} is in no set", r.fold);
        }
    }
    Ok(())
}

/// Content hash of a trial: shape plus the bit pattern of its samples.
pub fn trial_hash(t: &Trial) -> u64 {
    let mut h = DefaultHasher::new();
    t.n_c().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Draws `batches` training minibatches per scenario II run and checks that
/// no trial of the held-out subject (by id or content hash) ever appears.
/// Returns the number of batches inspected.
pub fn leakage_check(
    plan: &ProtocolPlan,
    trials: &[Trial],
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inspected = 0;
    for r in &plan.runs {
        let Some(held) = r.held_out_subject else {
            continue;
        };
        let forbidden: HashSet<u64> = trials
            .iter()
            .filter(|t| t.subject() == held)
            .map(trial_hash)
            .collect();
        let mut drawn = 0;
        while drawn < batches {
            for batch in make_minibatches(r.train.len(), batch_size, &mut rng)? {
                if drawn == batches {
                    break;
                }
                for &k in &batch {
                    let t = &trials[r.train[k]];
                    if t.subject() == held || forbidden.contains(&trial_hash(t)) {
                        bail!(
                            Protocol,
                            "held-out subject {held} leaked into a training batch of run {}",
                            r.fold
                        );
                    }
                }
                drawn += 1;
            }
        }
        inspected += drawn;
    }
    Ok(inspected)
}
