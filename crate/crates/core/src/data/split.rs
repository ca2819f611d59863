use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Labeled;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitScheme {
    LeaveOneSubjectOut,
    /// `folds` stratified folds; each split uses one fold for test, the next
    /// fold (cyclically) for validation and the rest for training.
    StratifiedKFold { folds: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub test_subject: Option<String>,
    pub warnings: Vec<String>,
}

pub fn split<T: Labeled>(items: &[T], plan: &SplitPlan) -> Result<Vec<Fold>> {
    match plan.scheme {
        SplitScheme::LeaveOneSubjectOut => loso(items),
        SplitScheme::StratifiedKFold { folds } => stratified(items, folds, plan.seed),
    }
}

fn loso<T: Labeled>(items: &[T]) -> Result<Vec<Fold>> {
    let subjects: Vec<&str> = items.iter().map(Labeled::subject).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 3 {
        return Err(Error::Parameter(format!(
            "leave-one-subject-out needs at least 3 subjects, found {}",
            subjects.len()
        )));
    }
    let classes: BTreeSet<usize> = items.iter().map(Labeled::label).collect();
    let n = subjects.len();
    let mut folds = Vec::with_capacity(n);
    for (id, &test_subject) in subjects.iter().enumerate() {
        let val_subject = subjects[(id + 1) % n];
        let mut fold = Fold {
            id,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            test_subject: Some(test_subject.to_string()),
            warnings: Vec::new(),
        };
        for (i, it) in items.iter().enumerate() {
            match it.subject() {
                s if s == test_subject => fold.test.push(i),
                s if s == val_subject => fold.val.push(i),
                _ => fold.train.push(i),
            }
        }
        let present: BTreeSet<usize> = fold.train.iter().map(|&i| items[i].label()).collect();
        for c in classes.difference(&present) {
            fold.warnings.push(format!("class {c} absent from the training split of fold {id}"));
        }
        folds.push(fold);
    }
    Ok(folds)
}

fn stratified<T: Labeled>(items: &[T], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 3 {
        return Err(Error::Parameter(format!("stratified splitting needs at least 3 folds, got {k}")));
    }
    let classes = items.iter().map(Labeled::label).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, it) in items.iter().enumerate() {
        by_class[it.label()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Parameter(format!(
                "class {c} has {} samples, fewer than the {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            parts[j % k].push(i);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let mut folds = Vec::with_capacity(k);
    for id in 0..k {
        let val_part = (id + 1) % k;
        let mut train: Vec<usize> = (0..k)
            .filter(|&p| p != id && p != val_part)
            .flat_map(|p| parts[p].iter().copied())
            .collect();
        train.sort_unstable();
        folds.push(Fold {
            id,
            train,
            val: parts[val_part].clone(),
            test: parts[id].clone(),
            test_subject: None,
            warnings: Vec::new(),
        });
    }
    Ok(folds)
}
