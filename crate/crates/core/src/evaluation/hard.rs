//! Hard-subset selection from zero-shot confusions.

use crate::error::{Error, Result};
use crate::model::PromptContext;
use crate::zeroshot::ZeroShot;

use super::LoadedSample;

/// Number of lowest-accuracy classes that seed the subset.
pub const WORST_CLASSES: usize = 5;

/// `confusion[true][predicted]` counts of zero-shot predictions, indexed by
/// the model's class order.
pub fn confusion_matrix(zs: &ZeroShot<'_>, prompt: &PromptContext, samples: &[LoadedSample]) -> Result<Vec<Vec<usize>>> {
    let labels = zs.labels();
    let k = labels.len();
    let mut m = vec![vec![0; k]; k];
    for s in samples {
        let t = labels
            .iter()
            .position(|l| *l == s.label)
            .ok_or_else(|| Error::invalid(format!("sample {}: unknown label {:?}", s.id, s.label)))?;
        let p = zs.predict(prompt, &s.image)?.argmax();
        m[t][p] += 1;
    }
    Ok(m)
}

/// Picks `total_classes` class indices from a confusion matrix: the
/// [`WORST_CLASSES`] lowest-accuracy classes, each followed by the class it
/// is most often mistaken for, then further classes in order of increasing
/// accuracy. Only classes with samples take part; ties go to the lower index.
pub fn hard_subset_from_confusion(confusion: &[Vec<usize>], total_classes: usize) -> Result<Vec<usize>> {
    let present: Vec<usize> = (0..confusion.len())
        .filter(|&c| confusion[c].iter().sum::<usize>() > 0)
        .collect();
    if total_classes == 0 || present.len() < total_classes {
        return Err(Error::invalid(format!(
            "hard subset of {total_classes} classes needs at least that many classes with samples, found {}",
            present.len()
        )));
    }
    let accuracy = |c: usize| confusion[c][c] as f64 / confusion[c].iter().sum::<usize>() as f64;
    let mut by_accuracy = present.clone();
    by_accuracy.sort_by(|&a, &b| accuracy(a).total_cmp(&accuracy(b)).then(a.cmp(&b)));

    let mut chosen: Vec<usize> = Vec::with_capacity(total_classes);
    let push = |c: usize, chosen: &mut Vec<usize>| {
        if chosen.len() < total_classes && !chosen.contains(&c) {
            chosen.push(c);
        }
    };
    for &c in by_accuracy.iter().take(WORST_CLASSES.min(total_classes)) {
        push(c, &mut chosen);
        let partner = present
            .iter()
            .copied()
            .filter(|&j| j != c)
            .max_by(|&a, &b| confusion[c][a].cmp(&confusion[c][b]).then(b.cmp(&a)));
        if let Some(j) = partner {
            push(j, &mut chosen);
        }
    }
    for &c in &by_accuracy {
        push(c, &mut chosen);
    }
    Ok(chosen)
}

/// Label names of the hard subset under zero-shot predictions with `prompt`.
pub fn select_hard_subset(
    zs: &ZeroShot<'_>,
    prompt: &PromptContext,
    samples: &[LoadedSample],
    total_classes: usize,
) -> Result<Vec<String>> {
    let confusion = confusion_matrix(zs, prompt, samples)?;
    let idx = hard_subset_from_confusion(&confusion, total_classes)?;
    Ok(idx.into_iter().map(|i| zs.labels()[i].clone()).collect())
}
