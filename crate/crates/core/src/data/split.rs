use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Manifest, Result};

/// Stratified train/validation partition by binary label.
///
/// Each class contributes `round(fraction · count)` rows to the training side,
/// chosen by a seeded shuffle; both sides keep the manifest's row order.
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut to_train = vec![false; manifest.len()];
    for class in [0, 1] {
        let mut members: Vec<usize> = manifest
            .rows()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.to_binary() == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(DataError::Invalid(format!(
                "split leaves one side without class {class} ({} rows of that class, fraction {train_fraction})",
                members.len()
            )));
        }
        for &i in &members[..n_train] {
            to_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (row, &t) in manifest.rows().iter().zip(&to_train) {
        if t { &mut train } else { &mut val }.push(row.clone());
    }
    Ok((Manifest::from_rows(train)?, Manifest::from_rows(val)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label3, ManifestRow};
    use std::collections::HashSet;

    fn manifest(pos: usize, neg: usize) -> Manifest {
        let rows = (0..pos + neg)
            .map(|i| ManifestRow {
                id: format!("r{i}"),
                path: format!("r{i}.png").into(),
                label: if i < pos { Label3::Melanoma } else if i % 2 == 0 { Label3::Nevus } else { Label3::SeborrheicKeratosis },
            })
            .collect();
        Manifest::from_rows(rows).unwrap()
    }

    #[test]
    fn partition_and_determinism() {
        let m = manifest(30, 70);
        let (t, v) = split(&m, 0.8, 3).unwrap();
        assert_eq!(t.len() + v.len(), m.len());
        let ids: HashSet<_> = t.rows().iter().map(|r| &r.id).collect();
        assert!(v.rows().iter().all(|r| !ids.contains(&r.id)));
        assert_eq!(t.counts().positives(), 24);
        assert_eq!(split(&m, 0.8, 3).unwrap(), (t.clone(), v));
        assert_ne!(split(&m, 0.8, 4).unwrap().0, t);
    }

    #[test]
    fn rejects_bad_fraction_and_empty_sides() {
        let m = manifest(3, 10);
        assert!(split(&m, 0.0, 0).is_err());
        assert!(split(&m, 1.0, 0).is_err());
        assert!(split(&manifest(1, 10), 0.8, 0).is_err());
        assert!(split(&manifest(0, 10), 0.5, 0).is_err());
    }
}
