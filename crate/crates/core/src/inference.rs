//! Snapshot-ensemble, rotation-averaged classification.
//!
//! A test image is expanded into its `m` rotated variants (the same angle
//! step used for training augmentation), every ensemble member scores every
//! variant, and the prediction is the argmax of the arithmetic mean of all
//! `members * m` probability vectors.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageproc::{augment, AugmentationPlan, GrayImage};
use crate::network::{self, DropoutConfig, Mode, NetworkParams, NetworkSpec};
use crate::trainer::Snapshot;

/// A set of trained networks sharing one architecture, plus the class table.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<NetworkParams>,
    spec: NetworkSpec,
    class_names: Vec<String>,
}

impl Ensemble {
    /// Builds an ensemble; every member must share the first member's spec,
    /// and the class table must match the output size.
    pub fn new(members: Vec<(NetworkParams, NetworkSpec)>, class_names: Vec<String>) -> Result<Self> {
        let Some((_, spec)) = members.first() else {
            return Err(Error::InvalidInput("ensemble must be non-empty".into()));
        };
        let spec = spec.clone();
        let classes = spec.class_count()?;
        if class_names.len() != classes {
            return Err(Error::ShapeMismatch {
                axis: "class names",
                expected: classes,
                actual: class_names.len(),
            });
        }
        let mut params = Vec::with_capacity(members.len());
        for (p, s) in members {
            if s != spec {
                return Err(Error::InvalidInput(
                    "ensemble members must share one architecture".into(),
                ));
            }
            params.push(p);
        }
        Ok(Ensemble {
            members: params,
            spec,
            class_names,
        })
    }

    pub fn from_snapshots(snapshots: &[Snapshot], class_names: Vec<String>) -> Result<Self> {
        let members: Result<Vec<_>> = snapshots.iter().map(|s| s.params_and_spec()).collect();
        Ensemble::new(members?, class_names)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn member(&self, index: usize) -> &NetworkParams {
        &self.members[index]
    }
}

/// Eval-mode class probabilities of a single network on a preprocessed image.
pub fn predict_single(
    params: &NetworkParams,
    spec: &NetworkSpec,
    image: &GrayImage,
) -> Result<Vec<f64>> {
    let trace = network::forward(
        params,
        spec,
        image,
        &DropoutConfig::disabled(),
        Mode::Eval,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    Ok(trace.probabilities)
}

/// Lowest-index argmax (deterministic tie-break).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Joint classification by every member over every rotated variant: all
/// `members * m` probability vectors are averaged and the argmax (ties to
/// the lowest class index) is the prediction. Returns the class index and
/// the averaged vector.
pub fn ensemble_predict(
    ensemble: &Ensemble,
    image: &GrayImage,
    plan: &AugmentationPlan,
) -> Result<(usize, Vec<f64>)> {
    let variants = augment(image, plan);
    let classes = ensemble.class_names.len();

    // Fan out over (member, variant) pairs; reduce in fixed index order so
    // the average is independent of thread scheduling.
    let mut jobs = Vec::with_capacity(ensemble.members.len() * variants.len());
    for member in &ensemble.members {
        for variant in &variants {
            jobs.push((member, variant));
        }
    }
    let vectors: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|(member, variant)| predict_single(member, &ensemble.spec, variant))
        .collect();

    let mut sum = vec![0.0; classes];
    for v in vectors {
        let v = v?;
        for (s, p) in sum.iter_mut().zip(&v) {
            *s += p;
        }
    }
    let scale = 1.0 / (ensemble.members.len() * variants.len()) as f64;
    for s in &mut sum {
        *s *= scale;
    }
    Ok((argmax(&sum), sum))
}

/// One row of batch-prediction output.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub id: String,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Writes batch predictions as comma-separated text: image id, predicted
/// label name, then one probability column per class.
pub fn write_predictions(
    path: &Path,
    class_names: &[String],
    rows: &[PredictionRow],
) -> Result<()> {
    let mut out = String::from("id,predicted");
    for name in class_names {
        let _ = write!(out, ",p_{name}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.id, class_names[row.predicted]);
        for p in &row.probabilities {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> GrayImage {
        GrayImage::new(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn two_member_ensemble(seed: u64) -> Ensemble {
        let spec = NetworkSpec::reduced();
        let a = init_params(&spec, seed).unwrap();
        let b = init_params(&spec, seed + 1).unwrap();
        Ensemble::new(vec![(a, spec.clone()), (b, spec)], names(3)).unwrap()
    }

    #[test]
    fn single_member_single_variant_equals_predict_single() {
        let spec = NetworkSpec::reduced();
        let params = init_params(&spec, 1).unwrap();
        let ensemble = Ensemble::new(vec![(params.clone(), spec.clone())], names(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random_image(&mut rng, 18);
        let single = predict_single(&params, &spec, &image).unwrap();
        let (predicted, averaged) =
            ensemble_predict(&ensemble, &image, &AugmentationPlan::none()).unwrap();
        assert_eq!(averaged, single);
        assert_eq!(predicted, argmax(&single));
    }

    #[test]
    fn identical_members_average_to_a_single_rotation_average() {
        let spec = NetworkSpec::reduced();
        let params = init_params(&spec, 3).unwrap();
        let plan = AugmentationPlan::new(90).unwrap();
        let double = Ensemble::new(
            vec![(params.clone(), spec.clone()), (params.clone(), spec.clone())],
            names(3),
        )
        .unwrap();
        let single = Ensemble::new(vec![(params, spec)], names(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = random_image(&mut rng, 18);
        let (_, a) = ensemble_predict(&double, &image, &plan).unwrap();
        let (_, b) = ensemble_predict(&single, &image, &plan).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_materialize_and_average() {
        let ensemble = two_member_ensemble(10);
        let plan = AugmentationPlan::new(90).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = random_image(&mut rng, 18);

        // Brute force: materialize all 8 vectors, variant-major, average.
        let variants = augment(&image, &plan);
        let mut all = Vec::new();
        for variant in &variants {
            for m in 0..ensemble.len() {
                all.push(predict_single(ensemble.member(m), ensemble.spec(), variant).unwrap());
            }
        }
        let mut expected = vec![0.0; 3];
        for v in &all {
            for (e, p) in expected.iter_mut().zip(v) {
                *e += p;
            }
        }
        for e in &mut expected {
            *e /= all.len() as f64;
        }

        let (predicted, averaged) = ensemble_predict(&ensemble, &image, &plan).unwrap();
        for (a, b) in averaged.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(predicted, argmax(&expected));
    }

    #[test]
    fn averaged_vector_stays_on_the_simplex() {
        let ensemble = two_member_ensemble(11);
        let plan = AugmentationPlan::new(45).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let image = random_image(&mut rng, 18);
            let (_, averaged) = ensemble_predict(&ensemble, &image, &plan).unwrap();
            let sum: f64 = averaged.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            assert!(averaged.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn member_order_does_not_change_the_result() {
        let spec = NetworkSpec::reduced();
        let a = init_params(&spec, 20).unwrap();
        let b = init_params(&spec, 21).unwrap();
        let fwd = Ensemble::new(
            vec![(a.clone(), spec.clone()), (b.clone(), spec.clone())],
            names(3),
        )
        .unwrap();
        let rev = Ensemble::new(vec![(b, spec.clone()), (a, spec)], names(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = random_image(&mut rng, 18);
        let plan = AugmentationPlan::new(90).unwrap();
        let (pa, va) = ensemble_predict(&fwd, &image, &plan).unwrap();
        let (pb, vb) = ensemble_predict(&rev, &image, &plan).unwrap();
        assert_eq!(pa, pb);
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_probabilities_preserves_argmax() {
        let v = vec![0.2, 0.5, 0.3];
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.3).collect();
        assert_eq!(argmax(&v), argmax(&scaled));
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        assert!(Ensemble::new(vec![], names(3)).is_err());
    }

    #[test]
    fn mismatched_member_specs_are_rejected() {
        let spec_a = NetworkSpec::reduced();
        let mut spec_b = NetworkSpec::reduced();
        spec_b.layers[6] = crate::network::LayerSpec::FullyConnected { neurons: 12 };
        let a = init_params(&spec_a, 1).unwrap();
        let b = init_params(&spec_b, 1).unwrap();
        assert!(Ensemble::new(vec![(a, spec_a), (b, spec_b)], names(3)).is_err());
    }

    #[test]
    fn prediction_rows_render_as_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_predictions(
            &path,
            &names(2),
            &[PredictionRow {
                id: "img1".into(),
                predicted: 1,
                probabilities: vec![0.25, 0.75],
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,predicted,p_class0,p_class1\nimg1,class1,0.25,0.75\n");
    }
}
