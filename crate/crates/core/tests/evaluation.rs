use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dosegraph::dataset::{prepare_cases, Sample};
use dosegraph::encoders::PromptEncoder;
use dosegraph::evaluation::{
    cdvh, cross_validate, dose_on_structure, emit_report, structure_metrics, CvOutcome, MeanSd,
};
use dosegraph::geometry::GridGeometry;
use dosegraph::model::{DoseModel, ModelConfig, ModelRegistry, MLP};
use dosegraph::phantom::{generate_cohort, PhantomConfig};
use dosegraph::structures::STRUCTURES_OF_INTEREST;
use dosegraph::tensor::{Bound, ParameterStore, Tape, Tensor, Var};
use dosegraph::train::TrainConfig;
use dosegraph::volume::{Mask, Volume};
use dosegraph::{Error, Result};

fn grid(origin: [f64; 2], res: f64, z0: f64, dz: f64, dims: [usize; 3]) -> GridGeometry {
    GridGeometry::uniform(origin, res, z0, dz, dims).unwrap()
}

#[test]
fn identical_grids_select_masked_voxels() {
    let g = grid([0.0, 0.0], 2.0, 0.0, 3.0, [3, 3, 2]);
    let mut mask = Mask::filled([3, 3, 2], false);
    for idx in [[0, 0, 0], [1, 2, 1], [2, 1, 0]] {
        *mask.get_mut(idx) = true;
    }
    let dose: Vec<f64> = (0..g.len()).map(|i| i as f64).collect();
    let mut got = dose_on_structure(&dose, &g, &mask, &g).unwrap();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    let expect: Vec<(f64, f64)> = [[0, 0, 0], [1, 2, 1], [2, 1, 0]]
        .iter()
        .map(|&i| (g.linear_index(i) as f64, 12.0))
        .collect();
    let mut expect = expect;
    expect.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(got, expect);
}

#[test]
fn partly_covered_dose_voxel_weighs_only_the_overlap() {
    let image = grid([0.0, 0.0], 1.0, 0.0, 1.0, [2, 1, 1]);
    let dose_g = grid([0.0, 0.0], 2.0, 0.0, 1.0, [1, 1, 1]);
    let mask = Mask::from_vec([2, 1, 1], vec![true, false]).unwrap();
    let got = dose_on_structure(&[7.0], &dose_g, &mask, &image).unwrap();
    assert_eq!(got, vec![(7.0, 1.0)]);
    assert_eq!(dose_g.voxel_box([0, 0, 0]).volume(), 4.0);

    let empty = Mask::filled([2, 1, 1], false);
    assert!(matches!(dose_on_structure(&[7.0], &dose_g, &empty, &image), Err(Error::EmptyStructure)));
}

#[test]
fn weights_match_brute_force_overlap_sums() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = |hi: usize| [0; 3].map(|_| rng.random_range(1..=hi));
        let (di, dd) = (dims(12), dims(6));
        let image = grid(
            [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            rng.random_range(1.0..3.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(1.0..3.0),
            di,
        );
        let dose_g = grid(
            [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
            rng.random_range(2.0..6.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(2.0..6.0),
            dd,
        );
        let mask = Volume::from_vec(di, (0..image.len()).map(|_| rng.random::<f64>() < 0.4).collect()).unwrap();
        let dose: Vec<f64> = (0..dose_g.len()).map(|j| j as f64).collect();
        let got = match dose_on_structure(&dose, &dose_g, &mask, &image) {
            Ok(v) => v,
            Err(Error::EmptyStructure) => Vec::new(),
            Err(e) => panic!("{e}"),
        };
        let mut expect = Vec::new();
        for j in 0..dose_g.len() {
            let db = dose_g.voxel_box(dose_g.grid_index(j));
            let mut w = 0.0;
            for i in 0..image.len() {
                if !mask.as_slice()[i] {
                    continue;
                }
                let ib = image.voxel_box(image.grid_index(i));
                w += (0..3)
                    .map(|k| (ib.max[k].min(db.max[k]) - ib.min[k].max(db.min[k])).max(0.0))
                    .product::<f64>();
            }
            if w > 0.0 {
                expect.push((j as f64, w));
            }
        }
        assert_eq!(got.len(), expect.len(), "seed {seed}");
        for (g, e) in got.iter().zip(&expect) {
            assert_eq!(g.0, e.0);
            assert!((g.1 - e.1).abs() <= 1e-9 * e.1.max(1.0), "seed {seed}: {g:?} vs {e:?}");
        }
    }
}

#[test]
fn metrics_are_scale_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred: Vec<(f64, f64)> = (0..30).map(|_| (rng.random_range(0.0..70.0), rng.random_range(0.1..2.0))).collect();
    let truth: Vec<(f64, f64)> = pred.iter().map(|&(d, w)| (d * 0.9 + 1.0, w)).collect();
    let base = structure_metrics(14, &pred, &truth, 60.0).unwrap();
    let c = 2.5;
    let scaled = |v: &[(f64, f64)]| v.iter().map(|&(d, w)| (d * c, w)).collect::<Vec<_>>();
    let s = structure_metrics(14, &scaled(&pred), &scaled(&truth), 60.0 * c).unwrap();
    assert!((base.norm_dmax_err - s.norm_dmax_err).abs() < 1e-12);
    assert!((base.norm_dmean_err - s.norm_dmean_err).abs() < 1e-12);
}

#[test]
fn cdvh_bounds_the_maximum_dose() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let rx = 60.0;
        let doses: Vec<(f64, f64)> = (0..50).map(|_| (rng.random_range(0.0..70.0), 1.0)).collect();
        let c = cdvh(0, &doses, rx).unwrap();
        let max = doses.iter().map(|d| d.0).fold(0.0, f64::max);
        let last = c.values.iter().rposition(|&v| v > 0.0).unwrap();
        assert!(c.edges_gy[last] <= max);
        if last + 1 < c.edges_gy.len() {
            assert!(c.edges_gy[last + 1] > max);
        }
        assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Always predicts a fixed dose; keeps one unused parameter so the
/// training loop has something to step.
struct Constant {
    cfg: ModelConfig,
    params: ParameterStore,
}

const CONSTANT_DOSE: f64 = 42.0;

impl DoseModel for Constant {
    fn kind(&self) -> &str {
        "constant"
    }
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn params(&self) -> &ParameterStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }
    fn forward(&self, tape: &mut Tape, _: &Bound, sample: &Sample, _: bool, _: &mut ChaCha8Rng) -> Result<Var> {
        let n = sample.num_dose();
        Ok(tape.constant(Tensor::matrix(n, 1, vec![CONSTANT_DOSE; n])?))
    }
}

fn constant_factory(cfg: &ModelConfig, _: u64) -> Result<Box<dyn DoseModel>> {
    let mut params = ParameterStore::new();
    params.add_filled("unused", 1, 0.0)?;
    Ok(Box::new(Constant {
        cfg: cfg.clone(),
        params,
    }))
}

fn small_samples(n: usize) -> Vec<Sample> {
    let base = PhantomConfig {
        image_shape: [8, 8, 4],
        dose_shape: [4, 4, 2],
        ..Default::default()
    };
    let cases = generate_cohort(&base, n, 1, 0.5).unwrap();
    prepare_cases(&cases, 0.3, &PromptEncoder::hashed(64)).unwrap()
}

#[test]
fn constant_predictor_on_constant_targets_scores_zero() {
    let samples: Vec<Sample> = small_samples(10)
        .into_iter()
        .map(|mut s| {
            s.graph.targets = Some(vec![CONSTANT_DOSE; s.num_dose()]);
            s
        })
        .collect();
    let mut registry = ModelRegistry::default();
    registry.register("constant", constant_factory);
    let tcfg = TrainConfig {
        max_epochs: 2,
        ..Default::default()
    };
    let out = cross_validate(&samples, 5, 3, &registry, "constant", &ModelConfig::default(), &tcfg).unwrap();
    assert_eq!(out.folds.len(), 5);
    assert!(out.folds.iter().all(|f| f.mse == 0.0 && f.test_cases.len() == 2));
    let mut tested: Vec<&String> = out.folds.iter().flat_map(|f| &f.test_cases).collect();
    tested.sort();
    tested.dedup();
    assert_eq!(tested.len(), 10);
    assert_eq!(out.summary.mse, MeanSd { mean: 0.0, sd: 0.0 });
}

fn mlp_cv(samples: &[Sample]) -> CvOutcome {
    let tcfg = TrainConfig {
        max_epochs: 3,
        lr_grid: vec![1e-3],
        ..Default::default()
    };
    cross_validate(samples, 5, 11, &ModelRegistry::default(), MLP, &ModelConfig::default(), &tcfg).unwrap()
}

#[test]
fn summary_mean_is_the_fold_average() {
    let out = mlp_cv(&small_samples(10));
    let mean = out.folds.iter().map(|f| f.mse).sum::<f64>() / 5.0;
    assert!((out.summary.mse.mean - mean).abs() < 1e-12);
    assert!(out.folds.iter().all(|f| f.chosen_lr == Some(1e-3) && f.epochs_run == 3));
    assert!(matches!(
        cross_validate(&small_samples(3), 5, 0, &ModelRegistry::default(), MLP, &ModelConfig::default(), &TrainConfig::default()),
        Err(Error::TooFewCases { .. })
    ));
}

#[test]
fn report_files_are_complete_and_reproducible() {
    let samples = small_samples(10);
    let out = mlp_cv(&samples);
    let case = out.folds[0].cases.iter().find(|c| c.predicted.len() == STRUCTURES_OF_INTEREST.len());
    let case = case.expect("a test case with all five structures");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_report(a.path(), &[&out], Some(case)).unwrap();
    emit_report(b.path(), &[&out], Some(case)).unwrap();

    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv") && n.starts_with("cdvh_")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with(".svg")).count(), 5);
    assert!(names.contains(&"metrics.csv".to_string()));
    for n in &names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap(), "{n}");
    }

    let table = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..3], ["fold", "model", "mse"]);
    assert!(header.contains(&"ptv_dmax_err_pct"));
    assert_eq!(table.lines().count(), 1 + 5 + 2);

    let curve = std::fs::read_to_string(a.path().join("cdvh_ptv.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().filter(|l| !l.starts_with('#') && !l.starts_with("dose_gy")).collect();
    assert_eq!(rows.len(), 2 * 121);
    assert!(rows.iter().all(|r| r.split(',').count() == 2));
    let svg = std::fs::read_to_string(a.path().join("cdvh_ptv.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains(">120%<") && svg.contains(">100%<"));
    assert_eq!(svg.matches("<polyline").count(), 2);
}
