//! Frozen regression values. Each was computed once from the seeded
//! fixtures and pinned; a change means the numerics changed.

use std::sync::OnceLock;

use sfrg_core::metrics::random_heatmap;
use sfrg_core::model::{
    blur_baseline, gaussian_blur, train_toy, BaselineConfig, CnnArchitecture, DatasetConfig, Scorer, SyntheticDataset,
    ToyCnn, TrainConfig, TrainReport, POSITIVE,
};
use sfrg_core::optimizer::{optimize, total_loss, Method, OptimizerConfig};
use sfrg_core::perturbation::{Mask, PatchGrid, PatchSubset};
use sfrg_core::sag::{beam_search_mse, confidence_of, Evaluator, SearchConfig};
use sfrg_core::xnn::{linear_task, srae_loss, SraeConfig, SraeModel};
use sfrg_core::Image;

const REL_TOL: f64 = 1e-9;

macro_rules! frozen {
    ($got:expr, $want:expr) => {{
        let (got, want): (f64, f64) = ($got, $want);
        assert!(
            (got - want).abs() <= REL_TOL * want.abs().max(1e-12),
            "{} = {got:?}, frozen {want:?}",
            stringify!($got)
        );
    }};
}

fn dataset() -> &'static SyntheticDataset {
    static D: OnceLock<SyntheticDataset> = OnceLock::new();
    D.get_or_init(|| SyntheticDataset::generate(DatasetConfig::default()).unwrap())
}

fn trained() -> &'static (ToyCnn, TrainReport) {
    static M: OnceLock<(ToyCnn, TrainReport)> = OnceLock::new();
    M.get_or_init(|| train_toy(dataset(), &TrainConfig::default(), 7).unwrap())
}

fn first_positive() -> &'static Image {
    &dataset().heldout_positives().next().unwrap().image
}

#[test]
fn dataset_checksums() {
    frozen!(dataset().train[0].image.data().iter().sum(), 199.2522221800125);
    frozen!(first_positive().data().iter().sum(), 250.8833278130949);
}

#[test]
fn untrained_network_probabilities() {
    let cnn = ToyCnn::initialize(CnnArchitecture::default(), 7).unwrap();
    let p = cnn.probabilities(first_positive());
    frozen!(p[0], 0.45009999586492566);
    frozen!(p[1], 0.5499000041350744);
}

#[test]
fn blur_and_random_heatmap() {
    let b = gaussian_blur(first_positive(), 5.0).unwrap();
    frozen!(b.get(10, 10, 0), 0.24034283113322027);
    frozen!(b.data().iter().map(|v| v * v).sum(), 61.61009137844864);
    frozen!(random_heatmap(32, 32, 3).values().iter().sum(), 506.9764889020085);
}

#[test]
fn default_training_run() {
    let (_, report) = trained();
    assert!(report.heldout_accuracy >= 0.95, "{report:?}");
    assert_eq!((report.train_accuracy, report.heldout_accuracy, report.steps), (1.0, 1.0, 1200));
    frozen!(report.final_loss.unwrap(), 0.04892922924851948);
}

#[test]
fn trained_model_explanations() {
    let (model, _) = trained();
    let image = first_positive();
    let base = blur_baseline(model, image, POSITIVE, BaselineConfig::default()).unwrap();
    assert_eq!(base.sigma, 5.0);
    frozen!(base.confidence, 0.024499713529915042);
    frozen!(model.probabilities(image)[POSITIVE], 0.9994959813853777);

    let grid = PatchGrid::for_image(7, 7, image).unwrap();
    let empty = confidence_of(model, image, &base.image, grid, &PatchSubset::empty(49), POSITIVE).unwrap();
    frozen!(empty, 0.024499713529915042);

    let cfg = OptimizerConfig::for_method(Method::Igospp, 7);
    let mask = Mask::new(7, 7, (0..49).map(|k| ((k * 5) % 11) as f64 / 10.0).collect()).unwrap();
    frozen!(total_loss(model, image, &base.image, &mask, POSITIVE, &cfg).unwrap(), 1.9659293950741725);
    let r = optimize(model, image, POSITIVE, &cfg).unwrap();
    frozen!(r.deletion.auc, 0.09311133180770881);
    frozen!(r.insertion.auc, 0.8869106518597);
    frozen!(*r.loss_trace.last().unwrap(), 0.2983621146890306);

    let eval = Evaluator::new(model, image, &base.image, POSITIVE, grid).unwrap();
    let mses = beam_search_mse(&eval, &SearchConfig::default()).unwrap();
    assert_eq!(mses.len(), 40);
    assert_eq!(mses[0].subset.members(), &[39, 40, 47]);
    frozen!(mses[0].confidence, 0.9924853894115279);
}

#[test]
fn srae_loss_at_initialization() {
    let batch = linear_task(50, 6, 0.6, -0.4, 2).unwrap();
    let m = SraeModel::initialize(6, SraeConfig::default(), 3).unwrap();
    let t = srae_loss(&m, &batch).unwrap();
    frozen!(t.faithfulness, 0.36297968558474364);
    frozen!(t.reconstruction, 0.16886264290519945);
    frozen!(t.pullaway, 0.036537687578245666);
    frozen!(t.total, 0.5683800160681888);
}
