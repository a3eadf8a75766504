//! Analytic input gradients vs central finite differences through the full
//! model stack (backbone, heads, objectives). Runs on untrained models; the
//! acceptance suite repeats the check on trained checkpoints.

use mtadv::data::{generate_dataset, DatasetSpec};
use mtadv::image_tensor::ImageTensor;
use mtadv::model::{
    ArchConfig, Backbone, BackboneOrigin, ClipModel, DenseModel, HeadKind,
};
use mtadv::objective::{
    clip_distribution, clip_kl_objective, joint_objective, target_for, task_objective, TextBank,
};
use mtadv::perturb::clamp_valid_field;
use ndarray::Array3;
use rand::Rng;

const FD_H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn tiny_dataset() -> mtadv::data::Dataset {
    generate_dataset(&DatasetSpec {
        train: 10,
        val: 1,
        test: 10,
        seed: 42,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn perturb_image(image: &ImageTensor, seed: u64) -> ImageTensor {
    let mut rng = mtadv::seed::rng_from_seed(seed);
    let noise = Array3::from_shape_simple_fn(image.dim(), || rng.gen_range(-0.02..0.02));
    clamp_valid_field(&(image.data() + &noise))
}

/// Check `grad` against central differences of `f` at `n_coords` random
/// coordinates.
fn check_against_fd(
    f: &mut dyn FnMut(&ImageTensor) -> f64,
    x: &ImageTensor,
    grad: &ndarray::Array3<f64>,
    n_coords: usize,
    seed: u64,
    context: &str,
) {
    let mut rng = mtadv::seed::rng_from_seed(seed);
    let (h, w, c) = x.dim();
    for _ in 0..n_coords {
        let idx = (
            rng.gen_range(0..h),
            rng.gen_range(0..w),
            rng.gen_range(0..c),
        );
        let mut plus = x.data().clone();
        plus[[idx.0, idx.1, idx.2]] += FD_H;
        let mut minus = x.data().clone();
        minus[[idx.0, idx.1, idx.2]] -= FD_H;
        // Values stay within [−h, 1+h]; the model itself never clamps, so
        // the finite difference probes the same smooth function the gradient
        // differentiates.
        let fp = f(&ImageTensor::new(plus.mapv(|v| v.clamp(0.0, 1.0))).unwrap());
        let fm = f(&ImageTensor::new(minus.mapv(|v| v.clamp(0.0, 1.0))).unwrap());
        let fd = (fp - fm) / (2.0 * FD_H);
        let a = grad[[idx.0, idx.1, idx.2]];
        let err = (a - fd).abs();
        let tol = REL_TOL * a.abs().max(fd.abs()) + 1e-10;
        assert!(
            err <= tol,
            "{context}: coordinate {idx:?}: analytic {a:.3e} vs fd {fd:.3e} (err {err:.3e})"
        );
    }
}

#[test]
fn dense_detection_gradient_matches_fd() {
    let arch = ArchConfig::default();
    let model = DenseModel::from_backbone(
        Backbone::new_seeded(&arch, 100),
        HeadKind::Detection,
        BackboneOrigin::Scratch,
        &arch,
        101,
    )
    .unwrap();
    let ds = tiny_dataset();
    for (i, sample) in ds.train.iter().take(3).enumerate() {
        let target = target_for(&model, sample);
        let (_, grad) = task_objective(&model, &sample.image, target).unwrap();
        let mut f = |img: &ImageTensor| task_objective(&model, img, target).unwrap().0;
        check_against_fd(
            &mut f,
            &sample.image,
            &grad,
            8,
            200 + i as u64,
            "detection task objective",
        );
    }
}

#[test]
fn dense_segmentation_gradient_matches_fd() {
    let arch = ArchConfig::default();
    let model = DenseModel::from_backbone(
        Backbone::new_seeded(&arch, 102),
        HeadKind::Segmentation,
        BackboneOrigin::Scratch,
        &arch,
        103,
    )
    .unwrap();
    let ds = tiny_dataset();
    for (i, sample) in ds.train.iter().take(3).enumerate() {
        let target = target_for(&model, sample);
        let (_, grad) = task_objective(&model, &sample.image, target).unwrap();
        let mut f = |img: &ImageTensor| task_objective(&model, img, target).unwrap().0;
        check_against_fd(
            &mut f,
            &sample.image,
            &grad,
            8,
            300 + i as u64,
            "segmentation task objective",
        );
    }
}

#[test]
fn clip_kl_gradient_matches_fd() {
    let arch = ArchConfig::default();
    let model = ClipModel::new_seeded(&arch, mtadv::data::vocabulary(), 104);
    let ds = tiny_dataset();
    let captions: Vec<String> = ds.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&model, captions).unwrap();
    for (i, sample) in ds.test.iter().take(3).enumerate() {
        let p = clip_distribution(&model, &sample.image, &bank, model.temperature()).unwrap();
        // probe away from clean: at the clean image the KL gradient is zero
        let probe = perturb_image(&sample.image, 400 + i as u64);
        let (_, grad) = clip_kl_objective(&model, &p, &probe, &bank).unwrap();
        let mut f = |img: &ImageTensor| clip_kl_objective(&model, &p, img, &bank).unwrap().0;
        check_against_fd(&mut f, &probe, &grad, 8, 500 + i as u64, "clip KL objective");
    }
}

#[test]
fn joint_objective_gradient_matches_fd() {
    let arch = ArchConfig::default();
    let clip = ClipModel::new_seeded(&arch, mtadv::data::vocabulary(), 105);
    let dense = DenseModel::from_backbone(
        Backbone::new_seeded(&arch, 106),
        HeadKind::Detection,
        BackboneOrigin::Scratch,
        &arch,
        107,
    )
    .unwrap();
    let ds = tiny_dataset();
    let captions: Vec<String> = ds.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&clip, captions).unwrap();
    let sample = &ds.test[0];
    let target = target_for(&dense, sample);
    let p = clip_distribution(&clip, &sample.image, &bank, clip.temperature()).unwrap();
    let probe = perturb_image(&sample.image, 600);
    let (_, grad, _) =
        joint_objective(&dense, &clip, &probe, target, &p, &bank, 1.0).unwrap();
    let mut f = |img: &ImageTensor| {
        joint_objective(&dense, &clip, img, target, &p, &bank, 1.0)
            .unwrap()
            .0
    };
    check_against_fd(&mut f, &probe, &grad, 10, 601, "joint objective");
}
