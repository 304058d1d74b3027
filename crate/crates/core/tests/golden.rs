//! Regression fixtures: raw heatmaps for the three methods on the seed-42
//! tiny model and a fixed synthetic image, frozen from the first verified
//! build. Regenerate deliberately with CAMFORGE_REGEN_GOLDEN=1 after an
//! intentional numeric change.

use std::path::PathBuf;

use camforge_core::cam::{attribute, AttributionRequest, Method};
use camforge_core::eval::fmt_f64;
use camforge_core::nn::{generate_toy_model, synth_image, ScoreMode, ScoreSpec, ToyArch};
use camforge_core::tensor::Tensor;

const LAYER: usize = 4;
const IMAGE_SEED: u64 = 4242;
const CLASS: usize = 3;

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn compute(method: Method) -> Tensor<f64> {
    let model = generate_toy_model::<f64>(42, ToyArch::Tiny);
    let image = synth_image::<f64>(IMAGE_SEED, model.input_shape());
    let request = AttributionRequest::new(
        method,
        LAYER,
        ScoreSpec { class_index: CLASS, mode: ScoreMode::PostSoftmax },
    );
    attribute(&model, &image, &request).unwrap().heatmap.values
}

fn fixture_path(method: Method) -> PathBuf {
    golden_dir().join(format!("{}.txt", method.name()))
}

fn save_fixture(method: Method, values: &Tensor<f64>) {
    let mut text = format!("{} {}\n", values.shape()[0], values.shape()[1]);
    for v in values.data() {
        text.push_str(&fmt_f64(*v));
        text.push('\n');
    }
    std::fs::create_dir_all(golden_dir()).unwrap();
    std::fs::write(fixture_path(method), text).unwrap();
}

fn load_fixture(method: Method) -> Tensor<f64> {
    let text = std::fs::read_to_string(fixture_path(method))
        .unwrap_or_else(|_| panic!("missing fixture for {}; regenerate with CAMFORGE_REGEN_GOLDEN=1", method.name()));
    let mut lines = text.lines();
    let mut dims = lines.next().unwrap().split_whitespace();
    let h: usize = dims.next().unwrap().parse().unwrap();
    let w: usize = dims.next().unwrap().parse().unwrap();
    let data: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    Tensor::from_vec(vec![h, w], data).unwrap()
}

#[test]
fn golden_heatmaps_for_all_three_methods() {
    let regen = std::env::var("CAMFORGE_REGEN_GOLDEN").is_ok();
    for method in [Method::GradCam, Method::GradCamPlus, Method::GradCamPP] {
        let values = compute(method);
        if regen {
            save_fixture(method, &values);
            continue;
        }
        let expected = load_fixture(method);
        assert_eq!(values.shape(), expected.shape());
        for (i, (got, want)) in values.data().iter().zip(expected.data()).enumerate() {
            assert!(
                (got - want).abs() <= 1e-10 * want.abs().max(1e-12),
                "{} unit {i}: {got} vs {want}",
                method.name()
            );
        }
    }
    if regen {
        println!("golden fixtures regenerated");
    }
}
