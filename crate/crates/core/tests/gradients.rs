//! Finite-difference checks through the full model in f64.

use omnivore_core::heads::HeadSpec;
use omnivore_core::nn::Mode;
use omnivore_core::patch_embed::PatchSpec;
use omnivore_core::rng::rng_for;
use omnivore_core::trunk::TrunkConfig;
use omnivore_core::{DatasetId, Modality, ModelConfig, Omnivore, VisualSample};
use omnivore_tensor::gradcheck::relative_error;
use omnivore_tensor::Tape;
use rand::Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-5;

fn tiny() -> ModelConfig {
    ModelConfig {
        patch: PatchSpec { t: 2, h: 4, w: 4, dim: 8 },
        trunk: TrunkConfig {
            stage_depths: vec![2, 1],
            stage_dims: vec![8, 16],
            heads_per_stage: vec![2, 2],
            window: [1, 2, 2],
            drop_path_rate: 0.1,
            mlp_ratio: 2.0,
            feature_stage: None,
        },
        rgbd_embed: Default::default(),
    }
}

fn sample(modality: Modality, shape: [usize; 4], label: usize, seed: u64) -> VisualSample {
    let mut rng = rng_for(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.0..1.0f32)).collect();
    VisualSample::new(modality, shape, data, label, DatasetId::from("a")).unwrap()
}

fn loss(model: &Omnivore<f64>, samples: &[&VisualSample]) -> (Tape<f64>, omnivore_tensor::Var) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, samples, &mut Mode::Eval).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ids: Vec<DatasetId> = samples.iter().map(|s| s.dataset_id.clone()).collect();
    let r = model
        .heads
        .route_loss(&mut tape, &model.store, out.phi, &labels, &ids, 0.1, &mut Mode::Eval)
        .unwrap();
    (tape, r.loss)
}

/// Checks up to `per_param` coordinates of every parameter tensor.
fn check(samples: &[VisualSample], per_param: usize) {
    let heads = [HeadSpec { dataset_id: "a".into(), classes: 3, dropout: 0.0 }];
    let mut model: Omnivore<f64> = Omnivore::new(tiny(), &heads, 7).unwrap();
    // non-trivial biases, norms and position tables
    let mut rng = rng_for(99, &[]);
    for (_, p) in model.store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let refs: Vec<&VisualSample> = samples.iter().collect();
    let (tape, l) = loss(&model, &refs);
    let mut store = model.store.clone();
    tape.backward(l, &mut store).unwrap();
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let Some(analytic) = p.tensor.grad().map(<[f64]>::to_vec) else {
            assert!(p.name.starts_with("patch_embed.depth"), "{} unreached", p.name);
            continue;
        };
        let n = analytic.len();
        for j in (0..n).step_by((n / per_param).max(1)) {
            let orig = model.store.get(id).tensor.data()[j];
            let mut eval = |x: f64| {
                model.store.get_mut(id).tensor.data_mut()[j] = x;
                let (t, l) = loss(&model, &refs);
                t.value(l)[0]
            };
            let numeric = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
            eval(orig);
            let e = relative_error(analytic[j], numeric, FLOOR);
            if e > worst.0 {
                worst = (e, format!("{}[{j}] analytic {} numeric {numeric}", p.name, analytic[j]));
            }
        }
    }
    assert!(worst.0 < TOL, "max rel err {:e} at {}", worst.0, worst.1);
}

#[test]
fn full_model_images_with_shift_and_padding() {
    // 24×24 → 6×6 grid (shifted windows), then 3×3 after merging (padded)
    let s: Vec<_> = (0..2).map(|i| sample(Modality::Image, [1, 24, 24, 3], i, i as u64)).collect();
    check(&s, 6);
}

#[test]
fn full_model_video_and_rgbd() {
    let v: Vec<_> = (0..2).map(|i| sample(Modality::Video, [4, 16, 16, 3], i, 10 + i as u64)).collect();
    check(&v, 4);
    let d: Vec<_> = (0..2).map(|i| sample(Modality::Rgbd, [1, 16, 16, 4], 2 - i, 20 + i as u64)).collect();
    check(&d, 4);
}
