use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::softmax_cross_entropy;

fn random_batch(n: usize, s: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, s, s, 3], (0..n * s * s * 3).map(|_| rng.gen::<f32>()).collect())
}

fn assert_softmax_rows(p: &Tensor, n: usize) {
    assert_eq!(p.shape, vec![n, NUM_CLASSES]);
    for i in 0..n {
        let row = p.item(i);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn full_width_feature_shapes_at_128() {
    for (kind, c) in [
        (BackboneKind::Vgg16, 512),
        (BackboneKind::Vgg19, 512),
        (BackboneKind::ResNet50V2, 2048),
        (BackboneKind::MobileNetV2, 1280),
        (BackboneKind::Xception, 2048),
    ] {
        let mut init = Init::new(0);
        let b = backbones::build(kind, kind.as_str(), 1, &mut init);
        assert_eq!(b.layers.out_shape(&[128, 128, 3]), vec![4, 4, c], "{kind}");
        assert_eq!(b.out_channels, c);
        assert_eq!(BackboneSpec::new(kind).out_channels(), c);
    }
}

#[test]
fn vgg19_extracts_4x4x512_features() {
    let m = build_transfer_model(BackboneSpec::new(BackboneKind::Vgg19), TransferHeadSpec::default()).unwrap();
    let x = random_batch(1, 128, 1);
    let f = m.extract_features(&x).unwrap();
    assert_eq!(f.shape, vec![1, 4, 4, 512]);
    assert!(f.all_finite());
    assert_eq!(f, m.extract_features(&x).unwrap());
    let z = m.extract_features(&Tensor::zeros(vec![1, 128, 128, 3])).unwrap();
    assert!(z.all_finite());
}

#[test]
fn resnet50v2_forward_at_128() {
    let m = build_transfer_model(BackboneSpec::new(BackboneKind::ResNet50V2), TransferHeadSpec::default()).unwrap();
    let x = random_batch(1, 128, 2);
    assert_eq!(m.extract_features(&x).unwrap().shape, vec![1, 4, 4, 2048]);
    assert_softmax_rows(&m.predict(&x).unwrap(), 1);
}

#[test]
fn every_backbone_yields_softmax_rows() {
    for kind in BackboneKind::ALL {
        let spec = ModelSpec::transfer(BackboneSpec::new(kind).with_divisor(8), TransferHeadSpec::default())
            .with_input_size(64);
        let m = TrainedModel::build(spec).unwrap();
        let p = m.predict(&random_batch(4, 64, 3)).unwrap();
        assert_softmax_rows(&p, 4);
        assert!(m.taps().contains(&m.cam_layer), "{kind}");
    }
}

#[test]
fn unknown_backbone_is_an_error() {
    assert!("alexnet".parse::<BackboneKind>().is_err());
    assert_eq!("ResNet50V2".parse::<BackboneKind>().unwrap(), BackboneKind::ResNet50V2);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let spec = ModelSpec::transfer(BackboneSpec::new(BackboneKind::Vgg16).with_divisor(16), TransferHeadSpec::default())
        .with_input_size(32);
    let m = TrainedModel::build(spec).unwrap();
    assert!(m.predict(&random_batch(1, 64, 0)).is_err());
}

#[test]
fn fusion_channels_and_forward() {
    let full = FusionModelSpec::default();
    assert_eq!(full.fused_channels(), 2560);
    let m = TrainedModel::build(ModelSpec::fusion(FusionModelSpec::scaled(8)).with_input_size(64)).unwrap();
    assert_eq!(m.feature_shape(), vec![2, 2, 64 + 256]);
    assert_softmax_rows(&m.predict(&random_batch(2, 64, 4)).unwrap(), 2);
    let alone = |k: BackboneKind| {
        TrainedModel::build(
            ModelSpec::transfer(BackboneSpec::new(k).with_divisor(8), TransferHeadSpec::default()).with_input_size(64),
        )
        .unwrap()
        .backbone_params()
        .iter()
        .filter(|p| !p.buffer)
        .map(|p| p.len())
        .sum::<usize>()
    };
    assert!(m.param_count() > alone(BackboneKind::Vgg19));
    assert!(m.param_count() > alone(BackboneKind::ResNet50V2));
}

fn loss_of(m: &TrainedModel, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = m.net.forward(x.clone(), &mut Ctx::gradients());
    softmax_cross_entropy(&logits, labels).0
}

fn analytic(m: &TrainedModel, x: &Tensor, labels: &[usize]) -> Ctx {
    let mut ctx = Ctx::gradients();
    let logits = m.net.forward(x.clone(), &mut ctx);
    let (_, g) = softmax_cross_entropy(&logits, labels);
    m.net.backward(g, &mut ctx);
    ctx
}

fn numeric(m: &mut TrainedModel, name: &str, j: usize, eps: f32, x: &Tensor, labels: &[usize]) -> f64 {
    let set = |m: &mut TrainedModel, v: f32| {
        let p = m.net.params_mut().into_iter().find(|p| p.name == name).unwrap();
        p.value[j] = v;
    };
    let orig = m.net.params().into_iter().find(|p| p.name == name).unwrap().value[j];
    set(m, orig + eps);
    let lp = loss_of(m, x, labels);
    set(m, orig - eps);
    let lm = loss_of(m, x, labels);
    set(m, orig);
    (lp - lm) / (2.0 * eps as f64)
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut m = TrainedModel::build(ModelSpec::fusion(FusionModelSpec::scaled(8)).with_input_size(64).with_seed(3)).unwrap();
    let x = random_batch(2, 64, 5);
    let labels = [1, 3];
    let ctx = analytic(&m, &x, &labels);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let heads: Vec<(String, usize)> = m.head_params().iter().filter(|p| p.name.starts_with("head/")).map(|p| (p.name.clone(), p.len())).collect();
    let mut checked = 0;
    while checked < 10 {
        let (name, len) = &heads[rng.gen_range(0..heads.len())];
        let j = rng.gen_range(0..*len);
        let p = m.net.params().into_iter().find(|p| &p.name == name).unwrap();
        let a = ctx.grad(p).unwrap()[j] as f64;
        let n = numeric(&mut m, name, j, 1e-3, &x, &labels);
        assert!(
            (a - n).abs() <= 1e-2 * a.abs().max(n.abs()) + 1e-4,
            "{name}[{j}]: analytic {a} numeric {n}"
        );
        checked += 1;
    }
}

#[test]
fn both_backbones_receive_gradient() {
    let mut m = TrainedModel::build(ModelSpec::fusion(FusionModelSpec::scaled(8)).with_input_size(64).with_seed(4)).unwrap();
    let x = random_batch(2, 64, 7);
    let labels = [0, 4];
    let ctx = analytic(&m, &x, &labels);
    for first in ["vgg19/block1_conv1/kernel", "resnet50v2/conv1_conv/kernel"] {
        let p = m.net.params().into_iter().find(|p| p.name == first).unwrap();
        let g = ctx.grad(p).unwrap();
        let (j, a) = g
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .map(|(j, v)| (j, *v as f64))
            .unwrap();
        assert!(a != 0.0, "{first} has zero gradient");
        let n = numeric(&mut m, first, j, 1e-2, &x, &labels);
        assert!((a - n).abs() <= 5e-2 * a.abs().max(n.abs()), "{first}[{j}]: analytic {a} numeric {n}");
    }
}

fn random_matrix(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn cross_covariance_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m1 = random_matrix(5, 8, &mut rng);
    let m2 = random_matrix(5, 8, &mut rng);
    let f = cross_covariance(&m1, &m2).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let mi = m1.iter().map(|r| r[i]).sum::<f64>() / 5.0;
            let mj = m2.iter().map(|r| r[j]).sum::<f64>() / 5.0;
            let mut acc = 0.0;
            for k in 0..5 {
                acc += (m1[k][i] - mi) * (m2[k][j] - mj);
            }
            assert!((f[i][j] - acc / 4.0).abs() < 1e-10);
        }
    }
}

#[test]
fn self_covariance_is_symmetric_psd_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_matrix(12, 4, &mut rng);
    let f = cross_covariance(&m, &m).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((f[i][j] - f[j][i]).abs() < 1e-12);
        }
    }
    for _ in 0..50 {
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: f64 = (0..4).map(|i| (0..4).map(|j| v[i] * f[i][j] * v[j]).sum::<f64>()).sum();
        assert!(q >= -1e-12);
    }
    let doubled: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
    let f2 = cross_covariance(&m, &doubled).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((f2[i][j] - 2.0 * f[i][j]).abs() < 1e-12);
        }
    }
    assert!(cross_covariance(&m[..1], &m[..1]).is_err());
}

#[test]
fn independent_columns_have_small_cross_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    // uniform(-√3, √3) has unit variance
    let s3 = 3f64.sqrt();
    let gen = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..3).map(|_| rng.gen_range(-s3..s3)).collect()).collect()
    };
    let (a, b) = (gen(&mut rng), gen(&mut rng));
    let f = cross_covariance(&a, &b).unwrap();
    let bound = 3.0 / (n as f64).sqrt();
    assert!(f.iter().flatten().all(|v| v.abs() < bound), "{f:?}");
}

#[test]
fn pooled_features_average_space() {
    let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 10.0, 3.0, 20.0]);
    assert_eq!(pooled_features(&t), vec![vec![2.0, 15.0]]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::fusion(FusionModelSpec::scaled(16)).with_input_size(32).with_seed(9);
    let m = TrainedModel::build(spec.clone()).unwrap();
    m.save(dir.path(), "abc123").unwrap();
    let back = TrainedModel::load(dir.path()).unwrap();
    assert_eq!(back.spec, spec);
    assert_eq!(back.label_order, Grade::ALL.to_vec());
    let x = random_batch(2, 32, 8);
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    let text = std::fs::read_to_string(dir.path().join("model.toml")).unwrap();
    assert!(text.contains("abc123") && text.contains("No_DR"));
}

#[test]
fn pretrained_without_weights_is_a_config_error() {
    let mut b = BackboneSpec::new(BackboneKind::Vgg16).with_divisor(16);
    b.pretrained = true;
    let err = TrainedModel::build(ModelSpec::transfer(b, TransferHeadSpec::default()).with_input_size(32));
    assert!(matches!(err, Err(Error::Config(_))));
}
