use brainage::model::graph::{Grads, ParamRole};
use brainage::model::ops::{Padding, Shape};
use brainage::model::{
    build_backbone, build_model, train, BackboneName, BackboneSpec, GraphBuilder, HeadConfig, TrainConfig, WeightsSource,
};
use brainage::preprocess::{Dataset, ImageTensor, SIDE, TENSOR_LEN};
use rand::{Rng, SeedableRng};

fn random_spec(name: BackboneName, tail: usize) -> BackboneSpec {
    BackboneSpec {
        name,
        weights: WeightsSource::Random,
        trainable_tail_layers: tail,
        canonical_preprocessing: false,
    }
}

#[test]
fn keras_parameter_counts() {
    for (name, expected, depth) in [
        (BackboneName::MobileNetV2, 2_257_984, 1280),
        (BackboneName::ResNet50V2, 23_564_800, 2048),
        (BackboneName::ResNet101V2, 42_626_560, 2048),
        (BackboneName::Xception, 20_861_480, 2048),
    ] {
        let g = build_backbone(name, 0);
        assert_eq!(g.param_count(), expected, "{name}");
        assert_eq!(g.output_shape(), Shape::new(7, 7, depth), "{name}");
        assert_eq!(name.feature_depth(), depth);
    }
}

#[test]
fn resnet101_last_ten_layers() {
    let model = build_model(&random_spec(BackboneName::ResNet101V2, 10), &HeadConfig::default(), 0).unwrap();
    assert_eq!(
        model.trainable_layers(),
        [
            "conv5_block2_2_conv",
            "conv5_block2_2_bn",
            "conv5_block2_3_conv",
            "conv5_block3_preact_bn",
            "conv5_block3_1_conv",
            "conv5_block3_1_bn",
            "conv5_block3_2_conv",
            "conv5_block3_2_bn",
            "conv5_block3_3_conv",
            "post_bn",
        ]
    );
    let n = model.parameterized_layers();
    let all = brainage::model::set_trainable_tail(model, n).unwrap();
    assert_eq!(all.trainable_layers().len(), n);
    assert!(brainage::model::set_trainable_tail(all, n + 1).is_err());
}

#[test]
fn head_size_for_resnet_features() {
    let model = build_model(&random_spec(BackboneName::ResNet50V2, 0), &HeadConfig::default(), 0).unwrap();
    assert_eq!(model.head.param_count(), 2_099_201);
    assert_eq!(model.param_count(), 23_564_800 + 2_099_201);
}

#[test]
fn missing_pretrained_weights_name_the_cache_path() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("BRAINAGE_WEIGHTS_DIR", dir.path());
    let err = build_model(&BackboneSpec::new(BackboneName::MobileNetV2), &HeadConfig::default(), 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&dir.path().join("mobilenet_v2.safetensors").display().to_string()), "{msg}");
    // the stub needs no weights even when imagenet is requested
    assert!(build_model(&BackboneSpec::stub(), &HeadConfig::default(), 0).is_ok());
}

fn perturb_params(g: &mut brainage::model::Graph, rng: &mut rand_chacha::ChaCha8Rng) {
    for p in &mut g.params {
        if p.name.ends_with("moving_variance") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        } else if p.name.ends_with("moving_mean") || p.name.ends_with("beta") || p.name.ends_with("bias") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        } else if p.name.ends_with("gamma") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
}

/// Compares backward-pass parameter gradients of `Σ r·out` with central
/// differences. Computed in f32, so the tolerance is loose.
fn check_gradients(mut g: brainage::model::Graph, label: &str) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    perturb_params(&mut g, &mut rng);
    let x: Vec<f32> = (0..g.input_shape().len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let r: Vec<f32> = (0..g.output_shape().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |g: &brainage::model::Graph| -> f64 {
        let plan = g.inference_plan();
        g.infer(&x, &plan).iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let plan = g.plan();
    let acts = g.forward(&x, &plan);
    let mut grads = Grads::zeros(&g);
    g.backward(&acts, &plan, r.clone(), &mut grads);

    let mut bad = Vec::new();
    let mut checked = 0;
    for pi in 0..g.params.len() {
        if g.params[pi].role == ParamRole::Statistic {
            assert!(grads.data[pi].is_empty());
            continue;
        }
        for j in 0..g.params[pi].data.len() {
            let an = grads.data[pi][j] as f64;
            let orig = g.params[pi].data[j];
            // a ReLU or max-pool kink inside the step spoils large steps,
            // f32 rounding spoils small ones; agreement at any step counts
            let mut fds = Vec::new();
            for h in [2e-3f32, 5e-4, 1e-4] {
                g.params[pi].data[j] = orig + h;
                let up = loss(&g);
                g.params[pi].data[j] = orig - h;
                let down = loss(&g);
                g.params[pi].data[j] = orig;
                fds.push((up - down) / (2.0 * h as f64));
            }
            if !fds.iter().any(|fd| (fd - an).abs() <= 1e-2 * fd.abs().max(an.abs()).max(0.1)) {
                bad.push(format!("{}[{j}]: analytic {an:.5} numeric {fds:.5?}", g.params[pi].name));
            }
            checked += 1;
        }
    }
    assert!(bad.len() * 100 <= checked, "{label}: {} of {checked} mismatched: {:#?}", bad.len(), &bad[..bad.len().min(10)]);
}

fn op_graph(label: &str, op: impl FnOnce(&mut GraphBuilder, usize) -> usize) {
    let mut b = GraphBuilder::new(Shape::new(7, 6, 3), 5);
    let x = b.input();
    let pre = b.conv(x, "pre", 4, 3, 1, Padding::Same, true);
    let mid = op(&mut b, pre);
    b.conv(mid, "post", 3, 1, 1, Padding::Valid, true);
    check_gradients(b.finish(), label);
}

#[test]
fn conv_gradients() {
    op_graph("conv same s2", |b, x| b.conv(x, "c", 5, 3, 2, Padding::Same, true));
    op_graph("conv valid s1", |b, x| b.conv(x, "c", 2, 2, 1, Padding::Valid, false));
    op_graph("conv 1x1 s2", |b, x| b.conv(x, "c", 3, 1, 2, Padding::Valid, true));
}

#[test]
fn depthwise_and_separable_gradients() {
    op_graph("depthwise same", |b, x| b.depthwise(x, "d", 3, 1, Padding::Same, true));
    op_graph("depthwise valid s2", |b, x| b.depthwise(x, "d", 3, 2, Padding::Valid, false));
    op_graph("separable", |b, x| b.separable(x, "s", 5, 3, Padding::Same, false));
}

#[test]
fn batch_norm_gradients() {
    op_graph("bn", |b, x| b.bn(x, "bn", 1e-3));
}

#[test]
fn elementwise_gradients() {
    op_graph("relu", |b, x| b.relu(x));
    op_graph("relu6", |b, x| b.relu6(x));
    op_graph("add", |b, x| {
        let y = b.conv(x, "branch", 4, 1, 1, Padding::Valid, false);
        b.add(x, y)
    });
    op_graph("zero pad", |b, x| b.zero_pad(x, 1, 0, 2, 1));
}

#[test]
fn max_pool_gradients() {
    op_graph("max pool same", |b, x| b.max_pool(x, 3, 2, Padding::Same));
    op_graph("max pool 1x1 s2", |b, x| b.max_pool(x, 1, 2, Padding::Valid));
}

#[test]
fn composite_graph_gradients() {
    let mut b = GraphBuilder::new(Shape::new(9, 8, 3), 5);
    let x0 = b.input();
    let c1 = b.conv(x0, "c1", 4, 3, 2, Padding::Same, true);
    let n1 = b.bn(c1, "bn1", 1e-3);
    let r1 = b.relu(n1);
    let p = b.zero_pad(r1, 1, 0, 0, 1);
    let d = b.depthwise(p, "dw", 3, 1, Padding::Same, true);
    let s = b.separable(d, "sep", 4, 3, Padding::Same, false);
    let a = b.add(s, p);
    let r6 = b.relu6(a);
    let m = b.max_pool(r6, 3, 2, Padding::Same);
    let c2 = b.conv(m, "c2", 2, 1, 1, Padding::Valid, true);
    b.bn(c2, "bn2", 1e-3);
    check_gradients(b.finish(), "composite");
}

fn image(level: f32, seed: u64) -> ImageTensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..TENSOR_LEN)
        .map(|i| {
            let y = (i / 3) / SIDE;
            let blob = if (60..170).contains(&y) { level } else { 0.1 * level };
            (blob + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0)
        })
        .collect();
    ImageTensor::new(data, format!("img{seed}")).unwrap()
}

fn dataset(n: usize, target: impl Fn(&ImageTensor) -> f64) -> Dataset {
    let inputs: Vec<ImageTensor> = (0..n).map(|i| image(0.15 + 0.8 * (i as f32 / n as f32), i as u64)).collect();
    let targets = inputs.iter().map(&target).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
    Dataset::new(inputs, targets, ids.clone(), ids).unwrap()
}

#[test]
fn frozen_backbone_is_bitwise_unchanged() {
    let ds = dataset(12, |x| 20.0 + 50.0 * x.mean());
    let model = build_model(&random_spec(BackboneName::Stub, 0), &HeadConfig::default(), 3).unwrap();
    let before = model.backbone.clone();
    let head_before = model.head.clone();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let trained = train(model, &ds, &cfg).unwrap();
    assert_eq!(trained.model.backbone, before);
    assert_ne!(trained.model.head, head_before);
}

#[test]
fn partial_tail_only_touches_trainable_layers() {
    let ds = dataset(8, |x| 20.0 + 50.0 * x.mean());
    let model = build_model(&random_spec(BackboneName::Stub, 1), &HeadConfig::default(), 3).unwrap();
    let before = model.backbone.clone();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let trained = train(model, &ds, &cfg).unwrap();
    for (p, q) in before.params.iter().zip(&trained.model.backbone.params) {
        if p.name.starts_with("stub_conv3") {
            assert_ne!(p.data, q.data, "{}", p.name);
        } else {
            assert_eq!(p.data, q.data, "{}", p.name);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(10, |x| 20.0 + 50.0 * x.mean());
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let model = build_model(&BackboneSpec::stub(), &HeadConfig::default(), 4).unwrap();
        train(model, &ds, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn constant_target_is_learned() {
    // six mini-batches per epoch at the default batch size of 128
    let ds = dataset(768, |_| 40.0);
    let model = build_model(&BackboneSpec::stub(), &HeadConfig::default(), 1).unwrap();
    let trained = train(model, &ds, &TrainConfig::default()).unwrap();
    assert_eq!(trained.history.len(), 20);
    assert!(trained.history[19] < trained.history[0], "{:?}", trained.history);
    let preds = trained.predict(&ds.inputs).unwrap();
    let mean = preds.iter().sum::<f64>() / preds.len() as f64;
    println!("constant target 40: mean prediction {mean:.3}");
    assert!((mean - 40.0).abs() <= 2.0, "mean prediction {mean}, history {:?}", trained.history);
}

#[test]
fn overfits_sixteen_samples() {
    let ds = dataset(16, |x| 20.0 + 50.0 * x.mean());
    let model = build_model(&BackboneSpec::stub(), &HeadConfig::default(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let trained = train(model, &ds, &cfg).unwrap();
    let preds = trained.predict(&ds.inputs).unwrap();
    let mse = preds.iter().zip(&ds.targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 16.0;
    assert!(mse < 1.0, "training MSE {mse}, last losses {:?}", &trained.history[190..]);
}
