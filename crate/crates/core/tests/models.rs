use histofuse_core::data::{Subtype, TumorClass};
use histofuse_core::models::*;
use histofuse_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn dense(n: usize, m: usize) -> usize {
    n * m + m
}

fn valid(s: usize, k: usize) -> usize {
    s - k + 1
}

/// Trainable count derived from the layer list, with valid padding.
fn baseline_count(size: usize) -> usize {
    let mut s = size;
    let mut c = 3;
    let mut total = 0;
    for f in [16, 32, 16] {
        total += conv(4, c, f);
        s = valid(s, 4) / 2;
        c = f;
    }
    total + dense(s * s * c, 256) + dense(256, 1)
}

fn subclass_count(size: usize) -> usize {
    let mut s = size;
    let mut c = 3;
    let mut total = 0;
    for f in [32, 64, 128] {
        total += conv(3, c, f);
        s = valid(s, 3) / 2;
        c = f;
    }
    total + dense(s * s * c, 512) + dense(512, 4)
}

/// (trainable, with running statistics, tap widths)
fn backbone_count(cfg: &BackboneConfig) -> (usize, usize, Vec<usize>) {
    let mut c = cfg.stem_filters;
    let mut trainable = conv(3, 3, c);
    let mut stats = 0;
    let mut taps = Vec::new();
    for (s, b) in cfg.blocks.iter().enumerate() {
        for _ in 0..b.layers {
            trainable += 2 * c + conv(3, c, b.growth);
            stats += 2 * c;
            c = if cfg.concat { c + b.growth } else { b.growth };
        }
        taps.push(c);
        if s < 2 {
            let next = ((c as f64 * cfg.compression).floor() as usize).max(1);
            trainable += 2 * c + conv(1, c, next);
            stats += 2 * c;
            c = next;
        }
    }
    (trainable, trainable + stats, taps)
}

fn head_count(taps: &[usize], classes: usize) -> (usize, usize) {
    let branches: usize = taps.iter().map(|&t| dense(t, 64) + 2 * 64).sum();
    let trainable = branches + dense(192, 16) + dense(16, classes);
    (trainable, trainable + 3 * 2 * 64)
}

fn small() -> BackboneConfig {
    BackboneConfig {
        stem_filters: 4,
        blocks: [BlockConfig { layers: 2, growth: 3 }; 3],
        compression: 0.5,
        concat: true,
    }
}

fn image_batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, size, size, 3], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn baseline_matches_its_layer_list() {
    for size in [32, 64, 128] {
        let m = build_baseline_binary_cnn::<f32>(size, 1).unwrap();
        m.audit_shapes().unwrap();
        assert_eq!(m.params().trainable_count(), baseline_count(size), "size {size}");
        assert_eq!(m.conv_filters(), vec![16, 32, 16]);
        assert_eq!(m.num_classes(), 2);
        assert!(!m.has_batchnorm());
    }
    assert_eq!(baseline_count(128), 784 + 8224 + 8208 + 692_480 + 257);
}

#[test]
fn baseline_on_zero_input_is_one_half() {
    let m = build_baseline_binary_cnn::<f32>(32, 5).unwrap();
    let out = m.infer(&Tensor::zeros(&[2, 32, 32, 3])).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert!(out.data().iter().all(|&v| v == 0.5));
    let p = m.predict_proba(&image_batch(3, 32, 1)).unwrap();
    for row in p {
        assert!(row[1] > 0.0 && row[1] < 1.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn subclass_network_matches_its_layer_list() {
    for size in [32, 64, 256] {
        let m = build_subclass_initial_cnn::<f32>(size, TumorClass::Malignant, 1).unwrap();
        m.audit_shapes().unwrap();
        assert_eq!(m.params().trainable_count(), subclass_count(size));
        assert_eq!(m.conv_filters(), vec![32, 64, 128]);
        assert_eq!(m.architecture().labels(), ["DC", "LC", "MC", "PC"]);
    }
    let m = build_subclass_initial_cnn::<f32>(32, TumorClass::Benign, 1).unwrap();
    let x = image_batch(2, 32, 2);
    let p = m.predict_proba(&x).unwrap();
    assert!(p.iter().all(|r| r.len() == 4 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    assert_eq!(m.infer(&x).unwrap(), m.infer(&x).unwrap());
}

#[test]
fn backbone_widths_follow_the_recurrence() {
    let mut cfgs = vec![BackboneConfig::default(), small()];
    cfgs.push(BackboneConfig { concat: false, ..BackboneConfig::default() });
    cfgs.push(BackboneConfig {
        stem_filters: 5,
        blocks: [
            BlockConfig { layers: 1, growth: 7 },
            BlockConfig { layers: 3, growth: 2 },
            BlockConfig { layers: 2, growth: 5 },
        ],
        compression: 0.3,
        concat: true,
    });
    for cfg in cfgs {
        let (trainable, total, taps) = backbone_count(&cfg);
        assert_eq!(cfg.tap_channels(), taps);
        let m = build_mini_dense_backbone::<f32>(&cfg, 64, 3).unwrap();
        m.audit_shapes().unwrap();
        assert_eq!(m.params().trainable_count(), trainable);
        assert_eq!(m.params().scalar_count(), total);
        assert_eq!(m.taps().len(), 3);
        let extents = cfg.tap_extents(64).unwrap();
        for (i, &t) in m.taps().iter().enumerate() {
            assert_eq!(m.node_shape(t), &[extents[i], extents[i], taps[i]]);
        }
        assert!(extents[0] > extents[1] && extents[1] > extents[2]);
    }
    let d = BackboneConfig::default();
    assert_eq!(d.tap_channels()[0], d.stem_filters + 4 * 12);
    let off = BackboneConfig { concat: false, ..d };
    assert_eq!(off.tap_channels(), vec![12, 12, 12]);
}

#[test]
fn backbone_rejects_small_inputs_and_bad_configs() {
    for size in [0, 2, 8, 16] {
        assert!(matches!(build_mini_dense_backbone::<f32>(&small(), size, 0), Err(Error::Config(_))));
    }
    build_mini_dense_backbone::<f32>(&small(), 17, 0).unwrap().audit_shapes().unwrap();
    let bad = BackboneConfig { compression: 0.0, ..small() };
    assert!(matches!(build_mini_dense_backbone::<f32>(&bad, 64, 0), Err(Error::Config(_))));
    let bad = BackboneConfig { stem_filters: 0, ..small() };
    assert!(build_mini_dense_backbone::<f32>(&bad, 64, 0).is_err());
    assert!(build_fusion_model::<f32>(3, &small(), 32, 0).is_err());
}

#[test]
fn fusion_head_widths() {
    for classes in [2, 4] {
        let m = build_fusion_model::<f32>(classes, &BackboneConfig::default(), 64, 2).unwrap();
        m.audit_shapes().unwrap();
        let (bt, btotal, taps) = backbone_count(&BackboneConfig::default());
        let (ht, htotal) = head_count(&taps, classes);
        assert_eq!(m.params().trainable_count(), bt + ht);
        assert_eq!(m.params().scalar_count(), btotal + htotal);
        let concat = m.node_index("fusion_concat").unwrap();
        assert_eq!(m.node_shape(concat), &[192]);
        assert_eq!(m.node_shape(m.output_node()), &[classes]);
        assert_eq!(m.head(), Head::Softmax(classes));
        assert_eq!(m.l2_lambda(), 0.001);
        let p = m.predict_proba(&image_batch(3, 64, 4)).unwrap();
        assert!(p.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    }
    let m = build_fusion_model::<f32>(4, &small(), 32, 0).unwrap();
    assert_eq!(m.architecture().labels(), ["A", "F", "PT", "TA"]);
}

#[test]
fn taps_equal_the_standalone_backbone() {
    let cfg = small();
    let mut fusion = build_fusion_model::<f32>(2, &cfg, 40, 11).unwrap();
    let mut backbone = build_mini_dense_backbone::<f32>(&cfg, 40, 11).unwrap();
    let x = image_batch(3, 40, 12);
    assert_eq!(fusion.tap_activations(&x).unwrap(), backbone.tap_activations(&x).unwrap());

    // Perturb every shared tensor, including running statistics, then copy across.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (_, p) in fusion.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(0.05..0.3);
        }
    }
    let names: Vec<String> = backbone.params().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let src = fusion.params().get(&name).expect("backbone tensor in fusion model").value.clone();
        backbone.params_mut().get_mut(&name).unwrap().value = src;
    }
    let a = fusion.tap_activations(&x).unwrap();
    let b = backbone.tap_activations(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.last().unwrap(), &backbone.infer(&x).unwrap());
}

#[test]
fn weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_fusion_model::<f32>(4, &small(), 32, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, p) in m.params_mut().iter_mut() {
        let lo = if name.ends_with("moving_var") { 0.1 } else { -3.0 };
        for v in p.value.data_mut() {
            *v = rng.gen_range(lo..3.0);
        }
    }
    let first = dir.path().join("a.hfw");
    let second = dir.path().join("b.hfw");
    save_model(&m, &first).unwrap();
    let loaded: ModelGraph<f32> = load_model(&first).unwrap();
    save_model(&loaded, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    for (name, p) in m.params().iter() {
        let q = loaded.params().get(name).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{name}");
    }
    assert_eq!(loaded.architecture(), m.architecture());
    let x = image_batch(2, 32, 3);
    assert_eq!(loaded.infer(&x).unwrap(), m.infer(&x).unwrap());
}

fn offset(r: Result<Vec<(String, Tensor<f32>)>>) -> u64 {
    match r {
        Err(Error::Weights { offset, .. }) => offset,
        other => panic!("expected a weights error, got {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn corrupted_files_report_offsets() {
    let m = build_baseline_binary_cnn::<f32>(32, 0).unwrap();
    let bytes = encode_weights(m.params()).unwrap();
    assert_eq!(decode_weights(&bytes).unwrap().len(), m.params().len());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset(decode_weights(&bad)), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(decode_weights(&bad)), 4);
    for cut in [0, 3, 7, 11, 12, 20, bytes.len() - 1] {
        let at = offset(decode_weights(&bytes[..cut]));
        assert!(at as usize <= cut, "cut {cut} reported {at}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(offset(decode_weights(&long)), bytes.len() as u64);
}

#[test]
fn mismatched_architecture_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.hfw");
    save_weights(&build_baseline_binary_cnn::<f32>(32, 0).unwrap(), &path).unwrap();
    let mut other = build_baseline_binary_cnn::<f32>(64, 0).unwrap();
    match load_weights_into(&mut other, &path) {
        Err(Error::Shape(m)) => assert!(m.contains("`fc.kernel`"), "{m}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let mut fusion = build_fusion_model::<f32>(2, &small(), 32, 0).unwrap();
    assert!(matches!(load_weights_into(&mut fusion, &path), Err(Error::Shape(_))));
    assert!(matches!(load_model::<f32>(&path), Err(Error::Io { .. })));
}

/// Returns fixed rows keyed by the sample id painted into pixel 0, and logs every id it sees.
struct Stub {
    rows: Vec<Vec<f64>>,
    seen: RefCell<Vec<usize>>,
}

impl Stub {
    fn new(rows: Vec<Vec<f64>>) -> Self {
        Stub { rows, seen: RefCell::new(Vec::new()) }
    }
}

impl Classifier for Stub {
    fn input_shape(&self) -> [usize; 3] {
        [2, 2, 3]
    }

    fn class_probabilities(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let per = batch.len() / batch.shape()[0];
        Ok(batch
            .data()
            .chunks(per)
            .map(|px| {
                let id = px[0] as usize;
                self.seen.borrow_mut().push(id);
                self.rows[id].clone()
            })
            .collect())
    }
}

fn softmax_row(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn routing_follows_the_binary_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100;
    let bin = Stub::new((0..n).map(|_| softmax_row(&mut rng, 2)).collect());
    let ben = Stub::new((0..n).map(|_| softmax_row(&mut rng, 4)).collect());
    let mal = Stub::new((0..n).map(|_| softmax_row(&mut rng, 4)).collect());
    let batch = Tensor::from_fn(&[n, 2, 2, 3], |i| (i / 12) as f32);
    let out = hierarchical_predict_batch(&bin, &ben, &mal, &batch).unwrap();
    let mut want_ben = Vec::new();
    let mut want_mal = Vec::new();
    for (i, d) in out.iter().enumerate() {
        let b = &bin.rows[i];
        let route = if b[1] > b[0] { TumorClass::Malignant } else { TumorClass::Benign };
        assert_eq!(d.class, route);
        let sub = if route == TumorClass::Benign { &ben.rows[i] } else { &mal.rows[i] };
        let best = (0..4).fold(0, |m, j| if sub[j] > sub[m] { j } else { m });
        assert_eq!(d.subtype, route.subtypes()[best]);
        assert_eq!(d.subtype.class(), d.class);
        assert_eq!(&d.subtype_probs, sub);
        assert_eq!(&d.binary_probs, b);
        if route == TumorClass::Benign { want_ben.push(i) } else { want_mal.push(i) }
    }
    assert!(!want_ben.is_empty() && !want_mal.is_empty());
    assert_eq!(*ben.seen.borrow(), want_ben);
    assert_eq!(*mal.seen.borrow(), want_mal);
}

#[test]
fn confident_benign_leaves_the_malignant_model_untouched() {
    let bin = Stub::new(vec![vec![0.9, 0.1]]);
    let ben = Stub::new(vec![vec![0.1, 0.2, 0.6, 0.1]]);
    let mal = Stub::new(vec![vec![0.25; 4]]);
    let d = hierarchical_predict(&bin, &ben, &mal, &Tensor::zeros(&[2, 2, 3])).unwrap();
    assert_eq!(d.class, TumorClass::Benign);
    assert_eq!(d.subtype, Subtype::from_code("PT").unwrap());
    assert_eq!(*ben.seen.borrow(), vec![0]);
    assert!(mal.seen.borrow().is_empty());
    assert!(hierarchical_predict(&bin, &ben, &mal, &Tensor::zeros(&[3, 3, 3])).is_err());
}

#[test]
fn real_models_give_normalized_diagnoses() {
    let bin = build_fusion_model::<f32>(2, &small(), 32, 1).unwrap();
    let mut arch = Architecture::new(ModelKind::FusionBenign, 32);
    arch.backbone = Some(small());
    let ben = arch.build::<f32>(2).unwrap();
    arch.kind = ModelKind::FusionMalignant;
    let mal = arch.build::<f32>(3).unwrap();
    assert_eq!(mal.architecture().labels(), ["DC", "LC", "MC", "PC"]);
    let batch = image_batch(6, 32, 9);
    for d in hierarchical_predict_batch(&bin, &ben, &mal, &batch).unwrap() {
        assert!((d.binary_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((d.subtype_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(d.subtype.class(), d.class);
    }
    let wrong = build_fusion_model::<f32>(2, &small(), 40, 1).unwrap();
    assert!(matches!(
        hierarchical_predict_batch(&wrong, &ben, &mal, &batch),
        Err(Error::Shape(_))
    ));
}
