use histofuse_core::kernels::Padding;
use histofuse_core::models::{build_fusion_model, BackboneConfig, BlockConfig, Mode};
use histofuse_core::rng::{self, Stream};
use histofuse_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-4;
const MAX_PROBES: usize = 24;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub probes: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Mismatch test: pass when the absolute gap is under the floor or the
/// relative gap is under tolerance.
pub fn close(analytic: f64, numeric: f64) -> (bool, f64) {
    let gap = (analytic - numeric).abs();
    let rel = gap / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
    (gap <= ABS_FLOOR || rel < REL_TOL, if gap <= ABS_FLOOR { 0.0 } else { rel })
}

fn probe_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|_| rng.gen_range(0..len)).collect()
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform draws kept at least `gap` away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every output
/// element carries a distinct upstream gradient.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(random_tensor(&shape, &mut rng), false);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Central finite differences against the reverse sweep for every input of `f`.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut report = CheckReport {
        name: name.to_string(),
        probes: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in probe_indices(inputs[which].len(), &mut rng) {
            let mut moved = inputs.to_vec();
            let base = moved[which].data()[idx];
            moved[which].data_mut()[idx] = base + STEP;
            let up = eval(&moved)?;
            moved[which].data_mut()[idx] = base - STEP;
            let down = eval(&moved)?;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[idx];
            let (ok, rel) = close(a, numeric);
            report.probes += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if !ok {
                report
                    .failures
                    .push(format!("input {which}[{idx}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    Ok(report)
}

/// One check per differentiable tape operation.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let (a, b) = (random_tensor(&[3, 4], r), random_tensor(&[3, 4], r));
    out.push(check_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?);
    out.push(check_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?);
    out.push(check_op("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7))?);
    out.push(check_op("sum", &[a.clone()], |t, v| t.sum(v[0]))?);
    out.push(check_op("mean", &[a.clone()], |t, v| t.mean(v[0]))?);
    out.push(check_op("sum_squares", &[a.clone()], |t, v| t.sum_squares(v[0]))?);
    out.push(check_op("reshape", &[a.clone()], |t, v| t.reshape(v[0], &[2, 6]))?);

    let img = random_tensor(&[2, 5, 5, 3], r);
    out.push(check_op("flatten", &[img.clone()], |t, v| t.flatten(v[0]))?);
    let k3 = random_tensor(&[3, 3, 3, 4], r);
    let bias = random_tensor(&[4], r);
    out.push(check_op("conv2d_valid", &[img.clone(), k3.clone(), bias.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, Padding::Valid)
    })?);
    out.push(check_op("conv2d_same", &[img.clone(), k3.clone(), bias.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, Padding::Same)
    })?);
    let k2 = random_tensor(&[2, 2, 3, 4], r);
    out.push(check_op("conv2d_strided", &[img.clone(), k2, bias.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, Padding::Same)
    })?);
    // Spread values so no two window entries sit within a step of each other.
    let distinct = {
        let mut order: Vec<usize> = (0..2 * 6 * 6 * 3).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        Tensor::new(vec![2, 6, 6, 3], order.iter().map(|&i| i as f64 * 0.01).collect())?
    };
    out.push(check_op("maxpool2d", &[distinct], |t, v| t.maxpool2d(v[0], (2, 2), (2, 2)))?);
    out.push(check_op("avgpool2d", &[img.clone()], |t, v| t.avgpool2d(v[0], (2, 2), (2, 2)))?);
    out.push(check_op("global_avg_pool", &[img.clone()], |t, v| t.global_avg_pool(v[0]))?);

    let x = random_tensor(&[4, 5], r);
    let w = random_tensor(&[5, 3], r);
    let bd = random_tensor(&[3], r);
    out.push(check_op("dense", &[x.clone(), w, bd], |t, v| t.dense(v[0], v[1], v[2]))?);
    out.push(check_op("relu", &[away_from_zero(&[4, 5], 0.05, r)], |t, v| t.relu(v[0]))?);
    out.push(check_op("sigmoid", &[x.clone()], |t, v| t.sigmoid(v[0]))?);
    out.push(check_op("softmax", &[x.clone()], |t, v| t.softmax(v[0]))?);
    out.push(check_op("l2_normalize", &[x.clone()], |t, v| t.l2_normalize(v[0]))?);

    let gamma = random_tensor(&[5], r);
    let beta = random_tensor(&[5], r);
    out.push(check_op("batchnorm_train", &[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-3)?.0)
    })?);
    let bn_img = random_tensor(&[2, 3, 3, 5], r);
    out.push(check_op("batchnorm_train_spatial", &[bn_img, gamma.clone(), beta.clone()], |t, v| {
        Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-3)?.0)
    })?);
    let mean: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..5).map(|i| 0.5 + 0.2 * i as f64).collect();
    out.push(check_op("batchnorm_infer", &[x.clone(), gamma, beta], |t, v| {
        t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, 1e-3)
    })?);
    out.push(check_op("dropout", &[x.clone()], |t, v| {
        let mut rng = rng::stream(5, Stream::Dropout);
        t.dropout(v[0], 0.4, &mut rng)
    })?);
    let c1 = random_tensor(&[2, 3, 3, 2], r);
    let c2 = random_tensor(&[2, 3, 3, 4], r);
    out.push(check_op("concat", &[c1, c2], |t, v| t.concat(&[v[0], v[1]]))?);

    let probs = Tensor::from_fn(&[6, 1], |_| r.gen_range(0.05..0.95));
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    out.push(check_op("binary_crossentropy", &[probs], |t, v| {
        t.binary_crossentropy(v[0], &targets)
    })?);
    let logits = random_tensor(&[4, 3], r);
    let labels = [0usize, 2, 1, 2];
    out.push(check_op("categorical_crossentropy", &[logits], |t, v| {
        let p = t.softmax(v[0])?;
        t.categorical_crossentropy(p, &labels)
    })?);
    Ok(out)
}

/// A reduced backbone that keeps every structural feature of the default.
pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_filters: 4,
        blocks: [BlockConfig { layers: 2, growth: 3 }; 3],
        compression: 0.5,
        concat: true,
    }
}

/// Finite differences on the complete fusion model in training mode: the
/// total loss (data term plus L2 penalty), every trainable parameter tensor,
/// and the input batch.
pub fn fusion_model_check(seed: u64) -> Result<CheckReport> {
    let cfg = small_backbone();
    let mut model = build_fusion_model::<f64>(2, &cfg, 32, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = Tensor::from_fn(&[3, 32, 32, 3], |_| rng.gen_range(0.0..1.0));
    let labels = [0usize, 1, 1];

    let loss_of = |model: &histofuse_core::models::ModelGraph<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut drop = rng::stream(seed, Stream::Dropout);
        let pass = model.forward(&mut tape, xv, &mut Mode::Train(&mut drop))?;
        let loss = model.total_loss(&mut tape, &pass, &labels)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(batch.clone(), true);
    let mut drop = rng::stream(seed, Stream::Dropout);
    let pass = model.forward(&mut tape, xv, &mut Mode::Train(&mut drop))?;
    let loss = model.total_loss(&mut tape, &pass, &labels)?;
    let grads = tape.backward(loss)?;

    let mut report = CheckReport {
        name: "fusion_model".into(),
        probes: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let mut record = |label: String, a: f64, n: f64| {
        let (ok, rel) = close(a, n);
        report.probes += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if !ok {
            report.failures.push(format!("{label}: analytic {a:e}, numeric {n:e}"));
        }
    };

    let trainable: Vec<(String, Var)> = pass
        .params
        .iter()
        .filter(|(_, v)| tape.requires_grad(**v))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    for (name, var) in &trainable {
        let analytic = grads.wrt(*var);
        let len = analytic.len();
        let probes: Vec<usize> = (0..len.min(3)).map(|_| rng.gen_range(0..len)).collect();
        for idx in probes {
            let base = model.params().tensor(name)?.data()[idx];
            model.params_mut().get_mut(name).unwrap().value.data_mut()[idx] = base + STEP;
            let up = loss_of(&model, &batch)?;
            model.params_mut().get_mut(name).unwrap().value.data_mut()[idx] = base - STEP;
            let down = loss_of(&model, &batch)?;
            model.params_mut().get_mut(name).unwrap().value.data_mut()[idx] = base;
            record(format!("{name}[{idx}]"), analytic.data()[idx], (up - down) / (2.0 * STEP));
        }
    }
    let dx = grads.wrt(xv);
    for _ in 0..8 {
        let idx = rng.gen_range(0..batch.len());
        let mut moved = batch.clone();
        moved.data_mut()[idx] += STEP;
        let up = loss_of(&model, &moved)?;
        moved.data_mut()[idx] -= 2.0 * STEP;
        let down = loss_of(&model, &moved)?;
        record(format!("input[{idx}]"), dx.data()[idx], (up - down) / (2.0 * STEP));
    }
    Ok(report)
}
