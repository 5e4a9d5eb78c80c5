use tactile_fscil::nets::gradcheck::grad_check;
use tactile_fscil::nets::{
    batch_tensor, EmbedderConfig, EmbedderNet, EstimatorConfig, EstimatorNet, Mode, Tensor,
};
use tactile_fscil::{ContextBounds, SpecShape, Spectrogram};

fn inputs(shape: SpecShape, n: usize) -> Vec<Spectrogram> {
    (0..n)
        .map(|i| {
            Spectrogram::from_fn(shape, |c, f, t| {
                ((f as f64 * 0.7 + t as f64 * 0.3 + i as f64).sin() + 0.1 * c as f64) * 0.8
            })
        })
        .collect()
}

fn embedder(shape: SpecShape) -> EmbedderNet {
    let cfg = EmbedderConfig {
        widths: vec![4, 6],
        blocks_per_stage: 1,
        embed_dim: 8,
        freq_coord: true,
        time_coord: false,
    };
    EmbedderNet::new(cfg, shape, 11).unwrap()
}

#[test]
fn embedder_train_mode_gradients_match_finite_differences() {
    let shape = SpecShape::new(1, 8, 6);
    let xs = inputs(shape, 4);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let x = batch_tensor(&refs).unwrap();
    let mut net = embedder(shape);
    let report = grad_check(&mut net, 40, 5, |n, tape| {
        let v = tape.constant(x.clone());
        let z = n.forward(tape, v, Mode::Train)?;
        let zn = tape.normalize_rows(z)?;
        let w = tape.constant(Tensor::new(vec![3, 8], (0..24).map(|k| (k as f64).cos()).collect())?);
        let logits = tape.matmul_t(zn, w)?;
        tape.softmax_ce(logits, &[0, 1, 2, 1])
    })
    .unwrap();
    assert!(report.passed(), "{:#?}", report.failures());
}

#[test]
fn estimator_gradients_through_canonicalization() {
    let shape = SpecShape::new(1, 10, 8);
    let xs = inputs(shape, 4);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let x = batch_tensor(&refs).unwrap();
    let cfg = EstimatorConfig {
        block_count: 2,
        base_width: 4,
        freq_coord: true,
        time_coord: true,
    };
    let mut net = EstimatorNet::new(cfg, shape, ContextBounds::default(), 7).unwrap();
    // Move the head off zero so sampled coordinates are not grid-aligned.
    let hw = net.state.param_index("head.weight").unwrap();
    let hb = net.state.param_index("head.bias").unwrap();
    for (k, v) in net.state.params_mut()[hw].data_mut().iter_mut().enumerate() {
        *v = 0.3 * ((k as f64) * 1.3).sin();
    }
    net.state.params_mut()[hb]
        .data_mut()
        .copy_from_slice(&[0.37, -0.41, 0.12, -0.07]);
    let target = tape_target(&x);
    let report = grad_check(&mut net, 40, 9, |n, tape| {
        let v = tape.constant(x.clone());
        let c = n.forward(tape, v, Mode::Train)?;
        let canon = tape.canonicalize(v, c)?;
        let t = tape.constant(target.clone());
        let l1 = tape.mean_abs_diff(canon, t)?;
        let reg = tape.context_penalty(c);
        tape.add_scaled(l1, reg, 0.5)
    })
    .unwrap();
    assert!(report.passed(), "{:#?}", report.failures());
    // The head must actually be probed for this to mean anything.
    let head = head_flat(&net);
    let head_probes = tactile_fscil::nets::gradcheck::grad_check_at(&mut net, &head, |n, tape| {
        let v = tape.constant(x.clone());
        let c = n.forward(tape, v, Mode::Train)?;
        let canon = tape.canonicalize(v, c)?;
        let t = tape.constant(target.clone());
        tape.mean_abs_diff(canon, t)
    })
    .unwrap();
    assert!(head_probes.passed(), "{:#?}", head_probes.failures());
    assert!(head_probes.probes.iter().any(|p| p.analytic.abs() > 1e-4));
}

fn tape_target(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| 0.5 * v + 0.01).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn head_flat(net: &EstimatorNet) -> Vec<usize> {
    let total = net.state.scalar_count();
    let n = net.state.params()[net.state.param_index("head.weight").unwrap()].len() + 4;
    (total - n..total).collect()
}
