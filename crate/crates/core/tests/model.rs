use dwmr_core::envs::Benchmark;
use dwmr_core::model::{binarize, ArchConfig, Architecture, ModelBundle, Which};
use dwmr_ndcore::{relative_error, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle(b: Benchmark, decoder: bool, seed: u64) -> ModelBundle<f64> {
    let mut cfg = ArchConfig::new(b);
    cfg.decoder = decoder;
    let arch = Architecture::new(cfg).unwrap();
    ModelBundle::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn frames(b: Benchmark, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = b.frame_shape();
    let data = (0..n * c * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

#[test]
fn encoder_output_shapes() {
    for (b, k) in [(Benchmark::Puzzle, 64), (Benchmark::IceSlider, 192)] {
        let m = bundle(b, false, 1);
        let p = m.encode_batch(Which::Online, frames(b, 3, 2)).unwrap();
        assert_eq!(p.shape(), &[3, k]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let again = m.encode_batch(Which::Online, frames(b, 3, 2)).unwrap();
        assert_eq!(p, again);
    }
}

#[test]
fn encoder_rejects_wrong_shape() {
    let m = bundle(Benchmark::IceSlider, false, 1);
    assert!(m.encode_batch(Which::Online, frames(Benchmark::Puzzle, 1, 0)).is_err());
}

#[test]
fn zero_final_layer_gives_half() {
    let mut m = bundle(Benchmark::Puzzle, false, 3);
    for name in ["fc1.w", "fc1.b"] {
        m.enc.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let p = m.encode_batch(Which::Online, frames(Benchmark::Puzzle, 2, 4)).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
    assert!(binarize(&p).data().iter().all(|&v| v == 1.0));
}

#[test]
fn predictor_shapes_and_action_dependence() {
    for b in [Benchmark::Puzzle, Benchmark::IceSlider] {
        let m = bundle(b, false, 5);
        let k = m.k();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let soft: Vec<f64> = (0..4 * k).map(|_| rng.random()).collect();
        let latent = Tensor::new(vec![4, k], soft).unwrap();
        let out = m.predict_batch(latent.clone(), &[0, 1, 2, 3]).unwrap();
        assert_eq!(out.shape(), &[4, k]);
        assert_eq!(out, m.predict_batch(latent.clone(), &[0, 1, 2, 3]).unwrap());
        let other = m.predict_batch(latent.clone(), &[1, 1, 2, 3]).unwrap();
        assert_ne!(out.data()[..k], other.data()[..k]);
        assert_eq!(out.data()[k..], other.data()[k..]);
        let hard = m.predict_batch(binarize(&latent), &[0, 1, 2, 3]).unwrap();
        assert_eq!(hard.shape(), &[4, k]);
        assert!(m.predict_batch(latent.clone(), &[0, 1, 2]).is_err());
        assert!(m.predict_batch(latent, &[0, 1, 2, 4]).is_err());
    }
}

#[test]
fn decoder_shapes_and_range() {
    for b in [Benchmark::Puzzle, Benchmark::IceSlider] {
        let m = bundle(b, true, 7);
        let k = m.k();
        let dec = m.dec.as_ref().unwrap();
        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, false);
        let p = tape.constant(Tensor::full(&[2, k], 0.3));
        let out = m.decode(&mut tape, &bound, p).unwrap();
        let [c, h, w] = b.frame_shape();
        assert_eq!(tape.shape(out), &[2, c, h, w]);
        assert!(tape.value(out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(bundle(Benchmark::IceSlider, false, 0).dec.is_none());
}

fn decoder_mse(m: &ModelBundle<f64>, dec: &ParamSet<f64>, p: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let mut probe = m.clone();
    probe.dec = Some(dec.clone());
    let mut tape = Tape::new();
    let bound = dec.bind(&mut tape, false);
    let pv = tape.constant(p.clone());
    let xv = tape.constant(x.clone());
    let out = probe.decode(&mut tape, &bound, pv).unwrap();
    let l = tape.mse(out, xv).unwrap();
    tape.value(l).item()
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    for b in [Benchmark::IceSlider, Benchmark::Puzzle] {
        let m = bundle(b, true, 11);
        let k = m.k();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Tensor::new(vec![2, k], (0..2 * k).map(|_| rng.random()).collect()).unwrap();
        let x = frames(b, 2, 13);
        let dec = m.dec.clone().unwrap();

        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, true);
        let pv = tape.constant(p.clone());
        let xv = tape.constant(x.clone());
        let out = m.decode(&mut tape, &bound, pv).unwrap();
        let l = tape.mse(out, xv).unwrap();
        let grads = tape.backward(l).unwrap();

        for entry in dec.entries().iter().filter(|e| e.trainable) {
            let g = grads.get(bound.var(&entry.name).unwrap()).unwrap();
            // A handful of coordinates per tensor keeps this cheap.
            let coords: Vec<usize> = (0..6).map(|_| rng.random_range(0..entry.value.len())).collect();
            let h = 1e-6;
            let numeric: Vec<f64> = coords
                .iter()
                .map(|&c| {
                    let mut plus = dec.clone();
                    plus.get_mut(&entry.name).unwrap().data_mut()[c] += h;
                    let mut minus = dec.clone();
                    minus.get_mut(&entry.name).unwrap().data_mut()[c] -= h;
                    (decoder_mse(&m, &plus, &p, &x) - decoder_mse(&m, &minus, &p, &x)) / (2.0 * h)
                })
                .collect();
            let analytic: Vec<f64> = coords.iter().map(|&c| g.data()[c]).collect();
            let err = relative_error(&analytic, &numeric);
            // Thousands of ReLUs sit downstream; a few pre-activations within h
            // of zero bias the difference quotient slightly.
            assert!(err < 5e-3, "{b:?} {}: rel err {err}", entry.name);
        }
    }
}

#[test]
fn target_encoder_receives_no_gradient() {
    let m = bundle(Benchmark::IceSlider, false, 21);
    let mut tape = Tape::new();
    let online = m.enc.bind(&mut tape, true);
    let target = m.enc_ema.bind(&mut tape, false);
    let pred = m.pred.bind(&mut tape, true);
    let x = tape.constant(frames(Benchmark::IceSlider, 4, 22));
    let x2 = tape.constant(frames(Benchmark::IceSlider, 4, 23));
    let p = m.encode(&mut tape, Which::Online, &online, x).unwrap();
    let pt = m.encode(&mut tape, Which::Target, &target, x2).unwrap();
    let (p_hat, _) = m.predict(&mut tape, &pred, p, &[0, 1, 2, 3], true).unwrap();
    let l = tape.bce(p_hat, pt).unwrap();
    let grads = tape.backward(l).unwrap();
    for (_, &v) in target.iter() {
        assert!(grads.get(v).is_none());
    }
    for (name, &v) in online.iter() {
        assert!(grads.get(v).is_some(), "{name}");
    }
}

#[test]
fn binarize_invariant_under_sign_preserving_rescale() {
    let mut m = bundle(Benchmark::Puzzle, false, 31);
    let x = frames(Benchmark::Puzzle, 2, 32);
    let before = binarize(&m.encode_batch(Which::Online, x.clone()).unwrap());
    for name in ["fc1.w", "fc1.b"] {
        for v in m.enc.get_mut(name).unwrap().data_mut() {
            *v *= 7.5;
        }
    }
    assert_eq!(before, binarize(&m.encode_batch(Which::Online, x).unwrap()));
}

#[test]
fn ema_contracts_toward_online() {
    let mut m = bundle(Benchmark::IceSlider, false, 41);
    let other = bundle(Benchmark::IceSlider, false, 42);
    m.enc_ema = other.enc.clone();
    let tau = 0.9;
    let old: Vec<f64> = m.enc_ema.flat_trainable().iter().zip(m.enc.flat_trainable()).map(|(a, b)| a - b).collect();
    m.ema_update(tau).unwrap();
    let new: Vec<f64> = m.enc_ema.flat_trainable().iter().zip(m.enc.flat_trainable()).map(|(a, b)| a - b).collect();
    for (o, n) in old.iter().zip(&new) {
        assert!((n.abs() - tau * o.abs()).abs() < 1e-12);
    }
}
