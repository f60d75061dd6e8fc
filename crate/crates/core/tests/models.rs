use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgnet_core::gradcheck::relative_error;
use sgnet_core::models::{count_parameters, ArchKind, ArchitectureSpec, Mode, Model, SgmVariant};
use sgnet_core::objective::hybrid_loss;
use sgnet_core::{Graph, ParamStore, Tensor};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k * k + cout
}

fn block(cin: usize, cout: usize, residual: bool) -> usize {
    let proj = if residual && cin != cout { conv(cin, cout, 1) } else { 0 };
    conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout + proj
}

/// Closed-form parameter count from the architecture description.
fn expected_count(spec: &ArchitectureSpec) -> usize {
    let w = spec.effective_widths();
    let res = spec.kind == ArchKind::ResUNet;
    let mut n = 0;
    let mut cin = spec.in_channels;
    for &c in &w {
        n += block(cin, c, res);
        cin = c;
    }
    for l in 0..w.len() - 1 {
        let (lo, hi) = (w[l], w[l + 1]);
        n += hi * lo * 8 + lo;
        n += match spec.kind {
            ArchKind::SgNet => {
                let cg = lo / spec.sgm_groups;
                match spec.sgm_variant {
                    SgmVariant::Literal => spec.sgm_groups * (cg * cg + cg),
                    SgmVariant::Spatial => spec.sgm_groups * 2,
                }
            }
            ArchKind::AttUNet => 2 * conv(lo, lo / 2, 1) + conv(lo / 2, 1, 1),
            _ => 0,
        };
        n += block(2 * lo, lo, res);
    }
    n + conv(w[0], spec.out_channels, 1)
}

#[test]
fn counts_match_closed_form() {
    for kind in ArchKind::ALL {
        let spec = ArchitectureSpec::default_for(kind);
        let m = Model::build(&spec, 0).unwrap();
        assert_eq!(count_parameters(&m.params).total, expected_count(&spec), "{kind}");
    }
    let mut spatial = ArchitectureSpec::default_for(ArchKind::SgNet);
    spatial.sgm_variant = SgmVariant::Spatial;
    let m = Model::build(&spatial, 0).unwrap();
    assert_eq!(count_parameters(&m.params).total, expected_count(&spatial));
}

#[test]
fn default_ordering() {
    let c: Vec<usize> = [ArchKind::SgNet, ArchKind::UNet, ArchKind::ResUNet, ArchKind::AttUNet]
        .iter()
        .map(|&k| count_parameters(&Model::build(&ArchitectureSpec::default_for(k), 0).unwrap().params).total)
        .collect();
    assert!(c.windows(2).all(|w| w[0] < w[1]), "{c:?}");
}

#[test]
fn affine_counts() {
    let mut dense = ParamStore::new();
    dense.add("fc.weight", Tensor::zeros(&[2, 4]), true).unwrap();
    dense.add("fc.bias", Tensor::zeros(&[2]), true).unwrap();
    assert_eq!(count_parameters(&dense).total, 10);

    let m = Model::build(&ArchitectureSpec::default_for(ArchKind::UNet), 0).unwrap();
    let c1 = m.params.by_name("enc0.conv1.weight").unwrap().value.len() + m.params.by_name("enc0.conv1.bias").unwrap().value.len();
    assert_eq!(c1, 880);
}

#[test]
fn same_seed_same_parameters() {
    for kind in ArchKind::ALL {
        let spec = ArchitectureSpec::with_widths(kind, &[8, 16]);
        let a = Model::build(&spec, 9).unwrap();
        let b = Model::build(&spec, 9).unwrap();
        let c = Model::build(&spec, 10).unwrap();
        let vals = |m: &Model| m.params.iter().flat_map(|p| p.value.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn shape_contract_and_eval_repeatability() {
    let x = input(&[1, 2, 16, 8, 8], 1);
    for kind in ArchKind::ALL {
        let m = Model::build(&ArchitectureSpec::with_widths(kind, &[8, 16, 32]), 2).unwrap();
        let a = m.predict_logits(&x).unwrap();
        assert_eq!(a.shape(), &[1, 1, 16, 8, 8]);
        assert_eq!(a, m.predict_logits(&x).unwrap());
    }
}

#[test]
fn saturated_gates_reduce_sgnet_to_unet() {
    let mut spec = ArchitectureSpec::with_widths(ArchKind::SgNet, &[4, 8, 16]);
    spec.sgm_groups = 2;
    let mut sg = Model::build(&spec, 4).unwrap();
    for p in sg.params.iter_mut().filter(|p| p.name.contains(".sgm.")) {
        let v = if p.name.ends_with(".bias") { 40.0 } else { 0.0 };
        p.value.fill(v);
    }
    let mut unet = Model::build(&ArchitectureSpec::with_widths(ArchKind::UNet, &[4, 8, 16]), 5).unwrap();
    for p in unet.params.iter_mut() {
        p.value = sg.params.by_name(&p.name).unwrap().value.clone();
    }
    sg.set_mode(Mode::Eval);
    unet.set_mode(Mode::Eval);
    let x = input(&[2, 2, 8, 8, 8], 6);
    let a = sg.predict_logits(&x).unwrap();
    let b = unet.predict_logits(&x).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff:e}");
}

#[test]
fn zeroed_residual_branches_leave_shortcuts() {
    let mut m = Model::build(&ArchitectureSpec::with_widths(ArchKind::ResUNet, &[4, 8]), 7).unwrap();
    for p in m.params.iter_mut().filter(|p| p.name.contains(".bn2.gamma") || p.name.contains(".bn2.beta")) {
        p.value.fill(0.0);
    }
    m.set_mode(Mode::Eval);
    let x = input(&[1, 2, 8, 8, 8], 8);
    let got = m.predict_logits(&x).unwrap();

    // Shortcut-only network built by hand: projections, pooling, up-conv, head.
    let mut g = Graph::new();
    let p = |g: &mut Graph, name: &str| g.input(m.params.by_name(name).unwrap().value.clone());
    let xv = g.input(x);
    let (w, b) = (p(&mut g, "enc0.proj.weight"), p(&mut g, "enc0.proj.bias"));
    let e0 = g.conv3d(xv, w, b, 1, 0).unwrap();
    let pooled = g.maxpool3d(e0).unwrap();
    let (w, b) = (p(&mut g, "enc1.proj.weight"), p(&mut g, "enc1.proj.bias"));
    let e1 = g.conv3d(pooled, w, b, 1, 0).unwrap();
    let (w, b) = (p(&mut g, "up0.weight"), p(&mut g, "up0.bias"));
    let up = g.conv_transpose3d(e1, w, b).unwrap();
    let cat = g.concat_channels(&[e0, up]).unwrap();
    let (w, b) = (p(&mut g, "dec0.proj.weight"), p(&mut g, "dec0.proj.bias"));
    let d0 = g.conv3d(cat, w, b, 1, 0).unwrap();
    let (w, b) = (p(&mut g, "head.weight"), p(&mut g, "head.bias"));
    let y = g.conv3d(d0, w, b, 1, 0).unwrap();
    let want = g.value(y);
    let diff = got.data().iter().zip(want.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff:e}");
}

#[test]
fn every_parameter_receives_gradient() {
    let x = input(&[2, 2, 8, 8, 8], 11);
    let t = Tensor::from_vec(&[2, 1, 8, 8, 8], (0..1024).map(|i| (i % 7 == 0) as u8 as f64).collect()).unwrap();
    for kind in ArchKind::ALL {
        let mut spec = ArchitectureSpec::with_widths(kind, &[4, 8]);
        spec.sgm_groups = 2;
        let mut m = Model::build(&spec, 12).unwrap();
        m.zero_grad();
        m.loss_and_backward(&x, &t).unwrap();
        for p in m.params.iter().filter(|p| p.trainable) {
            assert!(p.grad.max_abs() > 0.0, "{kind}: {} has zero gradient", p.name);
        }
    }
}

#[test]
fn sampled_finite_differences_on_16x16x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::randn(&[1, 2, 16, 16, 8], 1.0, &mut rng);
    let t = Tensor::from_vec(&[1, 1, 16, 16, 8], (0..2048).map(|_| rng.gen_bool(0.1) as u8 as f64).collect()).unwrap();
    let mut spec = ArchitectureSpec::with_widths(ArchKind::SgNet, &[8, 16]);
    spec.sgm_groups = 4;
    let mut m = Model::build(&spec, 14).unwrap();
    let mut a = m.clone();
    a.zero_grad();
    a.loss_and_backward(&x, &t).unwrap();
    let loss = |m: &Model| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, _) = m.forward_graph(&mut g, xv).unwrap();
        hybrid_loss(g.value(y), &t).unwrap().total
    };
    let trainable: Vec<usize> = (0..m.params.len()).filter(|&i| m.params.iter().nth(i).unwrap().trainable).collect();
    let h = 1e-6;
    for _ in 0..10 {
        let i = trainable[rng.gen_range(0..trainable.len())];
        let j = rng.gen_range(0..m.params.iter().nth(i).unwrap().value.len());
        let at = |m: &mut Model, v: f64| m.params.iter_mut().nth(i).unwrap().value.data_mut()[j] = v;
        let orig = m.params.iter().nth(i).unwrap().value.data()[j];
        at(&mut m, orig + h);
        let up = loss(&m);
        at(&mut m, orig - h);
        let down = loss(&m);
        at(&mut m, orig);
        let p = a.params.iter().nth(i).unwrap();
        let err = relative_error(p.grad.data()[j], (up - down) / (2.0 * h));
        assert!(err < 1e-3, "{}[{j}]: {err:e}", p.name);
    }
}
