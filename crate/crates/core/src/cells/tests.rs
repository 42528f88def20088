use super::*;
use crate::graph::{grid_graph, hop_distances, KernelWidth};

fn rand_mat(seed: u64, rows: usize, cols: usize, a: f64) -> Mat<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

fn random_params(spec: CellSpec, seed: u64) -> CellParams<f64> {
    let mut p = CellParams::zeros(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in p.slices_mut() {
        for v in s {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    p
}

fn random_state(spec: &CellSpec, seed: u64) -> CellState<f64> {
    CellState {
        h: rand_mat(seed, spec.n, spec.d_h, 0.9),
        c: spec.kind.is_lstm().then(|| rand_mat(seed + 1, spec.n, spec.d_h, 2.0)),
    }
}

#[test]
fn init_is_deterministic() {
    let spec = CellSpec::new(CellKind::GcLstmM2, 5, 2, 3, 3);
    let a = cell_init::<f64>(spec, 17).unwrap();
    let b = cell_init::<f64>(spec, 17).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, cell_init::<f64>(spec, 18).unwrap());
    assert!(a.bias(0).iter().chain(a.bias(1)).chain(a.bias(3)).all(|&b| b == 1.0));
    assert!(a.bias(2).iter().all(|&b| b == 0.0));
}

#[test]
fn counts_from_enumeration() {
    let fc = CellSpec::new(CellKind::FcLstm, 7, 3, 5, 1).with_peepholes(Peepholes::Shared);
    assert_eq!(param_count(&fc), 195);
    assert_eq!(CellParams::<f64>::zeros(fc).unwrap().len(), 195);

    let m2 = CellSpec::new(CellKind::GcLstmM2, 9, 1, 4, 3).with_peepholes(Peepholes::Disabled);
    assert_eq!(param_count(&m2), 240 + 16);

    let plain = CellSpec::new(CellKind::FcLstm, 4, 3, 5, 1).with_peepholes(Peepholes::Disabled);
    assert_eq!(param_count(&plain), 4 * 5 * 8 + 4 * 5);
}

#[test]
fn count_matches_allocation_for_all_kinds() {
    for kind in CellKind::ALL {
        for peep in [Peepholes::PerVertex, Peepholes::Shared, Peepholes::Disabled] {
            for k in 1..4 {
                let spec = CellSpec::new(kind, 6, 2, 3, k).with_peepholes(peep);
                let p = CellParams::<f64>::zeros(spec).unwrap();
                assert_eq!(p.len(), param_count(&spec), "{kind} {peep} K={k}");
                let from_layout: usize = p
                    .layout()
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum();
                assert_eq!(from_layout, p.len());
            }
        }
    }
}

#[test]
fn m2_count_affine_in_k_and_free_of_n() {
    let (dx, dh) = (2, 7);
    let count = |k, n| {
        param_count(&CellSpec::new(CellKind::GcLstmM2, n, dx, dh, k).with_peepholes(Peepholes::Disabled))
    };
    for k in 1..8 {
        assert_eq!(count(k + 1, 10) - count(k, 10), 4 * dh * (dx + dh));
    }
    assert_eq!(count(5, 10) - count(3, 10), 2 * 4 * dh * (dx + dh));
    assert_eq!(count(3, 10), count(3, 1000));
}

#[test]
fn fclstm_bias_only_gates() {
    let spec = CellSpec::new(CellKind::FcLstm, 3, 2, 4, 1);
    let mut p = CellParams::<f64>::zeros(spec).unwrap();
    for g in [0, 1, 3] {
        p.bias_mut(g).iter_mut().for_each(|b| *b = 1.0);
    }
    let (h, state, cache) = fclstm_step(&p, &Mat::zeros(3, 2), &CellState::zeros(&spec)).unwrap();
    let s1 = 1.0 / (1.0 + (-1.0f64).exp());
    let CellCache::Lstm(c) = cache else { panic!() };
    for gate in c.gates() {
        assert!(gate.as_slice().iter().all(|&v| (v - s1).abs() < 1e-15));
    }
    assert!((s1 - 0.7311).abs() < 1e-4);
    assert!(state.c.unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(h.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_forget_carries_memory() {
    let spec = CellSpec::new(CellKind::FcLstm, 4, 2, 3, 1).with_peepholes(Peepholes::Disabled);
    let mut p = random_params(spec, 5);
    p.bias_mut(0).iter_mut().for_each(|b| *b = -60.0);
    p.bias_mut(1).iter_mut().for_each(|b| *b = 60.0);
    let state = random_state(&spec, 6);
    let (_, next, _) = fclstm_step(&p, &rand_mat(7, 4, 2, 1.0), &state).unwrap();
    let diff = next.c.unwrap().max_abs_diff(state.c.as_ref().unwrap());
    assert!(diff < 1e-20, "{diff}");
}

#[test]
fn hidden_outputs_bounded() {
    let lap = grid_graph::<f64>(3, 3, 8, KernelWidth::Auto).unwrap().scaled_laplacian().unwrap().clone();
    for kind in CellKind::ALL {
        let spec = CellSpec::new(kind, 9, 2, 3, 3);
        let mut p = random_params(spec, 11);
        for s in p.slices_mut() {
            s.iter_mut().for_each(|v| *v *= 4.0);
        }
        let mut state = random_state(&spec, 12);
        state.h = state.h.map(|v| v.signum());
        for t in 0..5 {
            let x = rand_mat(20 + t, 9, 2, 3.0);
            let (next, cache) = p.step(Some(&lap), &x, &state).unwrap();
            assert!(next.h.as_slice().iter().all(|v| v.abs() <= 1.0), "{kind}");
            match &cache {
                CellCache::Lstm(c) => {
                    for g in c.gates() {
                        assert!(g.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
                    }
                }
                CellCache::Gru(c) => {
                    for g in c.gates() {
                        assert!(g.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
                    }
                }
                CellCache::Rnn(_) => {}
            }
            state = next;
        }
    }
}

#[test]
fn m1_with_identity_features_is_fclstm() {
    let lap = grid_graph::<f64>(2, 3, 4, KernelWidth::Auto).unwrap().scaled_laplacian().unwrap().clone();
    let m1_spec = CellSpec::new(CellKind::GcrnM1, 6, 2, 3, 1);
    let mut m1 = random_params(m1_spec, 3);
    m1.feature_mut()
        .unwrap()
        .coeffs_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let fc_spec = CellSpec { kind: CellKind::FcLstm, ..m1_spec };
    let mut fc = CellParams::zeros(fc_spec).unwrap();
    // Same tensors minus the feature bank.
    for (dst, src) in fc.slices_mut().into_iter().zip(m1.slices().into_iter().skip(1)) {
        dst.copy_from_slice(src);
    }
    let x = rand_mat(4, 6, 2, 1.0);
    let state = random_state(&m1_spec, 9);
    let (h1, s1, _) = gcrn_m1_step(&m1, &lap, &x, &state).unwrap();
    let (h2, s2, _) = fclstm_step(&fc, &x, &state).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
}

#[test]
fn m1_delta_input_is_local() {
    let g = grid_graph::<f64>(5, 5, 4, KernelWidth::Auto).unwrap();
    let lap = g.scaled_laplacian().unwrap();
    let k = 2;
    let spec = CellSpec::new(CellKind::GcrnM1, 25, 1, 3, k);
    let p = cell_init::<f64>(spec, 1).unwrap();
    let zero = CellState::zeros(&spec);
    let v = 12;
    let mut delta = Mat::zeros(25, 1);
    delta[(v, 0)] = 1.0;
    let (h_delta, _, _) = gcrn_m1_step(&p, lap, &delta, &zero).unwrap();
    let (h_zero, _, _) = gcrn_m1_step(&p, lap, &Mat::zeros(25, 1), &zero).unwrap();
    let hops = hop_distances(&g, v);
    let mut changed = 0;
    for u in 0..25 {
        let far = hops[u].map_or(true, |d| d > k - 1);
        if far {
            assert_eq!(h_delta.row(u), h_zero.row(u), "vertex {u}");
        } else if h_delta.row(u) != h_zero.row(u) {
            changed += 1;
        }
    }
    assert!(changed > 1);
}

#[test]
fn m2_at_k1_is_fclstm() {
    let spec = CellSpec::new(CellKind::GcLstmM2, 5, 2, 3, 1);
    let m2 = random_params(spec, 21);
    let mut fc = CellParams::zeros(CellSpec { kind: CellKind::FcLstm, ..spec }).unwrap();
    for (dst, src) in fc.slices_mut().into_iter().zip(m2.slices()) {
        dst.copy_from_slice(src);
    }
    let x = rand_mat(1, 5, 2, 1.0);
    let state = random_state(&spec, 2);
    let (h1, s1, _) = gclstm_m2_step(&m2, &SparseMatrix::identity(5), &x, &state).unwrap();
    let (h2, s2, _) = fclstm_step(&fc, &x, &state).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
}

#[test]
fn rnn_zero_params_and_gru_carry() {
    let lap = grid_graph::<f64>(2, 2, 4, KernelWidth::Auto).unwrap().scaled_laplacian().unwrap().clone();
    let spec = CellSpec::new(CellKind::GcRnn, 4, 2, 3, 2);
    let p = CellParams::<f64>::zeros(spec).unwrap();
    let (h, _) = gcrnn_step(&p, &lap, &rand_mat(1, 4, 2, 1.0), &rand_mat(2, 4, 3, 1.0)).unwrap();
    assert!(h.as_slice().iter().all(|&v| v == 0.0));

    let spec = CellSpec::new(CellKind::GcGru, 4, 2, 3, 2);
    let mut p = random_params(spec, 4);
    p.bias_mut(0).iter_mut().for_each(|b| *b = 80.0);
    let h_prev = rand_mat(3, 4, 3, 1.0);
    let (h, _) = gcgru_step(&p, &lap, &rand_mat(5, 4, 2, 1.0), &h_prev).unwrap();
    assert!(h.max_abs_diff(&h_prev) < 1e-30);
}

#[test]
fn zero_cotangents_give_zero_gradients() {
    let lap = grid_graph::<f64>(2, 3, 8, KernelWidth::Auto).unwrap().scaled_laplacian().unwrap().clone();
    for kind in CellKind::ALL {
        let spec = CellSpec::new(kind, 6, 2, 3, 2);
        let p = random_params(spec, 8);
        let state = random_state(&spec, 9);
        let (_, cache) = p.step(Some(&lap), &rand_mat(10, 6, 2, 1.0), &state).unwrap();
        let mut grads = p.zeros_like();
        let (dx, dprev) = p
            .backward(Some(&lap), &cache, &Mat::zeros(6, 3), None, &mut grads)
            .unwrap();
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)), "{kind}");
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(dprev.h.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_peepholes_match_disabled() {
    let on = CellSpec::new(CellKind::FcLstm, 4, 2, 3, 1).with_peepholes(Peepholes::PerVertex);
    let off = on.with_peepholes(Peepholes::Disabled);
    let mut p_on = random_params(on, 30);
    for m in p_on.peepholes_mut() {
        m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut p_off = CellParams::zeros(off).unwrap();
    let shared: Vec<Vec<f64>> = p_on
        .layout()
        .iter()
        .zip(p_on.slices())
        .filter(|((n, _), _)| !n.starts_with("w_c"))
        .map(|(_, s)| s.to_vec())
        .collect();
    for (dst, src) in p_off.slices_mut().into_iter().zip(&shared) {
        dst.copy_from_slice(src);
    }
    let x = rand_mat(31, 4, 2, 1.0);
    let state = random_state(&on, 32);
    let dh = rand_mat(33, 4, 3, 1.0);
    let d_next = CellState { h: Mat::zeros(4, 3), c: Some(rand_mat(34, 4, 3, 1.0)) };
    let run = |p: &CellParams<f64>| {
        let (_, cache) = p.step(None, &x, &state).unwrap();
        let mut g = p.zeros_like();
        let (dx, dprev) = p.backward(None, &cache, &dh, Some(&d_next), &mut g).unwrap();
        (g, dx, dprev)
    };
    let (g_on, dx_on, prev_on) = run(&p_on);
    let (g_off, dx_off, prev_off) = run(&p_off);
    assert_eq!(dx_on, dx_off);
    assert_eq!(prev_on, prev_off);
    let on_shared: Vec<&[f64]> = g_on
        .layout()
        .iter()
        .zip(g_on.slices())
        .filter(|((n, _), _)| !n.starts_with("w_c"))
        .map(|(_, s)| s)
        .collect();
    assert_eq!(on_shared, g_off.slices());
}

#[test]
fn wrong_kind_and_shapes_rejected() {
    let spec = CellSpec::new(CellKind::GcRnn, 4, 1, 2, 2);
    let p = CellParams::<f64>::zeros(spec).unwrap();
    assert!(fclstm_step(&p, &Mat::zeros(4, 1), &CellState::zeros(&spec)).is_err());
    let lap = SparseMatrix::identity(4);
    assert!(gcrnn_step(&p, &lap, &Mat::zeros(3, 1), &Mat::zeros(4, 2)).is_err());
    assert!(gcrnn_step(&p, &lap, &Mat::zeros(4, 1), &Mat::zeros(4, 3)).is_err());
    assert!(gcrnn_step(&p, &SparseMatrix::identity(5), &Mat::zeros(4, 1), &Mat::zeros(4, 2)).is_err());
    assert!(p.step(None, &Mat::zeros(4, 1), &CellState::zeros(&spec)).is_err());

    let (_, cache) = gcrnn_step(&p, &lap, &Mat::zeros(4, 1), &Mat::zeros(4, 2)).unwrap();
    let mut g = p.zeros_like();
    assert!(cell_backward(CellKind::GcGru, &p, Some(&lap), &cache, &Mat::zeros(4, 2), None, &mut g).is_err());
    let gru = CellParams::<f64>::zeros(CellSpec { kind: CellKind::GcGru, ..spec }).unwrap();
    let mut gg = gru.zeros_like();
    assert!(gru.backward(Some(&lap), &cache, &Mat::zeros(4, 2), None, &mut gg).is_err());
    assert!(CellSpec::new(CellKind::GcGru, 4, 1, 0, 2).validate().is_err());
    assert!(CellSpec::new(CellKind::GcGru, 4, 1, 2, 0).validate().is_err());
}

#[test]
fn f32_cells_track_f64() {
    let lap = grid_graph::<f64>(3, 3, 8, KernelWidth::Auto).unwrap().scaled_laplacian().unwrap().clone();
    let spec = CellSpec::new(CellKind::GcLstmM2, 9, 1, 2, 3);
    let p = cell_init::<f64>(spec, 3).unwrap();
    let x = rand_mat(4, 9, 1, 1.0);
    let (s64, _) = p.step(Some(&lap), &x, &CellState::zeros(&spec)).unwrap();
    let p32: CellParams<f32> = p.cast();
    let (s32, _) = p32
        .step(Some(&lap.cast()), &x.cast(), &CellState::zeros(&spec))
        .unwrap();
    assert!(s32.h.cast::<f64>().max_abs_diff(&s64.h) < 1e-5);
}

#[test]
fn kind_names_round_trip() {
    for kind in CellKind::ALL {
        assert_eq!(kind.as_str().parse::<CellKind>().unwrap(), kind);
    }
    assert!("lstm".parse::<CellKind>().is_err());
    assert_eq!("shared".parse::<Peepholes>().unwrap(), Peepholes::Shared);
}
