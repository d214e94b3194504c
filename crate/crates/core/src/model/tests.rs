use super::*;
use crate::synthdata::{generate_pair, ChangeKind, SceneParams};

fn tiny(kind: BottleneckKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        image_size: 16,
        patch_size: 8,
        enc_layers: 1,
        lm_enc_layers: 1,
        lm_dec_layers: 1,
        text_layers: 1,
        proj_dim: 8,
        ffn_mult: 2,
        max_caption_len: 6,
        bottleneck: kind,
        ..Default::default()
    }
}

fn scene() -> SceneParams {
    SceneParams { grid: 2, image_size: 16, patch_size: 8 }
}

fn pair(seed: u64) -> (Image, Image) {
    let kind = if seed % 2 == 0 { ChangeKind::Add } else { ChangeKind::Remove };
    let p = generate_pair(seed as u32, seed, kind, &scene()).unwrap();
    (p.image_a, p.image_b)
}

#[test]
fn patch_matrix_is_row_major_over_patches() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 0).unwrap();
    let mut img = Image::filled(16, 16, [0.0; 3]);
    // mark pixel (x=9, y=1) channel 2, which lies in patch (0, 1) at local (1, 1)
    img.data[(16 + 9) * 3 + 2] = 1.0;
    let pm = m.patch_matrix(&img).unwrap();
    let dim = 8 * 8 * 3;
    let hot: Vec<usize> = pm.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
    assert_eq!(hot, vec![dim + (8 + 1) * 3 + 2]);
    assert!(m.patch_matrix(&Image::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn forward_shapes_and_gate_law() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 1).unwrap();
    let (a, b) = pair(2);
    let out = m.forward_pair(&a, &b, &RowOverride::none()).unwrap();
    assert!(out.tokens.len() <= 6);
    for side in &out.state.sides {
        assert_eq!(side.a_cls.len(), 5);
        assert_eq!(side.heads.len(), 1);
        assert!((side.a_cls.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mass: f64 = side.a_cls[1..].iter().sum();
        let mass_prime: f64 = side.a_prime[1..].iter().sum();
        assert!((mass_prime - mass * mass).abs() < 1e-12);
        assert!((side.gate - mass).abs() < 1e-12);
        assert_eq!(side.p.len(), 8);
    }
}

#[test]
fn baseline_keeps_one_map_per_head() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::MhsaBaseline), 1).unwrap();
    let (a, b) = pair(3);
    let out = m.forward_pair(&a, &b, &RowOverride::none()).unwrap();
    assert_eq!(out.state.sides[0].heads.len(), 4);
    let mean: Vec<f64> = (0..5).map(|j| out.state.sides[0].heads.iter().map(|h| h[j]).sum::<f64>() / 4.0).collect();
    for (x, y) in mean.iter().zip(&out.state.sides[0].a_cls) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_gate_makes_p_image_independent() {
    let m = TabModel::<f32>::new(tiny(BottleneckKind::Tab), 4).unwrap();
    let zero = vec![1.0, 0.0, 0.0, 0.0, 0.0];
    let edit = RowOverride { rows: [Some(zero.clone()), Some(zero)] };
    let (a1, b1) = pair(5);
    let (a2, b2) = pair(6);
    let o1 = m.forward_pair(&a1, &b1, &edit).unwrap();
    let o2 = m.forward_pair(&a2, &b2, &edit).unwrap();
    assert_eq!(o1.state.sides[0].gate, 0.0);
    for s in 0..2 {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&o1.state.sides[s].p), bits(&o2.state.sides[s].p));
    }
    assert_eq!(o1.caption, o2.caption);
}

#[test]
fn baseline_leaks_query_features_under_zero_attention() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::MhsaBaseline), 4).unwrap();
    let zero = vec![1.0, 0.0, 0.0, 0.0, 0.0];
    let edit = RowOverride { rows: [Some(zero.clone()), Some(zero)] };
    let (a1, b1) = pair(5);
    let (a2, b2) = pair(6);
    let o1 = m.forward_pair(&a1, &b1, &edit).unwrap();
    let o2 = m.forward_pair(&a2, &b2, &edit).unwrap();
    assert_ne!(o1.state.sides[0].p, o2.state.sides[0].p);
}

#[test]
fn self_row_edit_is_a_no_op() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 8).unwrap();
    let (a, b) = pair(9);
    let base = m.forward_pair(&a, &b, &RowOverride::none()).unwrap();
    let rows = [Some(base.state.sides[0].a_cls.clone()), Some(base.state.sides[1].a_cls.clone())];
    let edited = m.forward_pair(&a, &b, &RowOverride { rows }).unwrap();
    assert_eq!(edited.caption, base.caption);
    for s in 0..2 {
        for (x, y) in edited.state.sides[s].a_prime.iter().zip(&base.state.sides[s].a_prime) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn edit_row_length_is_checked() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 8).unwrap();
    let (a, b) = pair(9);
    let edit = RowOverride { rows: [Some(vec![1.0; 3]), None] };
    assert!(matches!(m.forward_pair(&a, &b, &edit), Err(TabError::Edit { .. })));
}

#[test]
fn wo_bias_shifts_tab_output_by_a_constant() {
    let mut m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 10).unwrap();
    let Bottleneck::Tab(p) = m.bottleneck else { unreachable!() };
    let h_of = |m: &TabModel<f64>, seed: u64| {
        let (a, b) = pair(seed);
        let mut g = Graph::new();
        let vars = m.forward_bottleneck(&mut g, &a, &b, &RowOverride::none()).unwrap();
        g.value(vars.sides[0].h_cls).to_vec()
    };
    let before: Vec<_> = [11, 12].iter().map(|&s| h_of(&m, s)).collect();
    let bias = p.wo.b.unwrap();
    m.store.get_mut(bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let after: Vec<_> = [11, 12].iter().map(|&s| h_of(&m, s)).collect();
    let delta = |i: usize| before[i].iter().zip(&after[i]).map(|(x, y)| x - y).collect::<Vec<_>>();
    for (x, y) in delta(0).iter().zip(delta(1)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn share_kv_drops_value_projection_from_the_graph() {
    let cfg = ModelConfig { share_kv: true, ..tiny(BottleneckKind::Tab) };
    let m = TabModel::<f64>::new(cfg, 0).unwrap();
    let Bottleneck::Tab(p) = m.bottleneck else { unreachable!() };
    let (a, b) = pair(1);
    let mut g = Graph::new();
    let vars = m.forward_bottleneck(&mut g, &a, &b, &RowOverride::none()).unwrap();
    let loss = g.sum(vars.sides[0].p);
    g.backward(loss).unwrap();
    let grads = g.param_grads(m.store.len());
    assert!(grads.get(p.wv).is_none());
    assert!(grads.get(p.wk).is_some());
}

#[test]
fn text_encoder_and_decoder_shapes() {
    let m = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 0).unwrap();
    let mut g = Graph::new();
    let e = m.encode_text(&mut g, &[5, 6, 7]).unwrap();
    assert_eq!(g.shape(e), &[1, 8]);
    assert!(m.encode_text(&mut g, &[5; 7]).is_err());
    let p = g.constant(vec![1, 8], vec![0.1; 8]).unwrap();
    let mem = m.lm_memory(&mut g, p, p).unwrap();
    let logits = m.decoder_logits(&mut g, mem, &[BOS, 5]).unwrap();
    assert_eq!(g.shape(logits), &[2, m.config.vocab_size]);
}

#[test]
fn cast_preserves_parameters() {
    let m = TabModel::<f32>::new(tiny(BottleneckKind::Tab), 0).unwrap();
    let m64: TabModel<f64> = m.cast();
    let back: TabModel<f32> = m64.cast();
    for (id, _, t) in m.store.iter() {
        assert_eq!(back.store.get(id).data(), t.data());
    }
}

#[test]
fn pair_difference_vanishes_on_identical_images() {
    let with = TabModel::<f64>::new(tiny(BottleneckKind::Tab), 4).unwrap();
    let mut without = with.clone();
    without.config.pair_difference = false;
    let (a, b) = pair(6);
    let run = |m: &TabModel<f64>, x: &Image, y: &Image| m.forward_pair(x, y, &RowOverride::none()).unwrap().state;
    assert_eq!(run(&with, &a, &a), run(&without, &a, &a));
    assert_ne!(run(&with, &a, &b), run(&without, &a, &b));
}
