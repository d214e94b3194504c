//! Loss oracles, optimizer reference and small end-to-end training runs.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tab_core::model::{BottleneckKind, TabModel};
use tab_core::numerics::{GradBuffer, Graph, ParamStore, Tensor};
use tab_core::synthdata::{GroundtruthAttention, Split};
use tab_core::training::{
    attention_loss, attention_loss_full_row, lr_at, retrieval_loss, stage1_graph, train_stage1, train_stage2, Adam, AdamConfig, ScheduleKind,
    TrainRecipe,
};

use common::{tiny_config, tiny_dataset};

fn brute_retrieval(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let b = v.len();
    let s: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| v[i].iter().zip(&t[j]).map(|(a, c)| a * c).sum::<f64>() / (norm(&v[i]) * norm(&t[j])) / tau)
                .collect()
        })
        .collect();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..b {
        let row_lse = s[i].iter().map(|x| x.exp()).sum::<f64>().ln();
        let col_lse = (0..b).map(|k| s[k][i].exp()).sum::<f64>().ln();
        i2t += row_lse - s[i][i];
        t2i += col_lse - s[i][i];
    }
    (i2t + t2i) / b as f64
}

#[test]
fn retrieval_loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for b in [2usize, 3, 8] {
        let k = 5;
        let v: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let t: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let tau: f64 = rng.random_range(0.05..1.0);
        let mut g = Graph::new();
        let vv = g.constant(vec![b, k], v.concat()).unwrap();
        let tt = g.constant(vec![b, k], t.concat()).unwrap();
        let lt = g.constant(vec![1], vec![tau.ln()]).unwrap();
        let loss = retrieval_loss(&mut g, vv, tt, lt).unwrap();
        assert!((g.scalar(loss) - brute_retrieval(&v, &t, tau)).abs() < 1e-10);
    }
}

fn gt_one_hot(n: usize, hot: usize) -> GroundtruthAttention {
    let mut g = vec![0.0; n];
    g[hot] = 1.0;
    GroundtruthAttention { g, cls_target: 0.0 }
}

fn att_loss(row: &[f64], gt: &GroundtruthAttention) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(vec![1, row.len()], row.to_vec()).unwrap();
    let l = attention_loss(&mut g, a, gt).unwrap();
    g.scalar(l)
}

#[test]
fn attention_loss_closed_forms() {
    for n in [4usize, 16, 64] {
        // uniform patch mass against a one-hot target: 1 − 1/√n regardless of the [CLS] entry
        let mut row = vec![0.3 / n as f64; n + 1];
        row[0] = 0.7;
        assert!((att_loss(&row, &gt_one_hot(n, n / 2)) - (1.0 - 1.0 / (n as f64).sqrt())).abs() < 1e-12);
    }
    let none = GroundtruthAttention { g: vec![0.0; 4], cls_target: 1.0 };
    assert!(att_loss(&[1.0, 0.0, 0.0, 0.0, 0.0], &none).abs() < 1e-15);
    // a row with [CLS] mass 1/2 and one patch 1/2 sits at 45° from (1, 0, …)
    assert!((att_loss(&[0.5, 0.5, 0.0, 0.0, 0.0], &none) - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
    assert!(att_loss(&[0.9, 0.0, 0.1, 0.0, 0.0], &gt_one_hot(4, 1)).abs() < 1e-12);
}

#[test]
fn full_row_targets_also_penalise_the_cls_entry() {
    let full = |row: &[f64], gt: &GroundtruthAttention| {
        let mut g = Graph::new();
        let a = g.constant(vec![1, row.len()], row.to_vec()).unwrap();
        let l = attention_loss_full_row(&mut g, a, gt).unwrap();
        g.scalar(l)
    };
    let gt = gt_one_hot(4, 1);
    assert!(full(&[0.0, 0.0, 1.0, 0.0, 0.0], &gt).abs() < 1e-15);
    // same patch direction, [CLS] mass 0.9: cos = 0.1 / √0.82
    let row = [0.9, 0.0, 0.1, 0.0, 0.0];
    assert!((full(&row, &gt) - (1.0 - 0.1 / 0.82f64.sqrt())).abs() < 1e-12);
    // no-change pairs see the same loss under both forms
    let none = GroundtruthAttention { g: vec![0.0; 4], cls_target: 1.0 };
    assert_eq!(full(&[0.5, 0.5, 0.0, 0.0, 0.0], &none), att_loss(&[0.5, 0.5, 0.0, 0.0, 0.0], &none));
}

proptest! {
    #[test]
    fn attention_loss_is_bounded(xs in prop::collection::vec(0.0f64..1.0, 9), hot in 0usize..8) {
        let l = att_loss(&xs, &gt_one_hot(8, hot));
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
    }
}

/// Textbook Adam on plain `f64`s.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, c: &AdamConfig) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - c.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - c.beta2.powi(self.t));
            p[i] -= lr * c.weight_decay * p[i];
            p[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

#[test]
fn adam_matches_scalar_reference() {
    // minimise Σ (p_i − c_i)² for three parameters
    let target = [1.5, -0.25, 3.0];
    for config in [AdamConfig::default(), AdamConfig { lr: 1e-2, beta1: 0.8, beta2: 0.95, eps: 1e-6, weight_decay: 0.1 }] {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::new(vec![3], vec![0.1, 0.2, -0.3]).unwrap()).unwrap();
        let mut adam = Adam::new(config, &store);
        let mut reference = RefAdam { m: vec![0.0; 3], v: vec![0.0; 3], t: 0 };
        let mut p_ref = vec![0.1, 0.2, -0.3];
        for step in 0..50 {
            let lr = lr_at(ScheduleKind::Cosine, config.lr, 0.1, step, 50);
            let p = store.get(id).data().to_vec();
            let grad: Vec<f64> = p.iter().zip(&target).map(|(a, c)| 2.0 * (a - c)).collect();
            let mut buf = GradBuffer::new(1);
            buf.accumulate(id, &grad);
            adam.step(&mut store, &buf, lr);
            let g_ref: Vec<f64> = p_ref.iter().zip(&target).map(|(a, c)| 2.0 * (a - c)).collect();
            reference.step(&mut p_ref, &g_ref, lr, &config);
            for (a, b) in store.get(id).data().iter().zip(&p_ref) {
                assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
            }
        }
        assert_eq!(adam.steps(), 50);
    }
}

#[test]
fn schedules_warm_up_then_decay_to_zero() {
    let total = 100;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(kind, 1.0, 0.1, s, total)).collect();
        assert!(lrs[..10].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[total - 1] < 0.05);
        assert!(lrs.iter().all(|&l| (0.0..=1.0).contains(&l)));
    }
    assert!((0..total).all(|s| lr_at(ScheduleKind::Constant, 0.5, 0.0, s, total) == 0.5));
}

fn stage2_recipe(epochs: usize) -> TrainRecipe {
    TrainRecipe { epochs, batch_size: 4, ..TrainRecipe::toy_stage2() }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let data = tiny_dataset(12, 1);
    let mut model = TabModel::<f64>::new(tiny_config(BottleneckKind::Tab), 3).unwrap();
    let before = model.store.clone();
    let mut recipe = stage2_recipe(1);
    recipe.adam.lr = 0.0;
    recipe.adam.weight_decay = 0.1;
    train_stage2(&mut model, &data, &recipe, &mut |_| Ok(())).unwrap();
    for ((_, _, a), (_, _, b)) in model.store.iter().zip(before.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn stage2_training_is_deterministic() {
    let data = tiny_dataset(12, 2);
    let run = || {
        let mut model = TabModel::<f32>::new(tiny_config(BottleneckKind::Tab), 5).unwrap();
        let mut log = Vec::new();
        train_stage2(&mut model, &data, &stage2_recipe(2), &mut |m| {
            log.push(m.clone());
            Ok(())
        })
        .unwrap();
        (model.store, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(la.len(), 2);
    assert!(la.iter().all(|m| m.stage == 2 && m.loss.is_finite() && m.r_at_1.is_none()));
}

#[test]
fn stage1_first_epoch_lowers_the_retrieval_loss() {
    let data = tiny_dataset(64, 3);
    let train: Vec<_> = data.iter().filter(|p| p.split == Split::Train).cloned().collect();
    let mut model = TabModel::<f32>::new(tiny_config(BottleneckKind::Tab), 7).unwrap();
    let loss_of = |model: &TabModel<f32>| {
        let members: Vec<_> = train.iter().collect();
        let mut g = Graph::new();
        let (loss, _) = stage1_graph(&mut g, model, &members, &vec![0; members.len()]).unwrap();
        g.scalar(loss)
    };
    let init = loss_of(&model);
    let recipe = TrainRecipe { epochs: 1, batch_size: 8, warmup: 0.0, ..TrainRecipe::toy_stage1() };
    let mut r1 = None;
    train_stage1(&mut model, &train, &recipe, &mut |m| {
        r1 = m.r_at_1;
        Ok(())
    })
    .unwrap();
    assert!(loss_of(&model) < init);
    assert!(r1.is_some_and(|r| (0.0..=1.0).contains(&r)));
}

#[test]
fn recipes_validate_their_ranges() {
    let mut r = TrainRecipe::toy_stage1();
    r.validate().unwrap();
    r.warmup = 1.0;
    assert!(r.validate().is_err());
    r = TrainRecipe { epochs: 0, ..TrainRecipe::toy_stage2() };
    assert!(r.validate().is_err());
    for name in ["toy_stage1", "toy_stage2", "paper_stage1_table", "paper_stage1_text", "paper_stage2"] {
        TrainRecipe::preset(name).unwrap().validate().unwrap();
    }
    assert!(TrainRecipe::preset("nope").is_none());
    assert_eq!(TrainRecipe::paper_stage1_text().adam.lr, 1e-7);
    assert_eq!(TrainRecipe::paper_stage1_table().adam.lr, 1e-4);
}
