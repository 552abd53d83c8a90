use mixstyle_core::graph::{Graph, Var};
use mixstyle_core::mixstyle::{Strategy as Order, make_reference_permutation};
use mixstyle_core::semisup::{
    Classifier, LabeledExample, SemiSupConfig, SemiSupTask, UnlabeledExample, build_semisup_batch, joint_loss,
    masked_pseudo_label_loss, pseudo_label, supervised_loss, unlabeled_loss,
};
use mixstyle_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Global average pool followed by a linear layer.
struct Probe {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
    bound: Option<(Var, Var)>,
}

impl Probe {
    fn new(weight: &[f64], bias: &[f64], classes: usize) -> Self {
        Self {
            weight: Tensor::from_f64(&[weight.len() / classes, classes], weight).unwrap(),
            bias: Tensor::from_f64(&[classes], bias).unwrap(),
            bound: None,
        }
    }
}

impl Classifier<f64> for Probe {
    fn logits(&mut self, g: &mut Graph<f64>, input: Var, _train: bool) -> mixstyle_core::Result<Var> {
        let (w, b) = match self.bound {
            Some(p) => p,
            None => {
                let p = (g.param(self.weight.clone()), g.param(self.bias.clone()));
                self.bound = Some(p);
                p
            }
        };
        let pooled = g.global_avg_pool(input)?;
        g.linear(pooled, w, b)
    }
}

fn image(seed: usize) -> Tensor<f64> {
    Tensor::from_fn(&[3, 8, 8], |i| ((i * 7 + seed * 13) % 19) as f64 / 19.0)
}

fn labeled(n: usize) -> Vec<LabeledExample<f64>> {
    (0..n)
        .map(|i| LabeledExample { image: image(i), label: i % 3, domain_id: 0 })
        .collect()
}

fn unlabeled(n: usize) -> Vec<UnlabeledExample<f64>> {
    (0..n)
        .map(|i| UnlabeledExample { image: image(100 + i), domain_id: 1, pseudo_label: None })
        .collect()
}

fn probe() -> Probe {
    Probe::new(&[0.3, -0.2, 0.5, 1.0, 0.1, -0.4, -0.6, 0.2, 0.3], &[0.1, 0.0, -0.1], 3)
}

/// Strongly prefers class 0 whatever the image.
fn confident_probe() -> Probe {
    Probe::new(&[0.0; 9], &[30.0, 0.0, 0.0], 3)
}

#[test]
fn supervised_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let batch: Vec<_> = labeled(4).into_iter().map(|e| LabeledExample { label: 0, ..e }).collect();
    let l = supervised_loss(&mut g, &mut confident_probe(), &batch, &mut rng).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    let mut g = Graph::new();
    let mut uniform = Probe::new(&[0.0; 9], &[0.0; 3], 3);
    let l = supervised_loss(&mut g, &mut uniform, &labeled(5), &mut rng).unwrap();
    assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    assert!(supervised_loss(&mut g, &mut uniform, &[], &mut rng).is_err());
}

#[test]
fn unreachable_threshold_masks_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let mut batch = unlabeled(6);
    let l = unlabeled_loss(&mut g, &mut confident_probe(), &mut batch, 1.01, &mut rng).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    assert!(batch.iter().all(|e| e.pseudo_label.is_none()));
}

#[test]
fn self_consistent_model_has_near_zero_unlabeled_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let mut batch = unlabeled(6);
    let l = unlabeled_loss(&mut g, &mut confident_probe(), &mut batch, 0.95, &mut rng).unwrap();
    assert!(g.value(l).data()[0] < 1e-3);
    assert!(batch.iter().all(|e| e.pseudo_label.map(|p| p.0) == Some(0)));
}

#[test]
fn one_confident_example_in_a_pair() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 5.0, -3.0]).unwrap());
    let mut batch = unlabeled(2);
    batch[0].pseudo_label = Some((1, 0.99));
    let l = masked_pseudo_label_loss(&mut g, logits, &batch).unwrap();
    let expected = (1.0 + (-1f64).exp()).ln() / 2.0;
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    assert!((g.value(l).data()[0] - 0.1566).abs() < 1e-4);
}

#[test]
fn pseudo_labels_do_not_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let mut model = Probe::new(&[0.0; 9], &[6.0, 0.0, 0.0], 3);
    let mut batch = unlabeled(4);
    let out = joint_loss(&mut g, &mut model, &labeled(4), &mut batch, &SemiSupConfig::default(), &mut rng).unwrap();
    assert!(out.confident > 0);
    let grads = g.backward(out.total).unwrap();
    let weak = out.weak_logits.unwrap();
    if let Some(gw) = grads.get(weak) {
        assert!(gw.data().iter().all(|v| *v == 0.0));
    }
    let (w, _) = model.bound.unwrap();
    assert!(grads.get(w).unwrap().data().iter().any(|v| *v != 0.0));
}

#[test]
fn empty_unlabeled_set_is_plain_supervised_training() {
    let cfg = SemiSupConfig::default();
    let mut g1 = Graph::new();
    let out = joint_loss(&mut g1, &mut probe(), &labeled(6), &mut [], &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g2 = Graph::new();
    let sup = supervised_loss(&mut g2, &mut probe(), &labeled(6), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(g1.value(out.total).data(), g2.value(sup).data());
    assert!(out.unlabeled.is_none());
}

#[test]
fn semisup_batch_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let domains: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let b = build_semisup_batch(&domains, &domains, &[0, 1], None, 8, SemiSupTask::Ssdg, &mut rng).unwrap();
    for d in 0..2 {
        assert_eq!(b.labeled.iter().filter(|&&i| domains[i] == d).count(), 2);
        assert_eq!(b.unlabeled.iter().filter(|&&i| domains[i] == d).count(), 2);
    }

    let target: Vec<usize> = vec![2; 10];
    let b = build_semisup_batch(&domains, &target, &[0, 1], Some(2), 4, SemiSupTask::Uda, &mut rng).unwrap();
    assert_eq!(b.groups(), vec![0, 0, 1, 1]);
    let perm = make_reference_permutation(4, Order::CrossDomain, &b.groups(), &mut rng).unwrap();
    assert!((0..2).all(|i| perm[i] >= 2) && (2..4).all(|i| perm[i] < 2));

    let err = build_semisup_batch(&domains, &[2; 1], &[0, 1], Some(2), 4, SemiSupTask::Uda, &mut rng).unwrap_err();
    assert!(err.to_string().contains("unlabeled-target/domain 2"), "{err}");
    assert!(build_semisup_batch(&domains, &domains, &[0, 1], None, 5, SemiSupTask::Ssdg, &mut rng).is_err());
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
        let z: f64 = v.iter().sum::<f64>() + 1e-9;
        let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-9 / v.len() as f64) / z).collect();
        let drift = 1.0 - p.iter().sum::<f64>();
        p[0] += drift;
        p
    })
}

proptest! {
    #[test]
    fn raising_tau_never_adds_pseudo_labels(
        rows in prop::collection::vec(distribution(4), 1..30),
        t1 in 0.01f64..1.0,
        t2 in 0.01f64..1.0,
    ) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let count = |tau| rows.iter().filter(|r| pseudo_label(r, tau).unwrap().is_some()).count();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn pseudo_label_is_the_argmax(row in distribution(5)) {
        let (class, conf) = pseudo_label(&row, 0.0).unwrap().unwrap();
        prop_assert!(row.iter().all(|p| *p <= conf));
        prop_assert!(row[..class].iter().all(|p| *p < conf));
        prop_assert!((0.0..=1.0).contains(&conf));
    }
}
