use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_batch(len: usize, s_z: usize, seed: u64) -> XnnBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = (0..len * s_z).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    XnnBatch::new(s_z, z, y).unwrap()
}

fn config(n: usize) -> SraeConfig {
    SraeConfig { n_features: n, beta: 0.7, eta: 0.9, q: 3.0, ..SraeConfig::default() }
}

/// Second, index-by-index evaluation of the objective.
fn reference_loss(m: &SraeModel, batch: &XnnBatch) -> (f64, f64, f64) {
    let p = m.params();
    let (s, n, h) = (m.layout().s_z, m.layout().n, m.layout().hidden);
    let mut at = 0;
    let mut take = |len: usize| {
        let t = &p[at..at + len];
        at += len;
        t
    };
    let (w1, b1, w2, b2) = (take(h * s), take(h), take(n * h), take(n));
    let (w3, b3, w4, b4, v) = (take(h * n), take(h), take(s * h), take(s), take(n));
    let big_n = batch.len();
    let mut e_all = vec![vec![0.0; n]; big_n];
    let mut faith = 0.0;
    let mut err = vec![0.0; s];
    for i in 0..big_n {
        let z = batch.row(i);
        let mut h1 = vec![0.0; h];
        for j in 0..h {
            let mut a = b1[j];
            for k in 0..s {
                a += w1[j * s + k] * z[k];
            }
            h1[j] = a.tanh();
        }
        for l in 0..n {
            let mut a = b2[l];
            for j in 0..h {
                a += w2[l * h + j] * h1[j];
            }
            e_all[i][l] = a.tanh();
        }
        let mut h3 = vec![0.0; h];
        for j in 0..h {
            let mut a = b3[j];
            for l in 0..n {
                a += w3[j * n + l] * e_all[i][l];
            }
            h3[j] = a.tanh();
        }
        for k in 0..s {
            let mut r = b4[k];
            for j in 0..h {
                r += w4[k * h + j] * h3[j];
            }
            err[k] += (r - z[k]).powi(2) / big_n as f64;
        }
        let pred: f64 = (0..n).map(|l| v[l] * e_all[i][l]).sum();
        faith += (pred - batch.y_hat[i]).powi(2) / big_n as f64;
    }
    let c = m.config();
    let recon = c.beta / s as f64 * err.iter().map(|e| (1.0 + c.q * e).ln()).sum::<f64>();
    let mut pull = 0.0;
    for l in 0..n {
        for k in 0..n {
            if l != k {
                let col = |q: usize| e_all.iter().map(|e| e[q]).collect::<Vec<_>>();
                pull += cos2(&col(l), &col(k));
            }
        }
    }
    let pull = if n > 1 { c.eta * pull / (n * (n - 1)) as f64 } else { 0.0 };
    (faith, recon, pull)
}

#[test]
fn matches_the_reference_evaluation() {
    let batch = random_batch(4, 6, 11);
    let m = SraeModel::initialize(6, config(2), 5).unwrap();
    let t = srae_loss(&m, &batch).unwrap();
    let (f, r, p) = reference_loss(&m, &batch);
    assert!((t.faithfulness - f).abs() < 1e-12);
    assert!((t.reconstruction - r).abs() < 1e-12);
    assert!((t.pullaway - p).abs() < 1e-12);
    assert_eq!(t.total, t.faithfulness + t.reconstruction + t.pullaway);
}

#[test]
fn gradient_matches_central_differences() {
    let batch = random_batch(5, 4, 2);
    let m = SraeModel::initialize(4, config(2), 9).unwrap();
    let (_, g) = srae_gradient(&m, &batch).unwrap();
    let h = 1e-6;
    for k in 0..g.len() {
        let mut up = m.params().to_vec();
        let mut down = up.clone();
        up[k] += h;
        down[k] -= h;
        let f = |p: Vec<f64>| srae_loss(&SraeModel::from_params(4, *m.config(), p).unwrap(), &batch).unwrap().total;
        let numeric = (f(up) - f(down)) / (2.0 * h);
        let scale = numeric.abs().max(g[k].abs()).max(1e-4);
        assert!((numeric - g[k]).abs() / scale < 1e-4, "param {k}: {numeric} vs {}", g[k]);
    }
}

#[test]
fn identical_columns_give_full_pullaway() {
    // W2 rows equal and b2 equal → both features identical.
    let s = 3;
    let cfg = SraeConfig { n_features: 2, eta: 0.8, ..SraeConfig::default() };
    let mut m = SraeModel::initialize(s, cfg, 1).unwrap();
    let (h, n) = (m.layout().hidden, m.layout().n);
    let start = h * s + h;
    let row: Vec<f64> = m.params[start..start + h].to_vec();
    m.params[start + h..start + 2 * h].copy_from_slice(&row);
    let b2 = start + n * h;
    m.params[b2 + 1] = m.params[b2];
    let batch = random_batch(6, s, 3);
    let t = srae_loss(&m, &batch).unwrap();
    assert!((t.pullaway - 0.8).abs() < 1e-12);
    assert!((orthogonality_metric(&m, &batch).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn perfect_single_feature_model_has_zero_loss() {
    // With every weight zero, E = 0, the decoder outputs 0 and ŷ = 0 fits.
    let cfg = SraeConfig { n_features: 1, ..SraeConfig::default() };
    let l = Layout::new(3, 1).unwrap();
    let m = SraeModel::from_params(3, cfg, vec![0.0; l.len()]).unwrap();
    let batch = XnnBatch::new(3, vec![0.0; 9], vec![0.0; 3]).unwrap();
    let t = srae_loss(&m, &batch).unwrap();
    assert_eq!(t.total, 0.0);
    assert!(orthogonality_metric(&m, &batch).is_err());
}

#[test]
fn faithfulness_metric_edge_cases() {
    let l = Layout::new(3, 2).unwrap();
    let m = SraeModel::from_params(3, config(2), vec![0.0; l.len()]).unwrap();
    let batch = random_batch(8, 3, 4);
    let f = faithfulness_metric(&m, &batch).unwrap();
    let mean_sq = batch.y_hat.iter().map(|y| y * y).sum::<f64>() / 8.0;
    assert!((f.mse - mean_sq).abs() < 1e-15);
    assert_eq!(f.correlation, None);

    // A batch labelled with the model's own predictions is matched exactly.
    let m = SraeModel::initialize(3, config(2), 4).unwrap();
    let y: Vec<f64> = (0..8).map(|i| m.predict(batch.row(i))).collect();
    let own = XnnBatch::new(3, batch.z.clone(), y).unwrap();
    let f = faithfulness_metric(&m, &own).unwrap();
    assert_eq!(f.mse, 0.0);
    assert!((f.correlation.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn orthogonal_columns_score_zero() {
    assert_eq!(cos2(&[1.0, 0.0, 1.0], &[0.0, 2.0, 0.0]), 0.0);
    assert!((cos2(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cos2(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

#[test]
fn zero_epochs_returns_initialization() {
    let batch = random_batch(6, 4, 1);
    let cfg = SraeConfig { max_epochs: 0, ..config(2) };
    let (m, r) = train_srae(&batch, &cfg, 3).unwrap();
    assert_eq!(m, SraeModel::initialize(4, cfg, 3).unwrap());
    assert_eq!(r.epochs, 0);
}

#[test]
fn training_is_deterministic_and_descends() {
    let batch = linear_task(40, 4, 0.5, 0.3, 2).unwrap();
    let cfg = SraeConfig { max_epochs: 300, ..SraeConfig::default() };
    let (a, ra) = train_srae(&batch, &cfg, 8).unwrap();
    let (b, _) = train_srae(&batch, &cfg, 8).unwrap();
    assert_eq!(a, b);
    let start = srae_loss(&SraeModel::initialize(4, cfg, 8).unwrap(), &batch).unwrap();
    assert!(ra.final_terms.total < start.total);
}

#[test]
fn divergence_is_reported() {
    let batch = linear_task(20, 4, 50.0, 30.0, 2).unwrap();
    let cfg = SraeConfig { learning_rate: 1e6, max_epochs: 200, ..SraeConfig::default() };
    assert!(matches!(train_srae(&batch, &cfg, 1), Err(Error::Training { .. })));
}

#[test]
fn rejects_invalid_shapes() {
    assert!(Layout::new(4, 4).is_err());
    assert!(Layout::new(4, 0).is_err());
    assert!(XnnBatch::new(3, vec![0.0; 5], vec![0.0; 2]).is_err());
    assert!(XnnBatch::new(3, vec![0.0; 3], vec![0.0]).is_err());
    let m = SraeModel::initialize(4, config(2), 1).unwrap();
    assert!(srae_loss(&m, &random_batch(3, 5, 1)).is_err());
}

#[test]
fn file_round_trip() {
    let m = SraeModel::initialize(6, config(3), 2).unwrap();
    let bytes = encode_srae(&m);
    assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
    let back = decode_srae(&bytes).unwrap();
    assert_eq!(encode_srae(&back), bytes);
    assert_eq!(back.config().beta as f32, 0.7);
    assert!(crate::model::file::decode_cnn(&bytes).is_err());
    assert!(decode_srae(&bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn or_task_stays_faithful() {
    // Either feature suffices; whether the two merge into one x-feature is
    // left open, only faithfulness is required.
    let data = or_task(120, 6, 5).unwrap();
    let cfg = SraeConfig { max_epochs: 4000, ..SraeConfig::default() };
    let (m, _) = train_srae(&data, &cfg, 2).unwrap();
    let f = faithfulness_metric(&m, &data).unwrap();
    assert!(f.correlation.unwrap() > 0.95, "{f:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reconstruction_scale_identity(q in 0.1f64..20.0, c in 0.1f64..10.0, e in 0.0f64..2.0) {
        // β/S_z · log(1 + q·e) is unchanged under q → c·q, e → e/c
        let lhs = (q * e).ln_1p();
        let rhs = (c * q * (e / c)).ln_1p();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn loss_agrees_with_reference(seed in 0u64..1000, n in 1usize..4) {
        let batch = random_batch(5, 5, seed);
        let m = SraeModel::initialize(5, config(n), seed + 1).unwrap();
        let t = srae_loss(&m, &batch).unwrap();
        let (f, r, p) = reference_loss(&m, &batch);
        prop_assert!((t.total - (f + r + p)).abs() < 1e-10);
        prop_assert!(t.total >= 0.0);
    }
}
