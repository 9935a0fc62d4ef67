use fracvit::dec::*;
use fracvit::io::Matrix;
use fracvit::metrics::{ari, clustering_accuracy, nmi};
use fracvit::Error;
use fracvit_oracles::dec_ref::{blobs, soft_assign_ref, target_ref};
use proptest::prelude::*;

fn m(rows: &[Vec<f32>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn to64(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.rows).map(|i| x.row(i).iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn equidistant_point_splits_evenly() {
    let q = soft_assign(&m(&[vec![0.0, 0.0]]), &m(&[vec![1.0, 0.0], vec![-1.0, 0.0]])).unwrap();
    assert!((q.data[0] - 0.5).abs() < 1e-7 && (q.data[1] - 0.5).abs() < 1e-7);
}

#[test]
fn point_on_a_centroid_with_a_far_rival() {
    // Kernel values 1 and 1/(1+100): q_1 = 1 / (1 + 1/101) = 101/102.
    let q = soft_assign(&m(&[vec![0.0]]), &m(&[vec![0.0], vec![10.0]])).unwrap();
    assert!((q.data[0] as f64 - 101.0 / 102.0).abs() < 1e-7);
}

#[test]
fn far_centroid_weight_falls_monotonically() {
    let z = m(&[vec![0.0, 0.0]]);
    let mut last = 1.0f32;
    for step in 1..50 {
        let d = step as f32 * 0.5;
        let q = soft_assign(&z, &m(&[vec![0.2, 0.0], vec![d, d]])).unwrap();
        assert!(q.data[1] < last);
        last = q.data[1];
    }
    assert!(last < 0.01);
}

#[test]
fn target_matches_loop_oracle() {
    let mut rng = fracvit_oracles::rng(3);
    let z = m(&(0..5).map(|_| fracvit_oracles::random_vec(&mut rng, 4, -2.0, 2.0)).collect::<Vec<_>>());
    let mu = m(&(0..3).map(|_| fracvit_oracles::random_vec(&mut rng, 4, -2.0, 2.0)).collect::<Vec<_>>());
    let q = soft_assign(&z, &mu).unwrap();
    let q_ref = soft_assign_ref(&to64(&z), &to64(&mu));
    let p = target_distribution(&q);
    let p_ref = target_ref(&q_ref);
    for i in 0..5 {
        for j in 0..3 {
            assert!((q.row(i)[j] as f64 - q_ref[i][j]).abs() < 1e-6);
            assert!((p.row(i)[j] as f64 - p_ref[i][j]).abs() < 1e-6);
        }
    }
    // Same computation in f64 end to end agrees far more tightly.
    let p_from_q = target_ref(&to64(&q));
    for i in 0..5 {
        for j in 0..3 {
            assert!((p.row(i)[j] as f64 - p_from_q[i][j]).abs() < 1e-7);
        }
    }
}

#[test]
fn one_hot_and_uniform_targets() {
    let onehot = m(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(target_distribution(&onehot), onehot);
    let uniform = m(&vec![vec![0.25; 4]; 8]);
    assert!(target_distribution(&uniform).data.iter().all(|v| (v - 0.25).abs() < 1e-7));
}

#[test]
fn kmeans_recovers_blob_means() {
    let b = blobs(7, 60, 10, 12.0, 21);
    let km = kmeans_pp(&b.points, 7, 10, 4).unwrap();
    let mut used = vec![false; 7];
    for j in 0..7 {
        let c = km.centroids.row(j);
        let (best, d) = b
            .means
            .iter()
            .enumerate()
            .map(|(i, mu)| (i, mu.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt()))
            .fold((0, f32::INFINITY), |a, c| if c.1 < a.1 { c } else { a });
        assert!(d < 1.0, "centroid {j} is {d} from the nearest mean");
        assert!(!used[best]);
        used[best] = true;
    }
    assert_eq!(clustering_accuracy(&b.labels, &km.labels).unwrap(), 1.0);
}

#[test]
fn kmeans_with_k_equal_to_n_returns_the_points() {
    let pts = m(&[vec![0.0, 1.0], vec![3.0, -1.0], vec![5.0, 5.0], vec![-2.0, 0.5]]);
    let km = kmeans_pp(&pts, 4, 3, 0).unwrap();
    let mut got: Vec<Vec<f32>> = (0..4).map(|j| km.centroids.row(j).to_vec()).collect();
    let mut want: Vec<Vec<f32>> = (0..4).map(|i| pts.row(i).to_vec()).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
}

#[test]
fn kmeans_on_two_values() {
    let rows: Vec<Vec<f32>> = (0..30).map(|i| if i % 3 == 0 { vec![1.0, 1.0] } else { vec![-4.0, 2.0] }).collect();
    let km = kmeans_pp(&m(&rows), 2, 5, 9).unwrap();
    let mut got: Vec<Vec<f32>> = (0..2).map(|j| km.centroids.row(j).to_vec()).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, vec![vec![-4.0, 2.0], vec![1.0, 1.0]]);
}

#[test]
fn too_few_distinct_points_is_a_config_error() {
    let rows = vec![vec![1.0f32]; 10];
    assert!(matches!(kmeans_pp(&m(&rows), 2, 1, 0), Err(Error::Config(_))));
}

#[test]
fn kmeans_is_deterministic() {
    let b = blobs(4, 20, 3, 4.0, 2);
    assert_eq!(kmeans_pp(&b.points, 4, 3, 7).unwrap(), kmeans_pp(&b.points, 4, 3, 7).unwrap());
}

#[test]
fn constant_features_reconstruct_exactly() {
    let x = m(&vec![vec![0.3, -0.7, 1.1, 0.0]; 32]);
    let mut ae = Autoencoder::new(&[4, 8, 2], Activation::Relu, 1).unwrap();
    let losses = ae.pretrain(&x, &PretrainConfig { epochs: 300, batch_size: 32, lr: 1e-2, seed: 0 }).unwrap();
    assert!(*losses.last().unwrap() < 1e-4, "final loss {}", losses.last().unwrap());
    let z = ae.encode(&x).unwrap();
    assert!((1..32).all(|i| z.row(i) == z.row(0)));
}

#[test]
fn linear_identity_width_fits_random_data() {
    let mut rng = fracvit_oracles::rng(12);
    let x = m(&(0..64).map(|_| fracvit_oracles::random_vec(&mut rng, 6, -1.0, 1.0)).collect::<Vec<_>>());
    let mut ae = Autoencoder::new(&[6, 6], Activation::Linear, 2).unwrap();
    let losses = ae.pretrain(&x, &PretrainConfig { epochs: 400, batch_size: 16, lr: 1e-2, seed: 1 }).unwrap();
    assert!(ae.reconstruction_error(&x).unwrap() < 1e-4, "error {}", ae.reconstruction_error(&x).unwrap());
    let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = losses.chunks(10).map(smooth).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0] * 1.05));
}

#[test]
fn ten_epoch_smoothed_loss_decreases() {
    let b = blobs(3, 30, 8, 5.0, 6);
    let mut ae = Autoencoder::new(&[8, 16, 3], Activation::Relu, 5).unwrap();
    let losses = ae.pretrain(&b.points, &PretrainConfig { epochs: 100, batch_size: 32, lr: 1e-3, seed: 2 }).unwrap();
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
}

#[test]
fn clustered_data_converges_at_the_first_check() {
    let b = blobs(7, 30, 10, 40.0, 1);
    let mut enc = Autoencoder::new(&[10], Activation::Linear, 0).unwrap();
    let km = kmeans_pp(&b.points, 7, 10, 0).unwrap();
    let cfg = DecConfig { update_interval: 20, ..DecConfig::default() };
    let out = dec_train(&mut enc, km.centroids, &b.points, Some(&b.labels), &cfg).unwrap();
    assert!(out.converged);
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.history[1].iteration, 20);
    assert_eq!(out.history[1].delta_label, 0.0);
    assert!(out.history[1].loss <= out.history[0].loss);
}

#[test]
fn blob_recovery_with_trainable_encoder() {
    let b = blobs(7, 200, 10, 10.0, 77);
    let mut ae = Autoencoder::new(&[10, 32, 10], Activation::Relu, 3).unwrap();
    ae.pretrain(&b.points, &PretrainConfig { epochs: 40, batch_size: 64, lr: 1e-3, seed: 3 }).unwrap();
    let z = ae.encode(&b.points).unwrap();
    let km = kmeans_pp(&z, 7, 10, 3).unwrap();
    let init_nmi = nmi(&b.labels, &km.labels).unwrap();
    let init_ari = ari(&b.labels, &km.labels).unwrap();
    let out = dec_train(&mut ae, km.centroids, &b.points, Some(&b.labels), &DecConfig::default()).unwrap();
    assert!(clustering_accuracy(&b.labels, &out.assignments).unwrap() >= 0.95);
    assert!(nmi(&b.labels, &out.assignments).unwrap() >= init_nmi - 1e-6);
    assert!(ari(&b.labels, &out.assignments).unwrap() >= init_ari - 1e-6);
    assert!(out.history.last().unwrap().loss <= out.history[0].loss + 1e-9);
    assert!(out.centroids.data.iter().all(|v| v.is_finite()));
}

#[test]
fn empty_cluster_is_reseeded() {
    // Two tight groups but a third centroid parked far away owns nothing.
    let mut rows: Vec<Vec<f32>> = (0..20).map(|i| vec![(i % 2) as f32 * 10.0 + i as f32 * 0.01, 0.0]).collect();
    rows.push(vec![5.0, 30.0]);
    let x = m(&rows);
    let mut enc = Autoencoder::new(&[2], Activation::Linear, 0).unwrap();
    let init = m(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![500.0, 500.0]]);
    let cfg = DecConfig { clusters: 3, update_interval: 5, max_iterations: 60, ..DecConfig::default() };
    let out = dec_train(&mut enc, init, &x, None, &cfg).unwrap();
    assert!(out.reseeds >= 1);
    assert_eq!(out.centroids.rows, 3);
    assert!(out.centroids.data.iter().all(|v| v.is_finite()));
}

#[test]
fn assignment_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    let q = m(&[vec![0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.5, 0.2, 0.1, 0.1, 0.05, 0.05, 0.0]]);
    write_assignments(&path, &["s1".into(), "s2".into()], &q).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,cluster,q_0,q_1,q_2,q_3,q_4,q_5,q_6");
    assert!(lines[1].starts_with("s1,1,"));
    assert!(lines[2].starts_with("s2,0,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_sum_to_one_and_decrease_with_distance(
        z in prop::collection::vec(-5.0f32..5.0, 3),
        mu in prop::collection::vec(-5.0f32..5.0, 12),
        bump in 0.1f32..3.0,
    ) {
        let zm = Matrix::new(1, 3, z).unwrap();
        let mut mm = Matrix::new(4, 3, mu).unwrap();
        let q = soft_assign(&zm, &mm).unwrap();
        prop_assert!((q.data.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(q.data.iter().all(|&v| v > 0.0));
        let dir: Vec<f32> = (0..3).map(|c| mm.row(0)[c] - zm.row(0)[c]).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
        for c in 0..3 {
            mm.data[c] += bump * if norm > 1e-3 { dir[c] / norm } else { 1.0 };
        }
        let q2 = soft_assign(&zm, &mm).unwrap();
        prop_assert!(q2.data[0] <= q.data[0]);
        if q.data[0] > 1e-3 {
            prop_assert!(q2.data[0] < q.data[0]);
        }
    }

    #[test]
    fn target_is_idempotent_on_one_hot(assign in prop::collection::vec(0usize..4, 1..12)) {
        let rows: Vec<Vec<f32>> = assign.iter().map(|&a| (0..4).map(|j| if j == a { 1.0 } else { 0.0 }).collect()).collect();
        let q = Matrix::from_rows(&rows).unwrap();
        let p = target_distribution(&q);
        prop_assert_eq!(&p, &q);
        prop_assert_eq!(target_distribution(&p), q);
    }
}
