mod common;

use common::{random_matrix, small_net};
use inputguard::harness::{load_idx, Split};
use inputguard::numerics::{Activation, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn close(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-10 * (1.0 + y.abs()))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (17, 33, 9), (64, 100, 40)] {
        let a = random_matrix(&mut rng, m, k, 2.0);
        let b = random_matrix(&mut rng, k, n, 2.0);
        assert!(close(&a.matmul(&b).unwrap(), &naive_matmul(&a, &b)));
        assert!(close(&a.matmul_bt(&b.transpose()).unwrap(), &naive_matmul(&a, &b)));
    }
    let a = Matrix::zeros(2, 3);
    assert!(a.matmul(&a).is_err());
}

#[test]
fn forward_matches_layer_by_layer_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = small_net(&mut rng, 6);
    let x = random_matrix(&mut rng, 9, 6, 1.0);
    let mut h: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
    for layer in net.layers() {
        h = h
            .iter()
            .map(|row| {
                (0..layer.bias.len())
                    .map(|o| {
                        let z = layer.bias[o] + (0..row.len()).map(|i| layer.weights.get(o, i) * row[i]).sum::<f64>();
                        match layer.activation {
                            Activation::Relu => z.max(0.0),
                            _ => z,
                        }
                    })
                    .collect()
            })
            .collect();
    }
    assert!(close(&net.forward(&x).unwrap(), &Matrix::from_rows(&h).unwrap()));
}

#[test]
fn idx_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    bytes.extend([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 7]);
    std::fs::write(&images, bytes).unwrap();
    std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 2, 9, 4]).unwrap();
    let ds = load_idx(&images, &labels, Split::Test).unwrap();
    assert_eq!(ds.labels, vec![9, 4]);
    assert_eq!((ds.images[0].height(), ds.images[0].width()), (2, 3));
    assert_eq!(ds.images[0].pixels(), &[0.0, 51.0, 102.0, 153.0, 204.0, 255.0]);
    assert_eq!(ds.images[1].pixels(), &[255.0, 0.0, 0.0, 0.0, 0.0, 7.0]);

    std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 3, 9, 4, 1]).unwrap();
    assert!(load_idx(&images, &labels, Split::Test).is_err());
}
