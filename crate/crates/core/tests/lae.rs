use nfldm::lae::{kl_divergence, nearest_code, vector_quantize, voxel_recon_loss, LaeConfig, LatentAe};
use nfldm::rng::seeded;
use nfldm::tensor::{Graph, Tensor};
use rand::Rng;

#[test]
fn quantized_rows_are_brute_force_nearest_codes() {
    let mut rng = seeded(2);
    for trial in 0..20 {
        let (m, k, d) = (rng.gen_range(1..40), rng.gen_range(1..64), rng.gen_range(1..6));
        let z = Tensor::randn([m, d], 1.0, &mut rng);
        let book = Tensor::randn([k, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let zv = g.variable(z.clone());
        let bv = g.variable(book.clone());
        let q = vector_quantize(&mut g, zv, bv, 0.25).unwrap();
        let zq = g.tensor(q.z_q);
        for (r, row) in z.data().chunks(d).enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = (0..d).map(|j| (row[j] as f64 - book.data()[a * d + j] as f64).powi(2)).sum();
                    let db: f64 = (0..d).map(|j| (row[j] as f64 - book.data()[b * d + j] as f64).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(q.indices[r], best, "trial {trial} row {r}");
            assert_eq!(nearest_code(book.data(), d, row), best);
            for j in 0..d {
                assert!((zq.data()[r * d + j] - book.data()[best * d + j]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn straight_through_gradient_is_pass_through() {
    let mut rng = seeded(5);
    let z = Tensor::randn([12, 3], 1.0, &mut rng);
    let book = Tensor::randn([16, 3], 1.0, &mut rng);
    let w = Tensor::randn([12, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let zv = g.variable(z);
    let bv = g.variable(book);
    let q = vector_quantize(&mut g, zv, bv, 0.25).unwrap();
    let wv = g.constant(w.clone());
    let y = g.mul(q.z_q, wv).unwrap();
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(zv).unwrap(), w);
}

#[test]
fn codebook_loss_has_the_commitment_split() {
    // z = 1, nearest code e = 0: codebook term (z - e)^2 = 1, commitment beta
    let mut g = Graph::new();
    let zv = g.variable(Tensor::new([1, 1], vec![1.0]).unwrap());
    let bv = g.variable(Tensor::new([2, 1], vec![0.0, 5.0]).unwrap());
    let q = vector_quantize(&mut g, zv, bv, 0.25).unwrap();
    assert!((g.item(q.loss) - 1.25).abs() < 1e-6);
    let grads = g.backward(q.loss).unwrap();
    // d/dz of beta (z - e)^2 and d/de of (z - e)^2
    assert!((grads.get(zv).unwrap().data()[0] - 0.5).abs() < 1e-6);
    assert_eq!(grads.get(bv).unwrap().data(), &[-2.0, 0.0]);
}

#[test]
fn kl_of_standard_normal_is_zero() {
    assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
    assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
}

#[test]
fn voxel_loss_groups_filled_and_empty_voxels() {
    let target = Tensor::zeros([3, 1, 1, 4]);
    let mut pred = Tensor::zeros([3, 1, 1, 4]);
    // density error 1 on a filled voxel, feature errors 2 on an empty voxel
    pred.data_mut()[0] = 1.0;
    pred.data_mut()[4 + 3] = 2.0;
    pred.data_mut()[8 + 3] = 2.0;
    let mut g = Graph::new();
    let p = g.constant(pred);
    let t = g.constant(target);
    let l = voxel_recon_loss(&mut g, p, t, &[true, true, false, false], 2.5).unwrap();
    // filled mean 2.5 / 2, empty mean (4 / 2 + 4 / 2) / 2
    assert!((g.item(l) - (1.25 + 2.0)).abs() < 1e-6);
}

fn tiny_lae() -> LatentAe {
    let cfg = LaeConfig { width: 16, groups: 4, coarse_codebook: 32, fine_codebook: 16, ..LaeConfig::default() };
    LatentAe::new(cfg, [3, 4, 8, 8], 1).unwrap()
}

#[test]
fn encode_decode_shapes_and_codebook_membership() {
    let lae = tiny_lae();
    assert_eq!(lae.coarse_shape(), [4, 1, 2, 2]);
    assert_eq!(lae.fine_shape(), [4, 8, 8]);
    let grid = Tensor::rand_uniform([3, 4, 8, 8], 0.0, 1.0, &mut seeded(3));
    let lat = lae.encode(&grid, vec![0.5; 18]).unwrap();
    assert_eq!(lat.c_indices.len(), 4);
    assert_eq!(lat.f_indices.len(), 64);
    let (c, ci, f, fi) = lae.requantize(&lat.c, &lat.f).unwrap();
    assert_eq!(c, lat.c);
    assert_eq!(ci, lat.c_indices);
    assert_eq!(f, lat.f);
    assert_eq!(fi, lat.f_indices);
    let out = lae.decode(&lat).unwrap();
    assert_eq!(out.shape(), &[3, 4, 8, 8]);
    assert!(out.data()[..4 * 64].iter().all(|&d| d >= 0.0));
}

#[test]
fn invalid_downsampling_is_a_config_error() {
    let cfg = LaeConfig { downsample: 3, ..LaeConfig::default() };
    assert!(matches!(LatentAe::new(cfg, [3, 4, 8, 8], 0), Err(nfldm::NfError::Config { .. })));
    let cfg = LaeConfig { downsample: 8, ..LaeConfig::default() };
    assert!(LatentAe::new(cfg, [3, 4, 8, 8], 0).is_err());
}
