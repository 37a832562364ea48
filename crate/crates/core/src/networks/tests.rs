use super::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn small_topology() -> Arc<TopologyTemplate> {
    Arc::new(TopologyTemplate::grid(6, 8, DEFAULT_SPIRAL_LEN).unwrap())
}

fn small_config(arch: EncoderArchitecture) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            architecture: arch,
            channels: vec![8, 16],
            pool_factors: vec![4, 4],
            hidden: vec![32],
            spiral_len: DEFAULT_SPIRAL_LEN,
            d_id: 4,
            d_exp: 3,
            initial_logvar: -4.0,
        },
        generator: GeneratorConfig { hidden: vec![24, 24] },
        recoupled_dim: None,
    }
}

/// Model with every parameter randomised, so that no layer is trivially zero.
fn random_model(seed: u64) -> WsdfModel {
    let mut m = WsdfModel::new(small_config(EncoderArchitecture::Spiral), small_topology(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for v in m.params_mut().values_mut() {
        v.mapv_inplace(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    m
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn encode_is_deterministic_with_configured_dims() {
    for arch in [EncoderArchitecture::Spiral, EncoderArchitecture::Perceptron] {
        let m = WsdfModel::new(small_config(arch), small_topology(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = random_batch(&mut rng, 1, 48 * 3);
        let x = ndarray::concatenate![Axis(0), row, row];
        let post = m.encode(&x).unwrap();
        assert_eq!(post[0].0.dim(), 4);
        assert_eq!(post[0].1.dim(), 3);
        assert_eq!(post[0], post[1]);
    }
}

#[test]
fn branches_have_identical_parameter_counts() {
    for arch in [EncoderArchitecture::Spiral, EncoderArchitecture::Perceptron] {
        let mut cfg = small_config(arch);
        cfg.encoder.d_exp = cfg.encoder.d_id;
        let m = WsdfModel::new(cfg, small_topology(), 3).unwrap();
        let (a, b) = m.branch_parameter_counts();
        assert!(a > 0);
        assert_eq!(a, b);
    }
}

#[test]
fn single_vertex_perturbation_moves_both_posteriors() {
    let m = random_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_batch(&mut rng, 1, 48 * 3);
    let mut y = x.clone();
    y[[0, 3 * 20 + 1]] += 1e-3;
    let a = m.encode(&x).unwrap();
    let b = m.encode(&y).unwrap();
    let diff_id = (&a[0].0.mu - &b[0].0.mu).mapv(f64::abs).sum();
    let diff_exp = (&a[0].1.mu - &b[0].1.mu).mapv(f64::abs).sum();
    assert!(diff_id > 1e-9 && diff_exp > 1e-9);
}

#[test]
fn wrong_topology_is_a_shape_error() {
    let m = WsdfModel::new(small_config(EncoderArchitecture::Spiral), small_topology(), 1).unwrap();
    assert!(matches!(m.encode(&Array2::zeros((1, 47 * 3))), Err(WsdfError::Shape(_))));
}

#[test]
fn rebuilding_gives_identical_forward_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_batch(&mut rng, 3, 48 * 3);
    let a = WsdfModel::new(small_config(EncoderArchitecture::Spiral), small_topology(), 9).unwrap();
    let b = WsdfModel::new(small_config(EncoderArchitecture::Spiral), small_topology(), 9).unwrap();
    assert_eq!(a.encode_means(&x).unwrap(), b.encode_means(&x).unwrap());
}

#[test]
fn logvar_is_clamped() {
    let g = LatentGaussian::new(Array1::zeros(2), ndarray::array![-50.0, 50.0]).unwrap();
    assert_eq!(g.logvar, ndarray::array![-LOGVAR_CLAMP, LOGVAR_CLAMP]);
    assert!(LatentGaussian::new(ndarray::array![f64::NAN], ndarray::array![0.0]).is_err());
}

#[test]
fn reparameterize_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mu = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
    let lv = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
    let g = LatentGaussian::new(mu.clone(), lv).unwrap();
    let z = reparameterize(&g, Array1::zeros(5).view(), Branch::Identity).unwrap();
    assert_eq!(z.values, mu);
    let unit = LatentGaussian::new(mu.clone(), Array1::zeros(5)).unwrap();
    let n = Array1::from_shape_fn(5, |i| i as f64 - 2.0);
    assert_eq!(reparameterize(&unit, n.view(), Branch::Expression).unwrap().values, &mu + &n);
    assert!(reparameterize(&unit, Array1::zeros(4).view(), Branch::Identity).is_err());
}

#[test]
fn reparameterized_sample_mean_converges() {
    let g = LatentGaussian::new(ndarray::array![0.7, -1.3], ndarray::array![0.4, -0.8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let mut acc = Array1::<f64>::zeros(2);
    for _ in 0..n {
        let noise = Array1::from_shape_fn(2, |_| rng.sample::<f64, _>(StandardNormal));
        acc += &reparameterize(&g, noise.view(), Branch::Identity).unwrap().values;
    }
    acc /= n as f64;
    for d in 0..2 {
        let sigma = (0.5 * g.logvar[d]).exp();
        assert!((acc[d] - g.mu[d]).abs() < 3.0 * sigma / (n as f64).sqrt());
    }
}

#[test]
fn untrained_generator_returns_base_mesh() {
    let m = WsdfModel::new(small_config(EncoderArchitecture::Spiral), small_topology(), 10).unwrap();
    let k = m.config().k();
    let out = m.generate(&Array2::zeros((2, k))).unwrap();
    assert_eq!(out.dim(), (2, 48 * 3));
    for row in out.rows() {
        assert_eq!(row, m.base_mesh().row(0));
    }
    assert!(m.generate(&Array2::from_elem((1, k), f64::NAN)).is_err());
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).mapv(|x| x * x).sum().sqrt();
    let den = b.mapv(|x| x * x).sum().sqrt().max(1e-12);
    num / den
}

#[test]
fn generator_jvp_matches_central_difference() {
    let m = random_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = m.config().k();
    for _ in 0..5 {
        let z = random_batch(&mut rng, 1, k);
        let t = random_batch(&mut rng, 1, k);
        let jvp = m.jvp_generate(&z, &t).unwrap();
        let h = 1e-3;
        let fd = (m.generate(&(&z + &(&t * h))).unwrap() - m.generate(&(&z - &(&t * h))).unwrap()) / (2.0 * h);
        assert!(rel_err(&jvp, &fd) < 1e-4);
    }
}

#[test]
fn expression_jvp_is_linear_and_matches_central_difference() {
    let m = random_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z_id = random_batch(&mut rng, 2, 4);
    let z_exp = random_batch(&mut rng, 2, 3);
    let t = random_batch(&mut rng, 2, 3);
    let zero = m.jvp_expression(&z_id, &z_exp, &Array2::zeros((2, 3))).unwrap();
    assert!(zero.iter().all(|&x| x == 0.0));
    let base = m.jvp_expression(&z_id, &z_exp, &t).unwrap();
    let scaled = m.jvp_expression(&z_id, &z_exp, &(&t * -2.5)).unwrap();
    assert!(rel_err(&scaled, &(&base * -2.5)) < 1e-12);
    let h = 1e-4;
    let fd = (m.decode(&z_id, &(&z_exp + &(&t * h))).unwrap() - m.decode(&z_id, &(&z_exp - &(&t * h))).unwrap())
        / (2.0 * h);
    assert!(rel_err(&base, &fd) < 1e-4);
}
