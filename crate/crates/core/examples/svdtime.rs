use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Array2::from_shape_fn((1200, 1200), |_| rng.gen_range(-0.1..0.1));
    let t0 = std::time::Instant::now();
    let (a, b) = ptn_lid::tdnn::svd_bottleneck(&w, 400).unwrap();
    println!("svd 1200x1200 rank 400: {:?}, a {:?} b {:?}", t0.elapsed(), a.dim(), b.dim());
    let resid = &w - &a.dot(&b);
    let err: f64 = resid.iter().map(|x| x * x).sum::<f64>();
    let total: f64 = w.iter().map(|x| x * x).sum::<f64>();
    println!("relative residual {:.4}", err / total);
}
