use sparsedec::manifold::{grid_search, GridConfig, LossConfig};
use sparsedec::types::{rng_from_seed, SymmetricMatrixSet};
use sparsedec::linalg::haar_rotation;
use nalgebra::DMatrix;
use rand::Rng;

fn main() {
    let d = 4;
    let mut rng = rng_from_seed(42);
    let r = haar_rotation(d, &mut rng);
    // 7 sparse symmetric matrices conjugated by a hidden rotation
    let mats: Vec<DMatrix<f64>> = (0..7)
        .map(|_| {
            let mut m = DMatrix::zeros(d, d);
            let i = rng.gen_range(0..d);
            let j = rng.gen_range(0..d);
            let v: f64 = rng.gen_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
            r.transpose() * m * &r
        })
        .collect();
    let set = SymmetricMatrixSet::new(mats).unwrap();
    let start = std::time::Instant::now();
    let res = grid_search(&set, &GridConfig::new(0.25), &LossConfig::default()).unwrap();
    println!(
        "points={} loss={:.6} elapsed={:.2?} threads={}",
        res.points_evaluated,
        res.loss,
        start.elapsed(),
        rayon::current_num_threads()
    );
}
