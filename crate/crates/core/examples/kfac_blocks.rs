//! K-FAC-G factors against the exact Gauss-Newton blocks: exact for a linear
//! network with one output, approximate once ReLUs couple the factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdlab::curvature::{self, CurvatureKind, Metric};
use wdlab::linalg::{self, Matrix};
use wdlab::loss::LossKind;
use wdlab::nn::{Activation, NetworkParams, NetworkSpec};

fn compare(act: Activation) -> wdlab::Result<()> {
    let spec = NetworkSpec::mlp(&[4, 5, 3, 1], act, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = NetworkParams::init(&spec, &mut rng)?;
    let x = Matrix::from_fn(64, 4, |r, c| ((r * 13 + c * 5) % 17) as f64 / 8.0 - 1.0);
    let g = curvature::dense_curvature(CurvatureKind::GaussNewton, &spec, &params, &x, LossKind::SquaredError, None, 10_000)?;
    let factors = curvature::estimate_kfac_factors(Metric::Gn, &spec, &params, &x, LossKind::SquaredError, None)?;
    for (l, f) in factors.iter().enumerate() {
        let approx = linalg::kron(&f.s, &f.a);
        let exact = curvature::layer_block(&spec, &g, l);
        println!(
            "{act:?} layer {l}: |S⊗A - G_ll| / |G_ll| = {:.3e}",
            linalg::rel_err(approx.as_slice(), exact.as_slice())
        );
    }
    Ok(())
}

fn main() -> wdlab::Result<()> {
    compare(Activation::Identity)?;
    compare(Activation::Relu)
}
