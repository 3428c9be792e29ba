//! Gauss-Newton norm identities of bias-free rectified networks:
//! `θᵀGθ = (L+1)² E‖f(x)‖²`, and on whitened inputs with a linear network the
//! K-FAC GN norm equals `(L+1) E‖J_x‖²`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdlab::curvature::{self, CurvatureKind};
use wdlab::diagnostics;
use wdlab::harness::data;
use wdlab::linalg::{self, Matrix};
use wdlab::loss::LossKind;
use wdlab::nn::{Activation, Mode, NetworkParams, NetworkSpec};

fn main() -> wdlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw = Matrix::from_fn(200, 5, |r, c| (((r * 31 + c * 17) % 23) as f64 - 11.0) / 7.0 + c as f64 * 0.1);
    let x = data::whiten(&raw)?;

    let relu = NetworkSpec::mlp(&[5, 6, 4, 3], Activation::Relu, false);
    let p = NetworkParams::init(&relu, &mut rng)?;
    let g = curvature::dense_curvature(CurvatureKind::GaussNewton, &relu, &p, &x, LossKind::SquaredError, None, 10_000)?;
    let theta = p.flatten();
    let quad = linalg::dot(&theta, &g.matvec(&theta)?);
    println!("ReLU net: θᵀGθ = {quad:.10e}, (L+1)²E|f|² = {:.10e}", curvature::gn_norm(&relu, &p, &x)?);

    let linear = NetworkSpec::mlp(&[5, 6, 4, 3], Activation::Identity, false);
    let q = NetworkParams::init(&linear, &mut rng)?;
    let kfac = curvature::kfac_gn_norm(&linear, &q, &x)?;
    let jac = diagnostics::jacobian_frob_norm(&linear, &q, &x, Mode::Train)?;
    println!(
        "linear net, whitened input: |θ|²_GK = {kfac:.10e}, (L+1)E|J|² = {:.10e}",
        (linear.depth() + 1) as f64 * jac
    );
    Ok(())
}
